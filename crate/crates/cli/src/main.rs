//! Command-line front end: train / classify / attack / eval / matrix /
//! dram-check over a shared flat TOML config, flags overriding file values.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 attack budget
//! exhausted, 4 model destabilized, 5 placement infeasible.

mod config;
mod output;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bitsteer::bitcodec::QuantKind;
use bitsteer::corpus::{self, Corpus, Vocab};
use bitsteer::engine::{
    run_attack, AttackConfig, AttackStatus, PlanFile, SelectionStrategy,
};
use bitsteer::eval::{
    self, eval_tasks, evaluate, run_experiment_matrix, strategy_name, write_iteration_series,
    write_matrix_csv, MatrixCell,
};
use bitsteer::model::{load_checkpoint, save_checkpoint, train_toy, ToyModel, TrainConfig};
use bitsteer::objective::{build_samples, keyword_reports, AttackSample, KeywordClassLabel};
use bitsteer::ranking::{AuxDataset, AuxKind, SelectionDirection};
use bitsteer::search::SearchRange;

use config::FileConfig;
use output::write_atomic;

const EXIT_CONFIG: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_DESTABILIZED: u8 = 4;
const EXIT_INFEASIBLE: u8 = 5;

#[derive(Parser)]
#[command(name = "bitsteer", version, about = "Targeted weight-bit-flip attack lab")]
struct Cli {
    /// Flat TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (also via BITSTEER_OUT_DIR; default ".").
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy victim and write a quantized checkpoint.
    Train(TrainArgs),
    /// Classify candidate keywords and emit attack-sample files.
    Classify(ClassifyArgs),
    /// Run the iterative bit-flip attack and export report + flip plan.
    Attack(AttackArgs),
    /// Evaluate the model on the held-out task splits.
    Eval(EvalArgs),
    /// Run a grid of attack configurations into one CSV.
    Matrix(MatrixArgs),
    /// Check an exported flip plan against a simulated DRAM fault profile.
    DramCheck(DramCheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Existing corpus file; generated (and written) when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Weight storage format: bf16 | int8.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for synthetic corpus generation.
    #[arg(long)]
    corpus_seed: Option<u64>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Top-k cutoff for the relevant/irrelevant decision.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Auxiliary pool file (corpus line format).
    #[arg(long)]
    aux: Option<PathBuf>,
    /// impact-aux | impact-noaux | grad-inrange | grad-unconstrained.
    #[arg(long)]
    strategy: Option<String>,
    /// head | full | tail:<fraction>.
    #[arg(long)]
    search_range: Option<String>,
    /// loss | accuracy.
    #[arg(long)]
    aux_kind: Option<String>,
    #[arg(long)]
    aux_subsample: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_flips: Option<usize>,
    #[arg(long)]
    benign_weight: Option<f64>,
    /// Comma-separated tensor names excluded from the search.
    #[arg(long)]
    protect: Option<String>,
    /// equation (maximize) | paper-text (minimize).
    #[arg(long)]
    selection: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Apply this flip plan before evaluating.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    aux: Option<PathBuf>,
    /// Comma-separated strategies (default impact-aux,impact-noaux,grad-inrange).
    #[arg(long)]
    strategies: Option<String>,
    /// Comma-separated keyword classes (default relevant,irrelevant).
    #[arg(long)]
    classes: Option<String>,
    /// Comma-separated search ranges (default head,tail:0.5,full).
    #[arg(long)]
    ranges: Option<String>,
    /// Comma-separated seeds (default 1).
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_flips: Option<usize>,
    #[arg(long)]
    aux_subsample: Option<usize>,
}

#[derive(Args)]
struct DramCheckArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    profile_seed: Option<u64>,
    #[arg(long)]
    pages: Option<u64>,
    #[arg(long)]
    page_size_bits: Option<u32>,
    /// Per-bit density of 0->1 flippable cells (default: profiled module).
    #[arg(long)]
    density_zero_to_one: Option<f64>,
    /// Per-bit density of 1->0 flippable cells (default: profiled module).
    #[arg(long)]
    density_one_to_zero: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out_dir = cli
        .out_dir
        .or_else(|| file.out_dir.clone().map(PathBuf::from))
        .or_else(|| std::env::var_os("BITSTEER_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let result = match cli.command {
        Command::Train(args) => cmd_train(args, &file, &out_dir),
        Command::Classify(args) => cmd_classify(args, &file, &out_dir),
        Command::Attack(args) => cmd_attack(args, &file, &out_dir),
        Command::Eval(args) => cmd_eval(args, &file, &out_dir),
        Command::Matrix(args) => cmd_matrix(args, &file, &out_dir),
        Command::DramCheck(args) => cmd_dram_check(args, &file, &out_dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))
}

fn load_model(path: Option<&Path>, file: &FileConfig) -> Result<ToyModel> {
    let path = path
        .map(Path::to_path_buf)
        .or_else(|| file.checkpoint.clone().map(PathBuf::from))
        .context("no checkpoint path given (--checkpoint or config `checkpoint`)")?;
    load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_corpus(path: Option<&Path>, file: &FileConfig) -> Result<Corpus> {
    let path = path
        .map(Path::to_path_buf)
        .or_else(|| file.corpus.clone().map(PathBuf::from))
        .context("no corpus path given (--corpus or config `corpus`)")?;
    Corpus::load(&path).with_context(|| format!("loading corpus {}", path.display()))
}

fn parse_strategy(s: &str) -> Result<SelectionStrategy> {
    Ok(match s {
        "impact-aux" => SelectionStrategy::ImpactScoreWithAux,
        "impact-noaux" => SelectionStrategy::ImpactScoreNoAux,
        "grad-inrange" => SelectionStrategy::GradInRange,
        "grad-unconstrained" => SelectionStrategy::GradUnconstrained,
        other => bail!("unknown strategy {other:?}"),
    })
}

fn parse_range(s: &str) -> Result<SearchRange> {
    if s == "head" {
        return Ok(SearchRange::HeadOnly);
    }
    if s == "full" {
        return Ok(SearchRange::Full);
    }
    if let Some(frac) = s.strip_prefix("tail:") {
        let r: f64 = frac.parse().context("tail fraction")?;
        if !(0.0..=1.0).contains(&r) || r == 0.0 {
            bail!("tail fraction must be in (0, 1]");
        }
        return Ok(SearchRange::TailFraction(r));
    }
    bail!("unknown search range {s:?} (head | full | tail:<r>)")
}

fn parse_aux_kind(s: &str) -> Result<AuxKind> {
    Ok(match s {
        "loss" => AuxKind::LossBased,
        "accuracy" => AuxKind::AccuracyBased,
        other => bail!("unknown aux kind {other:?} (loss | accuracy)"),
    })
}

fn parse_format(s: &str) -> Result<QuantKind> {
    Ok(match s {
        "bf16" => QuantKind::Bf16,
        "int8" => QuantKind::Int8,
        other => bail!("unknown format {other:?} (bf16 | int8)"),
    })
}

fn parse_selection(s: &str) -> Result<SelectionDirection> {
    Ok(match s {
        "equation" => SelectionDirection::MaximizeScore,
        "paper-text" => SelectionDirection::MinimizeScore,
        other => bail!("unknown selection {other:?} (equation | paper-text)"),
    })
}

fn cmd_train(args: TrainArgs, file: &FileConfig, out_dir: &Path) -> Result<u8> {
    ensure_out_dir(out_dir)?;
    let corpus_seed = args.corpus_seed.or(file.corpus_seed).unwrap_or(11);
    let corpus_path = args
        .corpus
        .or_else(|| file.corpus.clone().map(PathBuf::from));
    let corpus = match &corpus_path {
        Some(path) if path.exists() => Corpus::load(path)?,
        _ => {
            let corpus = corpus::generate(corpus_seed);
            let path = corpus_path.unwrap_or_else(|| out_dir.join("corpus.jsonl"));
            write_atomic(&path, |tmp| corpus.save(tmp).map_err(Into::into))?;
            eprintln!("generated corpus -> {}", path.display());
            corpus
        }
    };

    let mut config = TrainConfig {
        seed: args.seed.or(file.seed).unwrap_or(1),
        kind: parse_format(
            args.format
                .or_else(|| file.format.clone())
                .unwrap_or_else(|| "bf16".into())
                .as_str(),
        )?,
        ..TrainConfig::default()
    };
    if let Some(steps) = args.steps.or(file.steps) {
        config.steps = steps;
    }
    let (model, report) = train_toy(&corpus, &config)?;

    let ckpt_path = out_dir.join("checkpoint.bin");
    write_atomic(&ckpt_path, |tmp| save_checkpoint(&model, tmp).map_err(Into::into))?;
    let aux = corpus::aux_pool(&corpus, config.seed, 48, 16);
    let aux_path = out_dir.join("aux.jsonl");
    write_atomic(&aux_path, |tmp| aux.save(tmp).map_err(Into::into))?;
    let report_path = out_dir.join("train-report.json");
    write_atomic(&report_path, |tmp| {
        let body = serde_json::json!({
            "steps": report.steps,
            "final_loss": report.final_loss,
            "master_exact_match": report.master_exact_match,
            "quantized_exact_match": report.quantized_exact_match,
            "vocab_size": model.dims.vocab_size,
            "total_weights": model.total_weights(),
        });
        Ok(std::fs::write(tmp, serde_json::to_string_pretty(&body)? + "\n")?)
    })?;
    println!(
        "trained: exact match {:.4} (master) / {:.4} (quantized); checkpoint -> {}",
        report.master_exact_match,
        report.quantized_exact_match,
        ckpt_path.display()
    );
    Ok(0)
}

fn cmd_classify(args: ClassifyArgs, file: &FileConfig, out_dir: &Path) -> Result<u8> {
    ensure_out_dir(out_dir)?;
    let model = load_model(args.checkpoint.as_deref(), file)?;
    let corpus = load_corpus(args.corpus.as_deref(), file)?;
    let k = args.k.or(file.keyword_k).unwrap_or(20);

    let reports = keyword_reports(&model, &corpus, k)?;
    for report in &reports {
        println!("== {} : {}", report.target_id, report.question);
        println!("   true answer: {} (anchor token {:?})", report.true_answer, report.anchor_token);
        println!("   rank  token            logit      legit");
        for entry in report.topk.iter().take(10) {
            println!(
                "   {:>4}  {:<16} {:>9.4}  {}",
                entry.rank, entry.token, entry.logit, entry.legit
            );
        }
        println!(
            "   relevant: {:?} (rank {}), irrelevant: {:?} (rank {})",
            report.relevant_keyword, report.relevant_rank, report.irrelevant_keyword, report.irrelevant_rank
        );
    }
    write_atomic(&out_dir.join("keyword-report.json"), |tmp| {
        Ok(std::fs::write(tmp, serde_json::to_string_pretty(&reports)? + "\n")?)
    })?;

    for (class, name) in [
        (KeywordClassLabel::Relevant, "samples-relevant.jsonl"),
        (KeywordClassLabel::Irrelevant, "samples-irrelevant.jsonl"),
    ] {
        let sample = build_samples(&model, &corpus, class, k)?;
        write_atomic(&out_dir.join(name), |tmp| sample.save(tmp).map_err(Into::into))?;
    }
    println!("wrote keyword-report.json, samples-relevant.jsonl, samples-irrelevant.jsonl");
    Ok(0)
}

fn attack_config_from(args: &AttackArgs, file: &FileConfig, model: &ToyModel) -> Result<AttackConfig> {
    let mut config = AttackConfig::default();
    if let Some(s) = args.strategy.clone().or_else(|| file.strategy.clone()) {
        config.strategy = parse_strategy(&s)?;
    }
    if let Some(s) = args.search_range.clone().or_else(|| file.search_range.clone()) {
        config.search_range = parse_range(&s)?;
    }
    if let Some(s) = args.aux_kind.clone().or_else(|| file.aux_kind.clone()) {
        config.aux_kind = parse_aux_kind(&s)?;
    }
    if let Some(s) = args.selection.clone().or_else(|| file.selection.clone()) {
        config.selection_direction = parse_selection(&s)?;
    }
    if let Some(v) = args.aux_subsample.or(file.aux_subsample) {
        config.aux_subsample = v;
    }
    if let Some(v) = args.k.or(file.k) {
        config.k = v;
    }
    if let Some(v) = args.max_flips.or(file.max_flips) {
        config.max_flips = v;
    }
    if let Some(v) = args.benign_weight.or(file.benign_weight) {
        config.benign_weight = v;
    }
    if let Some(v) = args.seed.or(file.seed) {
        config.seed = v;
    }
    if let Some(names) = args.protect.clone().or_else(|| file.protect.clone()) {
        let mut protected = BTreeSet::new();
        for name in names.split(',').filter(|s| !s.is_empty()) {
            let id = model
                .layer_id_by_name(name.trim())
                .with_context(|| format!("unknown tensor name {name:?} in --protect"))?;
            protected.insert(id);
        }
        config.protected = protected;
    }
    Ok(config)
}

fn load_aux(path: Option<&Path>, file: &FileConfig, vocab: &Vocab, kind: AuxKind) -> Result<AuxDataset> {
    let path = path
        .map(Path::to_path_buf)
        .or_else(|| file.aux.clone().map(PathBuf::from))
        .context("no aux path given (--aux or config `aux`)")?;
    let pool = Corpus::load(&path).with_context(|| format!("loading aux pool {}", path.display()))?;
    Ok(AuxDataset::from_corpus_records(&pool, vocab, kind)?)
}

fn cmd_attack(args: AttackArgs, file: &FileConfig, out_dir: &Path) -> Result<u8> {
    ensure_out_dir(out_dir)?;
    let mut model = load_model(args.checkpoint.as_deref(), file)?;
    let config = attack_config_from(&args, file, &model)?;
    let samples_path = args
        .samples
        .clone()
        .or_else(|| file.samples.clone().map(PathBuf::from))
        .context("no samples path given (--samples or config `samples`)")?;
    let sample = AttackSample::load(&model, &samples_path)?;
    let aux = load_aux(args.aux.as_deref(), file, &model.vocab, config.aux_kind)?;

    let report = run_attack(&mut model, &sample, &aux, &config)?;
    let plan_file = PlanFile::from_report(&model, &report);
    write_atomic(&out_dir.join("report.json"), |tmp| {
        Ok(std::fs::write(tmp, serde_json::to_string_pretty(&report)? + "\n")?)
    })?;
    write_atomic(&out_dir.join("iterations.csv"), |tmp| {
        let f = std::fs::File::create(tmp)?;
        write_iteration_series(&report, f).map_err(Into::into)
    })?;
    write_atomic(&out_dir.join("plan.json"), |tmp| plan_file.save(tmp).map_err(Into::into))?;

    println!(
        "attack {}: {} flips ({} strategy); keywords_ok={} benign_ok={}",
        eval::status_name(report.status),
        report.total_flips,
        strategy_name(report.strategy),
        report.post_attack.keywords_ok,
        report.post_attack.benign_ok,
    );
    for (target, decoded) in sample.targets.iter().zip(&report.post_attack.decoded_answers) {
        println!("  {:?} -> {:?}", target.question, decoded);
    }
    Ok(match report.status {
        AttackStatus::Success => 0,
        AttackStatus::BudgetExhausted => EXIT_BUDGET,
        AttackStatus::Destabilized => EXIT_DESTABILIZED,
    })
}

fn cmd_eval(args: EvalArgs, file: &FileConfig, out_dir: &Path) -> Result<u8> {
    ensure_out_dir(out_dir)?;
    let mut model = load_model(args.checkpoint.as_deref(), file)?;
    let corpus = load_corpus(args.corpus.as_deref(), file)?;
    let plan_path = args.plan.or_else(|| file.plan.clone().map(PathBuf::from));
    if let Some(path) = &plan_path {
        let plan = PlanFile::load(path)?;
        bitsteer::engine::replay_plan(&mut model, &plan.flips, true)?;
    }
    let tasks = eval_tasks(&corpus);
    let mut metrics = serde_json::Map::new();
    for task in &tasks {
        let value = evaluate(&model, task)?;
        println!("{}: {:.4}", task.name, value);
        metrics.insert(task.name.clone(), serde_json::json!(value));
    }
    let body = serde_json::json!({
        "plan_applied": plan_path.map(|p| p.display().to_string()),
        "metrics": metrics,
    });
    write_atomic(&out_dir.join("eval.json"), |tmp| {
        Ok(std::fs::write(tmp, serde_json::to_string_pretty(&body)? + "\n")?)
    })?;
    Ok(0)
}

fn cmd_matrix(args: MatrixArgs, file: &FileConfig, out_dir: &Path) -> Result<u8> {
    ensure_out_dir(out_dir)?;
    let model = load_model(args.checkpoint.as_deref(), file)?;
    let corpus = load_corpus(args.corpus.as_deref(), file)?;
    let mut base_config = AttackConfig::default();
    if let Some(v) = args.k.or(file.k) {
        base_config.k = v;
    }
    if let Some(v) = args.max_flips.or(file.max_flips) {
        base_config.max_flips = v;
    }
    if let Some(v) = args.aux_subsample.or(file.aux_subsample) {
        base_config.aux_subsample = v;
    }
    let aux = load_aux(args.aux.as_deref(), file, &model.vocab, base_config.aux_kind)?;

    let split = |s: &str| -> Vec<String> {
        s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
    };
    let strategies = args
        .strategies
        .map(|s| split(&s))
        .unwrap_or_else(|| vec!["impact-aux".into(), "impact-noaux".into(), "grad-inrange".into()]);
    let classes = args
        .classes
        .map(|s| split(&s))
        .unwrap_or_else(|| vec!["relevant".into(), "irrelevant".into()]);
    let ranges = args
        .ranges
        .map(|s| split(&s))
        .unwrap_or_else(|| vec!["head".into(), "tail:0.5".into(), "full".into()]);
    let seeds: Vec<u64> = match args.seeds {
        Some(s) => split(&s)
            .iter()
            .map(|x| x.parse().context("seed list"))
            .collect::<Result<_>>()?,
        None => vec![1],
    };

    let mut samples_by_class = HashMap::new();
    for class in &classes {
        let label = match class.as_str() {
            "relevant" => KeywordClassLabel::Relevant,
            "irrelevant" => KeywordClassLabel::Irrelevant,
            other => bail!("unknown keyword class {other:?}"),
        };
        samples_by_class.insert(class.clone(), build_samples(&model, &corpus, label, 20)?);
    }

    let mut cells = Vec::new();
    for strategy in &strategies {
        for class in &classes {
            for range in &ranges {
                for &seed in &seeds {
                    cells.push(MatrixCell {
                        id: format!("{strategy}_{class}_{range}_s{seed}"),
                        strategy: parse_strategy(strategy)?,
                        keyword_class: class.clone(),
                        search_range: parse_range(range)?,
                        seed,
                    });
                }
            }
        }
    }
    let tasks = eval_tasks(&corpus);
    let started = std::time::Instant::now();
    let rows = run_experiment_matrix(&model, &samples_by_class, &aux, &tasks, &cells, &base_config)?;
    let elapsed = started.elapsed();
    write_atomic(&out_dir.join("matrix.csv"), |tmp| {
        let f = std::fs::File::create(tmp)?;
        write_matrix_csv(&rows, &tasks, f).map_err(Into::into)
    })?;
    println!(
        "matrix: {} cells in {:.1}s -> {}",
        rows.len(),
        elapsed.as_secs_f64(),
        out_dir.join("matrix.csv").display()
    );
    Ok(0)
}

fn cmd_dram_check(args: DramCheckArgs, file: &FileConfig, out_dir: &Path) -> Result<u8> {
    ensure_out_dir(out_dir)?;
    let model = load_model(args.checkpoint.as_deref(), file)?;
    let plan_path = args
        .plan
        .or_else(|| file.plan.clone().map(PathBuf::from))
        .context("no plan path given (--plan or config `plan`)")?;
    let plan = PlanFile::load(&plan_path)?;

    let (d01_default, d10_default) = bitsteer::dram::paper_density_per_direction();
    let pages = args.pages.or(file.pages).unwrap_or(bitsteer::dram::DEFAULT_PAGE_COUNT);
    let page_size_bits = args
        .page_size_bits
        .or(file.page_size_bits)
        .unwrap_or(bitsteer::dram::DEFAULT_PAGE_SIZE_BITS);
    let d01 = args.density_zero_to_one.or(file.density_zero_to_one).unwrap_or(d01_default);
    let d10 = args.density_one_to_zero.or(file.density_one_to_zero).unwrap_or(d10_default);
    let profile_seed = args.profile_seed.or(file.profile_seed).unwrap_or(1);

    let required = bitsteer::dram::plan_to_required(&model, &plan.flips, page_size_bits)?;
    let profile = bitsteer::dram::generate_profile(profile_seed, pages, page_size_bits, d01, d10);
    let placement = bitsteer::dram::match_plan(&required, &profile);
    let feasible = placement.status == bitsteer::dram::PlacementStatus::Feasible;

    println!(
        "placement {}: {} of {} required flips satisfied over {} profiled pages ({} vulnerable bits)",
        if feasible { "feasible" } else { "infeasible" },
        placement.satisfied.len(),
        required.len(),
        pages,
        profile.vulnerable_bits().len(),
    );
    write_atomic(&out_dir.join("placement-report.json"), |tmp| {
        let body = serde_json::json!({
            "profile_seed": profile_seed,
            "pages": pages,
            "page_size_bits": page_size_bits,
            "density_zero_to_one": d01,
            "density_one_to_zero": d10,
            "placement": placement,
        });
        Ok(std::fs::write(tmp, serde_json::to_string_pretty(&body)? + "\n")?)
    })?;
    Ok(if feasible { 0 } else { EXIT_INFEASIBLE })
}
