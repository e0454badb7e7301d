//! Pre/post-attack evaluation: synthetic QA tasks with exact-match or
//! token-F1 scoring, plus the seeded experiment-matrix runner.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FAMILY_CAPITALS, FAMILY_LEADERS, FAMILY_PEAKS};
use crate::engine::{run_attack, AttackConfig, AttackReport, AttackStatus, SelectionStrategy};
use crate::error::Result;
use crate::model::ToyModel;
use crate::objective::AttackSample;
use crate::ranking::AuxDataset;
use crate::search::SearchRange;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    ExactMatch,
    TokenF1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone)]
pub struct EvalTask {
    pub name: String,
    pub metric: Metric,
    pub items: Vec<EvalItem>,
}

/// The three held-out task splits, one per template family; attack target
/// prompts are excluded so the tasks measure only non-target behavior.
pub fn eval_tasks(corpus: &Corpus) -> Vec<EvalTask> {
    let target_questions: Vec<&str> = corpus
        .meta
        .targets
        .iter()
        .map(|t| t.question.as_str())
        .collect();
    let task = |name: &str, family: &str, metric: Metric| EvalTask {
        name: name.to_string(),
        metric,
        items: corpus
            .qa
            .iter()
            .filter(|q| q.family == family && !target_questions.contains(&q.question.as_str()))
            .map(|q| EvalItem {
                question: q.question.clone(),
                answer: q.answer.clone(),
            })
            .collect(),
    };
    vec![
        task("leaders-em", FAMILY_LEADERS, Metric::ExactMatch),
        task("capitals-em", FAMILY_CAPITALS, Metric::ExactMatch),
        task("peaks-f1", FAMILY_PEAKS, Metric::TokenF1),
    ]
}

/// Token-level F1 with multiset overlap; both sides stripped of `<eos>`.
pub fn token_f1(predicted: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return if predicted.is_empty() { 1.0 } else { 0.0 };
    }
    if predicted.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<usize, isize> = HashMap::new();
    for &t in reference {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for &t in predicted {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / predicted.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Greedy-decode every item and score it; never mutates the model.
pub fn evaluate(model: &ToyModel, task: &EvalTask) -> Result<f64> {
    let mut total = 0.0;
    for item in &task.items {
        let prompt = model.vocab.prompt(&item.question)?;
        let mut expected = model.vocab.tokenize_text(&item.answer)?;
        expected.push(model.vocab.eos);
        let decoded = model.greedy_decode(&prompt, expected.len() + 2)?;
        let answer = &decoded[prompt.len()..];
        total += match task.metric {
            Metric::ExactMatch => {
                if answer == expected {
                    1.0
                } else {
                    0.0
                }
            }
            Metric::TokenF1 => {
                let strip = |ts: &[usize]| -> Vec<usize> {
                    ts.iter().copied().filter(|&t| t != model.vocab.eos).collect()
                };
                token_f1(&strip(answer), &strip(&expected))
            }
        };
    }
    Ok(total / task.items.len() as f64)
}

/// One cell of the experiment grid.
#[derive(Debug, Clone)]
pub struct MatrixCell {
    pub id: String,
    pub strategy: SelectionStrategy,
    pub keyword_class: String,
    pub search_range: SearchRange,
    pub seed: u64,
}

/// One result row; `error` is set when the cell failed instead of aborting
/// the matrix.
#[derive(Debug, Clone)]
pub struct MatrixRow {
    pub cell: MatrixCell,
    pub status: Option<AttackStatus>,
    pub flips: usize,
    pub pre_metrics: Vec<(String, f64)>,
    pub post_metrics: Vec<(String, f64)>,
    pub keywords_ok: bool,
    pub benign_ok: bool,
    pub error: Option<String>,
}

pub fn strategy_name(s: SelectionStrategy) -> &'static str {
    match s {
        SelectionStrategy::ImpactScoreWithAux => "impact-aux",
        SelectionStrategy::ImpactScoreNoAux => "impact-noaux",
        SelectionStrategy::GradInRange => "grad-inrange",
        SelectionStrategy::GradUnconstrained => "grad-unconstrained",
    }
}

pub fn range_name(r: &SearchRange) -> String {
    match r {
        SearchRange::Full => "full".into(),
        SearchRange::TailFraction(f) => format!("tail:{f}"),
        SearchRange::HeadOnly => "head".into(),
    }
}

pub fn status_name(s: AttackStatus) -> &'static str {
    match s {
        AttackStatus::Success => "success",
        AttackStatus::BudgetExhausted => "budget-exhausted",
        AttackStatus::Destabilized => "destabilized",
    }
}

/// Run every cell on a fresh copy of the base model. A failed cell becomes a
/// row with an error message; the matrix itself never aborts.
pub fn run_experiment_matrix(
    base_model: &ToyModel,
    samples_by_class: &HashMap<String, AttackSample>,
    aux: &AuxDataset,
    tasks: &[EvalTask],
    cells: &[MatrixCell],
    base_config: &AttackConfig,
) -> Result<Vec<MatrixRow>> {
    let mut pre_metrics = Vec::new();
    for task in tasks {
        pre_metrics.push((task.name.clone(), evaluate(base_model, task)?));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut config = base_config.clone();
        config.strategy = cell.strategy;
        config.search_range = cell.search_range.clone();
        config.seed = cell.seed;
        let run = || -> Result<(AttackReport, Vec<(String, f64)>)> {
            let sample = samples_by_class
                .get(&cell.keyword_class)
                .ok_or_else(|| crate::Error::Config(format!("no samples for class {:?}", cell.keyword_class)))?;
            let mut model = base_model.clone();
            let report = run_attack(&mut model, sample, aux, &config)?;
            let mut post = Vec::new();
            for task in tasks {
                post.push((task.name.clone(), evaluate(&model, task)?));
            }
            Ok((report, post))
        };
        let row = match run() {
            Ok((report, post_metrics)) => MatrixRow {
                cell: cell.clone(),
                status: Some(report.status),
                flips: report.total_flips,
                pre_metrics: pre_metrics.clone(),
                post_metrics,
                keywords_ok: report.post_attack.keywords_ok,
                benign_ok: report.post_attack.benign_ok,
                error: None,
            },
            Err(e) => MatrixRow {
                cell: cell.clone(),
                status: None,
                flips: 0,
                pre_metrics: pre_metrics.clone(),
                post_metrics: Vec::new(),
                keywords_ok: false,
                benign_ok: false,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

/// CSV schema: one row per cell. Task columns appear as `<task>_pre` and
/// `<task>_post` in task order.
pub fn write_matrix_csv<W: Write>(rows: &[MatrixRow], tasks: &[EvalTask], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "config_id".to_string(),
        "strategy".to_string(),
        "keyword_class".to_string(),
        "search_range".to_string(),
        "seed".to_string(),
        "status".to_string(),
        "flips".to_string(),
        "keywords_ok".to_string(),
        "benign_ok".to_string(),
    ];
    for task in tasks {
        header.push(format!("{}_pre", task.name));
        header.push(format!("{}_post", task.name));
    }
    header.push("error".to_string());
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![
            row.cell.id.clone(),
            strategy_name(row.cell.strategy).to_string(),
            row.cell.keyword_class.clone(),
            range_name(&row.cell.search_range),
            row.cell.seed.to_string(),
            row.status.map(status_name).unwrap_or("error").to_string(),
            row.flips.to_string(),
            row.keywords_ok.to_string(),
            row.benign_ok.to_string(),
        ];
        for (i, task) in tasks.iter().enumerate() {
            let pre = row.pre_metrics.iter().find(|(n, _)| n == &task.name);
            let post = row.post_metrics.get(i);
            rec.push(pre.map(|(_, v)| format!("{v:.6}")).unwrap_or_default());
            rec.push(post.map(|(_, v)| format!("{v:.6}")).unwrap_or_default());
        }
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-data emitter: per-iteration target loss and aux metric series.
pub fn write_iteration_series<W: Write>(report: &AttackReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration",
        "target_loss_before",
        "target_loss_after",
        "aux_metric_before",
        "aux_metric_after",
        "winner_layer",
        "winner_index",
        "winner_bit",
        "in_range_ok",
        "success_after",
    ])
    .map_err(csv_err)?;
    for it in &report.iterations {
        w.write_record([
            it.iteration.to_string(),
            format!("{:.9}", it.target_loss_before),
            format!("{:.9}", it.target_loss_after),
            format!("{:.9}", it.aux_metric_before),
            format!("{:.9}", it.aux_metric_after),
            it.winner.layer_name.clone(),
            it.winner.weight_index.to_string(),
            it.winner.bit_position.to_string(),
            it.in_range_ok.to_string(),
            it.success_after.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcodec::QuantKind;
    use crate::corpus;
    use crate::model::tests::tiny_model;
    use crate::objective::TargetPrompt;
    use crate::ranking::AuxKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_f1_cases() {
        assert_eq!(token_f1(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(token_f1(&[], &[1]), 0.0);
        assert_eq!(token_f1(&[3], &[4]), 0.0);
        assert_eq!(token_f1(&[], &[]), 1.0);
        // Multiset overlap: one shared token out of two on each side.
        let f1 = token_f1(&[1, 9], &[1, 2]);
        assert!((f1 - 0.5).abs() < 1e-12);
        // Duplicates are not double-counted.
        let dup = token_f1(&[1, 1], &[1, 2]);
        assert!((dup - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_token_f1_equals_exact_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = rng.gen_range(0..6usize);
            let b = rng.gen_range(0..6usize);
            let f1 = token_f1(&[a], &[b]);
            assert_eq!(f1, if a == b { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn task_split_shapes() {
        let corpus = corpus::generate(11);
        let tasks = eval_tasks(&corpus);
        assert_eq!(tasks.len(), 3);
        for task in &tasks {
            assert_eq!(task.items.len(), 100, "{}", task.name);
            for t in &corpus.meta.targets {
                assert!(task.items.iter().all(|i| i.question != t.question));
            }
        }
    }

    #[test]
    fn evaluation_is_pure_and_bounded() {
        let model = tiny_model(51, QuantKind::Bf16);
        let task = EvalTask {
            name: "probe".into(),
            metric: Metric::ExactMatch,
            items: (0..10)
                .map(|i| EvalItem {
                    question: format!("w{} w{}", i, i + 2),
                    answer: format!("w{}", i + 1),
                })
                .collect(),
        };
        let snapshot = model.patterns_snapshot();
        let v = evaluate(&model, &task).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(model.patterns_snapshot(), snapshot);
    }

    #[test]
    fn matrix_rows_and_determinism() {
        let model = tiny_model(53, QuantKind::Bf16);
        let sample_kw = "w9";
        let sample = crate::objective::AttackSample {
            targets: vec![
                TargetPrompt::build(&model.vocab, "w1 w2", sample_kw, "", "relevant").unwrap(),
            ],
            benign: vec![],
        };
        let mut samples = HashMap::new();
        samples.insert("relevant".to_string(), sample);
        let aux = crate::ranking::AuxDataset::from_parts(
            AuxKind::LossBased,
            vec![],
            (0..6)
                .map(|i| {
                    let tokens: Vec<usize> = vec![3 + i, 7, 4, 2];
                    crate::model::WeightedSeq::new(tokens, vec![1.0 / 3.0; 3])
                })
                .collect(),
        );
        let tasks = vec![EvalTask {
            name: "probe".into(),
            metric: Metric::ExactMatch,
            items: vec![EvalItem {
                question: "w3 w4".into(),
                answer: "w5".into(),
            }],
        }];
        let config = AttackConfig {
            max_flips: 2,
            k: 4,
            aux_subsample: 4,
            ..AttackConfig::default()
        };
        let cells = vec![
            MatrixCell {
                id: "c0".into(),
                strategy: SelectionStrategy::ImpactScoreNoAux,
                keyword_class: "relevant".into(),
                search_range: SearchRange::HeadOnly,
                seed: 1,
            },
            MatrixCell {
                id: "c1".into(),
                strategy: SelectionStrategy::ImpactScoreNoAux,
                keyword_class: "missing-class".into(),
                search_range: SearchRange::HeadOnly,
                seed: 1,
            },
        ];
        let rows = run_experiment_matrix(&model, &samples, &aux, &tasks, &cells, &config).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].error.is_none());
        assert!(rows[1].error.is_some(), "failed cell recorded, not aborted");

        let rows2 = run_experiment_matrix(&model, &samples, &aux, &tasks, &cells, &config).unwrap();
        assert_eq!(rows[0].flips, rows2[0].flips);
        assert_eq!(rows[0].post_metrics, rows2[0].post_metrics);

        let mut csv_a = Vec::new();
        write_matrix_csv(&rows, &tasks, &mut csv_a).unwrap();
        let mut csv_b = Vec::new();
        write_matrix_csv(&rows2, &tasks, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b, "matrix CSV is byte-identical across runs");
        assert!(String::from_utf8(csv_a).unwrap().contains("missing-class"));
    }
}
