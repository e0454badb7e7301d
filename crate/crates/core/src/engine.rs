//! The iterative attack loop: loss, gradients, candidate search, winner
//! selection, permanent flip, success check — one winner bit per iteration
//! until the keywords appear (with benign answers intact), the budget runs
//! out, or the model destabilizes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bitcodec::{self, FlipDirection};
use crate::error::{Error, Result};
use crate::model::{FlipLocation, ToyModel};
use crate::objective::{combined_loss_seqs, target_loss, AttackSample};
use crate::ranking::{
    evaluate_candidates, select_winner, AuxContext, AuxDataset, AuxKind, RankedCandidate,
    SelectionDirection,
};
use crate::search::{skip_search, FlipCandidate, SearchRange, SearchStats};

/// How the iteration's winner bit is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionStrategy {
    /// Top-k impact-score queue re-ranked by auxiliary utility.
    ImpactScoreWithAux,
    /// Top-k impact-score queue ranked by target-loss reduction alone.
    ImpactScoreNoAux,
    /// Largest-|gradient| weight, best local bit, range-constrained.
    GradInRange,
    /// Largest-|gradient| weight, best local bit, no range constraint.
    GradUnconstrained,
}

impl SelectionStrategy {
    pub fn is_range_constrained(&self) -> bool {
        !matches!(self, SelectionStrategy::GradUnconstrained)
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub max_flips: usize,
    pub k: usize,
    pub search_range: SearchRange,
    pub strategy: SelectionStrategy,
    pub selection_direction: SelectionDirection,
    pub benign_weight: f64,
    pub aux_kind: AuxKind,
    pub aux_subsample: usize,
    /// Layer ids excluded from the search (the protection study knob).
    pub protected: BTreeSet<usize>,
    pub seed: u64,
    /// Refresh layer min/max after each applied flip (config switch for the
    /// frozen-bounds variant).
    pub refresh_bounds: bool,
    /// Extra decode steps beyond the desired answer length in success checks.
    pub decode_margin: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            max_flips: 50,
            k: 100,
            search_range: SearchRange::HeadOnly,
            strategy: SelectionStrategy::ImpactScoreWithAux,
            selection_direction: SelectionDirection::MaximizeScore,
            benign_weight: 1.0,
            aux_kind: AuxKind::LossBased,
            aux_subsample: 32,
            protected: BTreeSet::new(),
            seed: 1,
            refresh_bounds: true,
            decode_margin: 4,
        }
    }
}

/// Success predicate evaluation, kept per target for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuccessOutcome {
    /// Every target's decode contains its keyword phrase contiguously.
    pub keywords_ok: bool,
    /// Every benign decode still equals its frozen answer exactly.
    pub benign_ok: bool,
    /// The conjunction: the attack's success predicate.
    pub success: bool,
    pub per_target: Vec<bool>,
    pub decoded_answers: Vec<String>,
}

/// True iff the keyword phrase occurs as a contiguous token run.
fn contains_contiguous(haystack: &[usize], needle: &[usize]) -> bool {
    if needle.is_empty() {
        return true;
    }
    if haystack.len() < needle.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Decode every target and benign prompt and evaluate the success predicate:
/// all keyword phrases present AND all frozen benign answers reproduced.
pub fn success_check(model: &ToyModel, sample: &AttackSample, decode_margin: usize) -> Result<SuccessOutcome> {
    let mut per_target = Vec::with_capacity(sample.targets.len());
    let mut decoded_answers = Vec::with_capacity(sample.targets.len());
    for target in &sample.targets {
        let keyword_tokens = &target.desired_answer[..target.desired_answer.len() - 1];
        let max_new = target.desired_answer.len() + decode_margin;
        let decoded = model.greedy_decode(&target.prompt_tokens, max_new)?;
        let answer = &decoded[target.prompt_tokens.len()..];
        per_target.push(contains_contiguous(answer, keyword_tokens));
        decoded_answers.push(model.vocab.detokenize(answer));
    }
    let keywords_ok = per_target.iter().all(|&b| b);
    let mut benign_ok = true;
    for benign in &sample.benign {
        let decoded = model.greedy_decode(&benign.prompt_tokens, benign.frozen_tokens.len())?;
        if decoded[benign.prompt_tokens.len()..] != benign.frozen_tokens[..] {
            benign_ok = false;
            break;
        }
    }
    Ok(SuccessOutcome {
        keywords_ok,
        benign_ok,
        success: keywords_ok && benign_ok,
        per_target,
        decoded_answers,
    })
}

/// Forward each target prompt and require finite logits everywhere.
fn stability_probe(model: &ToyModel, sample: &AttackSample) -> Result<bool> {
    for target in &sample.targets {
        if !model.forward(&target.prompt_tokens)?.is_finite() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Traditional gradient-ranking baseline: take the largest-|gradient| weight
/// and the bit whose flip most decreases the loss to first order (most
/// negative grad * delta). The constrained variant admits only in-range
/// flips; the unconstrained one will happily pick a non-finite jump.
pub fn baseline_grad_search(
    model: &ToyModel,
    layers: &[usize],
    constrained: bool,
) -> Option<FlipCandidate> {
    let mut weights: Vec<(usize, usize)> = Vec::new();
    for &layer_id in layers {
        let tensor = model.tensor(layer_id);
        for i in 0..tensor.len() {
            if tensor.grad[i] != 0.0 {
                weights.push((layer_id, i));
            }
        }
    }
    if weights.is_empty() {
        return None;
    }
    weights.sort_by(|&(la, ia), &(lb, ib)| {
        let ga = model.tensor(la).grad[ia].abs();
        let gb = model.tensor(lb).grad[ib].abs();
        gb.partial_cmp(&ga).unwrap().then((la, ia).cmp(&(lb, ib)))
    });
    for (layer_id, i) in weights {
        let tensor = model.tensor(layer_id);
        let grad = tensor.grad[i];
        let mut best: Option<(f64, bitcodec::BitFlip)> = None;
        for flip in bitcodec::enumerate_flips(tensor.pattern(i), tensor.format) {
            if constrained && !bitcodec::in_range(flip.value_after, tensor.layer_min, tensor.layer_max)
            {
                continue;
            }
            let first_order = grad * flip.delta_w;
            let better = match &best {
                None => true,
                Some((cur, _)) => first_order < *cur,
            };
            if better {
                best = Some((first_order, flip));
            }
        }
        if let Some((first_order, flip)) = best {
            if first_order >= 0.0 && constrained {
                // No descending flip for this weight; try the next one.
                continue;
            }
            return Some(FlipCandidate {
                layer_id,
                weight_index: i,
                bit_position: flip.bit_position,
                direction: flip.direction,
                delta_w: flip.delta_w,
                impact_score: (grad * flip.delta_w).abs(),
                aux_utility_score: None,
            });
        }
    }
    None
}

/// One applied flip, the unit of the exported plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedFlip {
    pub layer_id: usize,
    pub layer_name: String,
    pub weight_index: usize,
    pub bit_position: u8,
    pub direction: FlipDirection,
}

/// Queue dump entry for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueDumpEntry {
    pub rank: usize,
    pub layer_name: String,
    pub weight_index: usize,
    pub bit_position: u8,
    pub delta_w: f64,
    pub impact_score: f64,
}

/// Ranking table entry for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingEntry {
    pub rank: usize,
    pub layer_name: String,
    pub weight_index: usize,
    pub bit_position: u8,
    pub delta_l_rel: f64,
    pub delta_u_aux: f64,
    pub aux_utility_score: f64,
    pub destabilized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub target_loss_before: f64,
    pub target_loss_after: f64,
    pub combined_loss_before: f64,
    pub aux_metric_before: f64,
    pub aux_metric_after: f64,
    pub queue_stats: SearchStats,
    pub queue_dump: Vec<QueueDumpEntry>,
    pub ranking: Vec<RankingEntry>,
    pub winner: PlannedFlip,
    pub winner_value_before: f64,
    pub winner_value_after: f64,
    /// The applied flip kept the weight finite and inside the layer's
    /// pre-flip [min, max].
    pub in_range_ok: bool,
    pub keywords_ok_after: bool,
    pub benign_ok_after: bool,
    pub success_after: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackStatus {
    Success,
    BudgetExhausted,
    Destabilized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub status: AttackStatus,
    pub total_flips: usize,
    pub seed: u64,
    pub strategy: SelectionStrategy,
    pub search_range: SearchRange,
    pub benign_weight: f64,
    pub aux_kind: AuxKind,
    pub pre_attack: SuccessOutcome,
    pub pre_attack_target_loss: f64,
    pub post_attack: SuccessOutcome,
    pub iterations: Vec<IterationRecord>,
    pub plan: Vec<PlannedFlip>,
}

fn dump_queue(model: &ToyModel, entries: &[FlipCandidate]) -> Vec<QueueDumpEntry> {
    entries
        .iter()
        .enumerate()
        .map(|(rank, c)| QueueDumpEntry {
            rank: rank + 1,
            layer_name: model.tensor(c.layer_id).name.clone(),
            weight_index: c.weight_index,
            bit_position: c.bit_position,
            delta_w: c.delta_w,
            impact_score: c.impact_score,
        })
        .collect()
}

fn dump_ranking(model: &ToyModel, ranked: &[RankedCandidate], direction: SelectionDirection) -> Vec<RankingEntry> {
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (ranked[a].aux_utility_score, ranked[b].aux_utility_score);
        let ord = match direction {
            SelectionDirection::MaximizeScore => sb.partial_cmp(&sa),
            SelectionDirection::MinimizeScore => sa.partial_cmp(&sb),
        };
        ord.unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| {
            let r = &ranked[i];
            RankingEntry {
                rank: rank + 1,
                layer_name: model.tensor(r.candidate.layer_id).name.clone(),
                weight_index: r.candidate.weight_index,
                bit_position: r.candidate.bit_position,
                delta_l_rel: r.delta_l_rel,
                delta_u_aux: r.delta_u_aux,
                aux_utility_score: r.aux_utility_score,
                destabilized: r.destabilized,
            }
        })
        .collect()
}

/// Run the full iterative attack. Deterministic for a given config seed.
pub fn run_attack(
    model: &mut ToyModel,
    sample: &AttackSample,
    aux: &AuxDataset,
    config: &AttackConfig,
) -> Result<AttackReport> {
    sample.validate()?;
    if config.max_flips < 1 {
        return Err(Error::Config("max_flips must be >= 1".into()));
    }
    let layers = config.search_range.resolve(model, &config.protected);
    if layers.is_empty() {
        return Err(Error::Config("search range resolves to no layers".into()));
    }
    let subsample = AuxContext::choose_subsample(aux, config.aux_subsample, config.seed);

    let pre_attack = success_check(model, sample, config.decode_margin)?;
    let pre_attack_target_loss = target_loss(model, sample)?;
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut plan: Vec<PlannedFlip> = Vec::new();
    let mut status = if pre_attack.success {
        Some(AttackStatus::Success)
    } else {
        None
    };
    let mut post_attack = pre_attack.clone();

    while status.is_none() && iterations.len() < config.max_flips {
        let iteration = iterations.len() + 1;
        let l_t_before = target_loss(model, sample)?;
        if l_t_before == 0.0 {
            return Err(Error::AttackAlreadySucceeded);
        }
        let aux_before = aux.metric(model, None)?;

        // Combined loss and gradients.
        let seqs = combined_loss_seqs(sample, config.benign_weight);
        model.zero_grads();
        let combined_before = model.loss_and_grad(&seqs)?;

        let (winner, queue_dump, ranking, queue_stats) = match config.strategy {
            SelectionStrategy::ImpactScoreWithAux | SelectionStrategy::ImpactScoreNoAux => {
                let (queue, stats) = skip_search(model, &layers, config.k);
                if queue.entries().is_empty() {
                    return Err(Error::NoCandidate("no in-range flip in search range".into()));
                }
                let queue_dump = dump_queue(model, queue.entries());
                let aux_ctx;
                let aux_arg = if matches!(config.strategy, SelectionStrategy::ImpactScoreWithAux) {
                    aux_ctx = AuxContext::begin_iteration(aux, model, &subsample)?;
                    Some((aux, &aux_ctx))
                } else {
                    None
                };
                let ranked = evaluate_candidates(model, queue.entries(), sample, l_t_before, aux_arg)?;
                let winner_idx = select_winner(&ranked, config.selection_direction)?;
                let ranking = dump_ranking(model, &ranked, config.selection_direction);
                (ranked[winner_idx].candidate, queue_dump, ranking, stats)
            }
            SelectionStrategy::GradInRange | SelectionStrategy::GradUnconstrained => {
                let constrained = config.strategy.is_range_constrained();
                let candidate = baseline_grad_search(model, &layers, constrained)
                    .ok_or_else(|| Error::NoCandidate("gradient search found no flip".into()))?;
                (candidate, Vec::new(), Vec::new(), SearchStats::default())
            }
        };

        // Apply the winner permanently.
        let loc = FlipLocation {
            layer_id: winner.layer_id,
            weight_index: winner.weight_index,
            bit_position: winner.bit_position,
        };
        let tensor = model.tensor(loc.layer_id);
        let value_before = tensor.value(loc.weight_index);
        let (bound_lo, bound_hi) = (tensor.layer_min, tensor.layer_max);
        let direction = model.apply_flip(loc);
        let value_after = model.tensor(loc.layer_id).value(loc.weight_index);
        let in_range_ok = bitcodec::in_range(value_after, bound_lo, bound_hi);
        debug_assert!(
            in_range_ok || !config.strategy.is_range_constrained(),
            "range-constrained strategy applied an out-of-range flip"
        );
        if config.refresh_bounds {
            model.tensor_mut(loc.layer_id).refresh_stats();
        }
        plan.push(PlannedFlip {
            layer_id: loc.layer_id,
            layer_name: model.tensor(loc.layer_id).name.clone(),
            weight_index: loc.weight_index,
            bit_position: loc.bit_position,
            direction,
        });

        let stable = stability_probe(model, sample)?;
        let (l_t_after, aux_after, outcome) = if stable {
            let l_t_after = target_loss(model, sample)?;
            let aux_after = aux.metric(model, None)?;
            let outcome = success_check(model, sample, config.decode_margin)?;
            (l_t_after, aux_after, outcome)
        } else {
            (
                f64::NAN,
                f64::NAN,
                SuccessOutcome {
                    keywords_ok: false,
                    benign_ok: false,
                    success: false,
                    per_target: vec![false; sample.targets.len()],
                    decoded_answers: vec![String::new(); sample.targets.len()],
                },
            )
        };

        iterations.push(IterationRecord {
            iteration,
            target_loss_before: l_t_before,
            target_loss_after: l_t_after,
            combined_loss_before: combined_before,
            aux_metric_before: aux_before,
            aux_metric_after: aux_after,
            queue_stats,
            queue_dump,
            ranking,
            winner: plan.last().expect("just pushed").clone(),
            winner_value_before: value_before,
            winner_value_after: value_after,
            in_range_ok,
            keywords_ok_after: outcome.keywords_ok,
            benign_ok_after: outcome.benign_ok,
            success_after: outcome.success,
        });
        post_attack = outcome;

        if !stable {
            status = Some(AttackStatus::Destabilized);
        } else if post_attack.success {
            status = Some(AttackStatus::Success);
        }
    }

    Ok(AttackReport {
        status: status.unwrap_or(AttackStatus::BudgetExhausted),
        total_flips: plan.len(),
        seed: config.seed,
        strategy: config.strategy,
        search_range: config.search_range.clone(),
        benign_weight: config.benign_weight,
        aux_kind: config.aux_kind,
        pre_attack,
        pre_attack_target_loss,
        post_attack,
        iterations,
        plan,
    })
}

/// The exported flip-plan file format consumed by the DRAM simulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub model_kind: String,
    pub flips: Vec<PlannedFlip>,
}

impl PlanFile {
    pub fn from_report(model: &ToyModel, report: &AttackReport) -> PlanFile {
        PlanFile {
            model_kind: match model.kind {
                crate::bitcodec::QuantKind::Bf16 => "bf16".into(),
                crate::bitcodec::QuantKind::Int8 => "int8".into(),
            },
            flips: report.plan.clone(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<PlanFile> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Re-apply an exported plan onto a pristine model, in order.
pub fn replay_plan(model: &mut ToyModel, plan: &[PlannedFlip], refresh_bounds: bool) -> Result<()> {
    for flip in plan {
        if flip.layer_id >= model.tensors.len()
            || flip.weight_index >= model.tensor(flip.layer_id).len()
        {
            return Err(Error::PlanOutOfLayout(format!(
                "layer {} index {}",
                flip.layer_id, flip.weight_index
            )));
        }
        model.apply_flip(FlipLocation {
            layer_id: flip.layer_id,
            weight_index: flip.weight_index,
            bit_position: flip.bit_position,
        });
        if refresh_bounds {
            model.tensor_mut(flip.layer_id).refresh_stats();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcodec::QuantKind;
    use crate::model::tests::tiny_model;
    use crate::model::WeightedSeq;
    use crate::objective::TargetPrompt;

    fn tiny_aux(model: &ToyModel) -> AuxDataset {
        let seqs: Vec<WeightedSeq> = (0..8)
            .map(|i| {
                let tokens: Vec<usize> = vec![3 + i, 7, 11, 4, model.vocab.eos];
                let n = tokens.len() - 1;
                WeightedSeq::new(tokens, vec![1.0 / n as f64; n])
            })
            .collect();
        AuxDataset::from_parts(AuxKind::LossBased, vec![], seqs)
    }

    /// A sample whose keyword is whatever the model already answers: the
    /// success predicate holds before any flip.
    fn pre_satisfied_sample(model: &ToyModel) -> AttackSample {
        let prompt = model.vocab.prompt("w1 w2").unwrap();
        let decoded = model.greedy_decode(&prompt, 3).unwrap();
        let first = decoded[prompt.len()];
        assert_ne!(first, model.vocab.eos, "test prompt must decode a word");
        let keyword = model.vocab.token(first).to_string();
        AttackSample {
            targets: vec![
                TargetPrompt::build(&model.vocab, "w1 w2", &keyword, "", "pre-satisfied").unwrap(),
            ],
            benign: vec![],
        }
    }

    fn hard_sample(model: &ToyModel) -> AttackSample {
        // A keyword the random model does not produce for this prompt.
        let prompt = model.vocab.prompt("w1 w2").unwrap();
        let decoded = model.greedy_decode(&prompt, 3).unwrap();
        let avoid = decoded[prompt.len()];
        let keyword_id = (3..model.dims.vocab_size).find(|&t| t != avoid).unwrap();
        let keyword = model.vocab.token(keyword_id).to_string();
        AttackSample {
            targets: vec![
                TargetPrompt::build(&model.vocab, "w1 w2", &keyword, "", "hard").unwrap(),
            ],
            benign: vec![],
        }
    }

    #[test]
    fn contiguity_check() {
        assert!(contains_contiguous(&[1, 2, 3, 4], &[2, 3]));
        assert!(contains_contiguous(&[1, 2], &[]));
        assert!(!contains_contiguous(&[1, 2, 3], &[3, 2]));
        assert!(!contains_contiguous(&[1], &[1, 2]));
        assert!(contains_contiguous(&[5], &[5]));
    }

    #[test]
    fn pre_satisfied_target_succeeds_with_zero_flips() {
        let mut model = tiny_model(31, QuantKind::Bf16);
        let sample = pre_satisfied_sample(&model);
        let aux = tiny_aux(&model);
        let report = run_attack(&mut model, &sample, &aux, &AttackConfig::default()).unwrap();
        assert_eq!(report.status, AttackStatus::Success);
        assert_eq!(report.total_flips, 0);
        assert!(report.plan.is_empty());
        assert!(report.pre_attack.success);
    }

    #[test]
    fn budget_exhaustion_is_reported_and_prefix_deterministic() {
        let base = tiny_model(33, QuantKind::Bf16);
        let sample = hard_sample(&base);
        let aux = tiny_aux(&base);
        let run = |max_flips: usize| {
            let mut model = base.clone();
            let config = AttackConfig {
                max_flips,
                k: 5,
                aux_subsample: 4,
                ..AttackConfig::default()
            };
            run_attack(&mut model, &sample, &aux, &config).unwrap()
        };
        let short = run(2);
        let long = run(4);
        assert_eq!(short.total_flips, 2);
        assert!(matches!(short.status, AttackStatus::BudgetExhausted | AttackStatus::Success));
        // Determinism: the longer run begins with the shorter run's plan.
        assert_eq!(&long.plan[..2], &short.plan[..]);
    }

    #[test]
    fn replaying_the_plan_reproduces_the_model() {
        let base = tiny_model(35, QuantKind::Bf16);
        let sample = hard_sample(&base);
        let aux = tiny_aux(&base);
        let mut attacked = base.clone();
        let config = AttackConfig {
            max_flips: 3,
            k: 5,
            aux_subsample: 4,
            ..AttackConfig::default()
        };
        let report = run_attack(&mut attacked, &sample, &aux, &config).unwrap();
        assert!(!report.plan.is_empty());
        let mut replayed = base.clone();
        replay_plan(&mut replayed, &report.plan, true).unwrap();
        assert_eq!(replayed.patterns_snapshot(), attacked.patterns_snapshot());
        let a = success_check(&attacked, &sample, config.decode_margin).unwrap();
        let b = success_check(&replayed, &sample, config.decode_margin).unwrap();
        assert_eq!(a.success, b.success);
    }

    #[test]
    fn in_range_strategies_record_in_range_flips() {
        let base = tiny_model(37, QuantKind::Bf16);
        let sample = hard_sample(&base);
        let aux = tiny_aux(&base);
        for strategy in [
            SelectionStrategy::ImpactScoreWithAux,
            SelectionStrategy::ImpactScoreNoAux,
            SelectionStrategy::GradInRange,
        ] {
            let mut model = base.clone();
            let config = AttackConfig {
                max_flips: 3,
                k: 5,
                aux_subsample: 4,
                strategy,
                ..AttackConfig::default()
            };
            let report = run_attack(&mut model, &sample, &aux, &config).unwrap();
            assert!(report.iterations.iter().all(|it| it.in_range_ok));
        }
    }

    #[test]
    fn grad_baseline_contract() {
        let mut model = tiny_model(39, QuantKind::Bf16);
        model.zero_grads();
        let layers: Vec<usize> = (0..model.tensors.len()).collect();
        assert!(baseline_grad_search(&model, &layers, true).is_none());

        for t in &mut model.tensors {
            for (i, g) in t.grad.iter_mut().enumerate() {
                *g = ((i % 17) as f64 - 8.0) / 10.0;
            }
        }
        let constrained = baseline_grad_search(&model, &layers, true).unwrap();
        let t = model.tensor(constrained.layer_id);
        let after = t.value(constrained.weight_index) + constrained.delta_w;
        assert!(crate::bitcodec::in_range(after, t.layer_min, t.layer_max));
        // The pick is first-order loss-decreasing.
        assert!(t.grad[constrained.weight_index] * constrained.delta_w < 0.0);
    }

    #[test]
    fn replay_rejects_out_of_layout_plans() {
        let mut model = tiny_model(41, QuantKind::Bf16);
        let plan = vec![PlannedFlip {
            layer_id: 0,
            layer_name: "embed.tok".into(),
            weight_index: usize::MAX,
            bit_position: 0,
            direction: crate::bitcodec::FlipDirection::ZeroToOne,
        }];
        assert!(matches!(
            replay_plan(&mut model, &plan, true),
            Err(Error::PlanOutOfLayout(_))
        ));
    }
}
