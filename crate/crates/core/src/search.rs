//! Impact-score candidate search with layer-level upper-bound skipping.
//!
//! Per weight, the impact score is |gradient| times the largest in-range
//! single-bit perturbation. Scanning each layer in descending |gradient|
//! order, a weight whose upper bound (|gradient| times the layer's value
//! span) falls below the full queue's minimum proves that the rest of the
//! layer cannot enter the queue, so it is skipped wholesale. The result is
//! exactly the brute-force Top-k.

use std::collections::BTreeSet;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitcodec::{self, FlipDirection, QuantFormat};
use crate::model::{LayerTensor, ToyModel};

/// One queue entry: a weight with its best in-range bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipCandidate {
    pub layer_id: usize,
    pub weight_index: usize,
    pub bit_position: u8,
    pub direction: FlipDirection,
    pub delta_w: f64,
    pub impact_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_utility_score: Option<f64>,
}

impl FlipCandidate {
    fn lex(&self) -> (usize, usize, u8) {
        (self.layer_id, self.weight_index, self.bit_position)
    }

    /// Queue ordering: higher score first, lexicographic position on ties.
    pub fn beats(&self, other: &FlipCandidate) -> bool {
        self.impact_score > other.impact_score
            || (self.impact_score == other.impact_score && self.lex() < other.lex())
    }
}

/// Fixed-capacity queue of the highest-impact candidates.
#[derive(Debug, Clone)]
pub struct TopKQueue {
    capacity: usize,
    /// Sorted descending by (score, lex-position) under `beats`.
    entries: Vec<FlipCandidate>,
}

impl TopKQueue {
    pub fn new(capacity: usize) -> TopKQueue {
        assert!(capacity >= 1);
        TopKQueue {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[FlipCandidate] {
        &self.entries
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Score of the weakest kept entry; the skip threshold once full.
    pub fn min_score(&self) -> f64 {
        self.entries.last().map(|c| c.impact_score).unwrap_or(0.0)
    }

    pub fn insert(&mut self, candidate: FlipCandidate) {
        let pos = self
            .entries
            .partition_point(|existing| !candidate.beats(existing));
        if pos == self.capacity {
            return;
        }
        self.entries.insert(pos, candidate);
        self.entries.truncate(self.capacity);
    }

    /// Key-set view for equivalence checks.
    pub fn key_set(&self) -> BTreeSet<(usize, usize, u8)> {
        self.entries.iter().map(|c| c.lex()).collect()
    }
}

/// Which layers the search may touch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SearchRange {
    Full,
    /// Trailing fraction r of the layer list (0 < r <= 1), head included.
    TailFraction(f64),
    HeadOnly,
}

impl SearchRange {
    /// Resolve to concrete layer ids, honoring protected layers.
    pub fn resolve(&self, model: &ToyModel, protected: &BTreeSet<usize>) -> Vec<usize> {
        let n = model.tensors.len();
        let ids: Vec<usize> = match self {
            SearchRange::Full => (0..n).collect(),
            SearchRange::TailFraction(r) => {
                let take = ((r * n as f64).ceil() as usize).clamp(1, n);
                (n - take..n).collect()
            }
            SearchRange::HeadOnly => vec![model.head_layer_id],
        };
        ids.into_iter().filter(|id| !protected.contains(id)).collect()
    }
}

/// Impact score of one weight: |grad| * max in-range |delta|, plus the
/// winning bit. Zero score and no flip when no bit stays in range.
pub fn impact_score(
    grad: f64,
    pattern: u16,
    format: QuantFormat,
    layer_min: f64,
    layer_max: f64,
) -> (f64, Option<bitcodec::BitFlip>) {
    match bitcodec::best_valid_flip(pattern, format, layer_min, layer_max) {
        Some(flip) => (grad.abs() * flip.delta_w.abs(), Some(flip)),
        None => (0.0, None),
    }
}

/// Upper bound on any weight's impact score in a layer:
/// |grad| * (layer value span). An in-range flip moves a weight from one
/// point of [min, max] to another, so no single-bit |delta| can exceed the
/// span.
pub fn impact_upper_bound(grad: f64, layer_max_perturbation: f64) -> f64 {
    grad.abs() * layer_max_perturbation
}

/// The layer-wide perturbation cap used by `impact_upper_bound`.
pub fn layer_max_perturbation(tensor: &LayerTensor) -> f64 {
    (tensor.layer_max - tensor.layer_min).max(0.0)
}

/// Scan statistics: how much work the skip rule saved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Weights whose exact impact score was computed.
    pub exact_evaluations: usize,
    /// Weights pruned by the layer upper bound.
    pub skipped: usize,
    /// Total weights in the search range.
    pub total: usize,
}

fn grad_order(tensor: &LayerTensor) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tensor.len()).collect();
    order.sort_by(|&a, &b| {
        tensor.grad[b]
            .abs()
            .partial_cmp(&tensor.grad[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

fn candidate_at(tensor: &LayerTensor, i: usize) -> Option<FlipCandidate> {
    let (score, best) = impact_score(
        tensor.grad[i],
        tensor.pattern(i),
        tensor.format,
        tensor.layer_min,
        tensor.layer_max,
    );
    best.map(|flip| FlipCandidate {
        layer_id: tensor.layer_id,
        weight_index: i,
        bit_position: flip.bit_position,
        direction: flip.direction,
        delta_w: flip.delta_w,
        impact_score: score,
        aux_utility_score: None,
    })
}

/// Sequential SKIP search over the given layers.
pub fn skip_search(model: &ToyModel, layers: &[usize], k: usize) -> (TopKQueue, SearchStats) {
    let mut queue = TopKQueue::new(k);
    let mut stats = SearchStats::default();
    for &layer_id in layers {
        let tensor = model.tensor(layer_id);
        let span = layer_max_perturbation(tensor);
        let order = grad_order(tensor);
        stats.total += tensor.len();
        for (rank, &i) in order.iter().enumerate() {
            let grad = tensor.grad[i];
            if queue.is_full() && impact_upper_bound(grad, span) < queue.min_score() {
                // Descending |grad| makes every remaining bound smaller still.
                debug_assert!(order[rank..]
                    .iter()
                    .all(|&j| tensor.grad[j].abs() <= grad.abs()));
                stats.skipped += tensor.len() - rank;
                break;
            }
            stats.exact_evaluations += 1;
            if let Some(candidate) = candidate_at(tensor, i) {
                queue.insert(candidate);
            }
        }
    }
    (queue, stats)
}

/// Concurrent SKIP search: layers scanned by parallel workers sharing the
/// queue (and thus the skip threshold) behind a mutex. The threshold only
/// grows, so a stale read can only make skipping less aggressive; the final
/// queue is identical to the sequential scan's.
pub fn skip_search_parallel(model: &ToyModel, layers: &[usize], k: usize) -> (TopKQueue, SearchStats) {
    let queue = Mutex::new(TopKQueue::new(k));
    let stats: Vec<SearchStats> = layers
        .par_iter()
        .map(|&layer_id| {
            let tensor = model.tensor(layer_id);
            let span = layer_max_perturbation(tensor);
            let order = grad_order(tensor);
            let mut stats = SearchStats {
                total: tensor.len(),
                ..SearchStats::default()
            };
            for (rank, &i) in order.iter().enumerate() {
                let grad = tensor.grad[i];
                {
                    let q = queue.lock().unwrap();
                    if q.is_full() && impact_upper_bound(grad, span) < q.min_score() {
                        stats.skipped += tensor.len() - rank;
                        break;
                    }
                }
                stats.exact_evaluations += 1;
                if let Some(candidate) = candidate_at(tensor, i) {
                    queue.lock().unwrap().insert(candidate);
                }
            }
            stats
        })
        .collect();
    let merged = stats.into_iter().fold(SearchStats::default(), |a, b| SearchStats {
        exact_evaluations: a.exact_evaluations + b.exact_evaluations,
        skipped: a.skipped + b.skipped,
        total: a.total + b.total,
    });
    (queue.into_inner().unwrap(), merged)
}

/// Brute-force Top-k: exact impact score for every weight in range. The
/// independent oracle the SKIP search is checked against, and the baseline
/// for the evaluation-count comparison.
pub fn brute_force_topk(model: &ToyModel, layers: &[usize], k: usize) -> (TopKQueue, SearchStats) {
    let mut queue = TopKQueue::new(k);
    let mut stats = SearchStats::default();
    for &layer_id in layers {
        let tensor = model.tensor(layer_id);
        stats.total += tensor.len();
        for i in 0..tensor.len() {
            stats.exact_evaluations += 1;
            if let Some(candidate) = candidate_at(tensor, i) {
                queue.insert(candidate);
            }
        }
    }
    (queue, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcodec::QuantKind;
    use crate::model::tests::tiny_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_with_random_grads(seed: u64, kind: QuantKind) -> crate::model::ToyModel {
        let mut model = tiny_model(seed, kind);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
        for t in &mut model.tensors {
            for g in &mut t.grad {
                *g = rng.gen_range(-1.0..1.0);
            }
        }
        model
    }

    #[test]
    fn impact_score_arithmetic() {
        // INT8 code 0 at unit scale in [-2, 2]: valid flips reach ±1, ±2.
        let f = QuantFormat::Int8 { scale: 1.0 };
        let (score, best) = impact_score(0.5, 0, f, -2.0, 2.0);
        assert_eq!(score, 1.0);
        assert_eq!(best.unwrap().delta_w.abs(), 2.0);
        let (zero, _) = impact_score(0.0, 0, f, -2.0, 2.0);
        assert_eq!(zero, 0.0);
        let (none_score, none_flip) = impact_score(3.0, 0x3F80, QuantFormat::Bf16, 1.0, 1.0);
        assert_eq!(none_score, 0.0);
        assert!(none_flip.is_none());
    }

    #[test]
    fn impact_score_matches_enumeration_oracle() {
        let model = model_with_random_grads(3, QuantKind::Bf16);
        let tensor = model.tensor(model.head_layer_id);
        for i in (0..tensor.len()).step_by(7) {
            let (score, _) = impact_score(
                tensor.grad[i],
                tensor.pattern(i),
                tensor.format,
                tensor.layer_min,
                tensor.layer_max,
            );
            let brute = crate::bitcodec::enumerate_flips(tensor.pattern(i), tensor.format)
                .into_iter()
                .filter(|f| {
                    f.delta_w.is_finite()
                        && crate::bitcodec::in_range(f.value_after, tensor.layer_min, tensor.layer_max)
                })
                .map(|f| (tensor.grad[i] * f.delta_w).abs())
                .fold(0.0f64, f64::max);
            assert_eq!(score, brute);
        }
    }

    #[test]
    fn upper_bound_dominates_exact_score_everywhere() {
        for kind in [QuantKind::Bf16, QuantKind::Int8] {
            let model = model_with_random_grads(5, kind);
            for tensor in &model.tensors {
                let span = layer_max_perturbation(tensor);
                for i in 0..tensor.len() {
                    let (score, _) = impact_score(
                        tensor.grad[i],
                        tensor.pattern(i),
                        tensor.format,
                        tensor.layer_min,
                        tensor.layer_max,
                    );
                    let bound = impact_upper_bound(tensor.grad[i], span);
                    assert!(
                        bound >= score,
                        "{} idx {i}: bound {bound} < score {score}",
                        tensor.name
                    );
                }
            }
        }
        assert_eq!(impact_upper_bound(0.0, 123.0), 0.0);
    }

    #[test]
    fn skip_search_equals_brute_force() {
        for kind in [QuantKind::Bf16, QuantKind::Int8] {
            let model = model_with_random_grads(7, kind);
            let layers: Vec<usize> = (0..model.tensors.len()).collect();
            for k in [1usize, 10, 100] {
                let (skip, skip_stats) = skip_search(&model, &layers, k);
                let (brute, brute_stats) = brute_force_topk(&model, &layers, k);
                assert_eq!(skip.key_set(), brute.key_set(), "kind {kind:?} k {k}");
                assert_eq!(
                    skip.entries().len(),
                    k.min(brute_stats.total),
                    "queue holds exactly k entries when enough weights exist"
                );
                let (par, _) = skip_search_parallel(&model, &layers, k);
                assert_eq!(par.key_set(), skip.key_set());
                assert!(skip_stats.exact_evaluations <= brute_stats.exact_evaluations);
            }
        }
    }

    #[test]
    fn skip_actually_prunes_on_uneven_gradients() {
        let mut model = tiny_model(9, QuantKind::Bf16);
        // Head gradients large, every other layer tiny: after the head fills
        // the queue, other layers prune after their first bound check.
        for t in &mut model.tensors {
            let big = t.layer_id == model.head_layer_id;
            for (i, g) in t.grad.iter_mut().enumerate() {
                *g = if big { 1.0 + (i % 13) as f64 } else { 1e-9 };
            }
        }
        let layers: Vec<usize> = (0..model.tensors.len()).collect();
        let (queue, stats) = skip_search(&model, &layers, 10);
        let (brute, _) = brute_force_topk(&model, &layers, 10);
        assert_eq!(queue.key_set(), brute.key_set());
        assert!(stats.skipped > 0);
        assert!(stats.exact_evaluations < stats.total);
    }

    #[test]
    fn queue_tie_breaks_lexicographically() {
        let mut queue = TopKQueue::new(2);
        let mk = |layer, idx, score| FlipCandidate {
            layer_id: layer,
            weight_index: idx,
            bit_position: 0,
            direction: crate::bitcodec::FlipDirection::ZeroToOne,
            delta_w: 1.0,
            impact_score: score,
            aux_utility_score: None,
        };
        queue.insert(mk(3, 0, 1.0));
        queue.insert(mk(1, 5, 1.0));
        queue.insert(mk(2, 2, 1.0));
        let keys: Vec<_> = queue.entries().iter().map(|c| c.layer_id).collect();
        assert_eq!(keys, vec![1, 2]);
        queue.insert(mk(0, 9, 2.0));
        let keys: Vec<_> = queue.entries().iter().map(|c| c.layer_id).collect();
        assert_eq!(keys, vec![0, 1]);
    }

    #[test]
    fn search_range_resolution() {
        let model = tiny_model(1, QuantKind::Bf16);
        let n = model.tensors.len();
        let none = std::collections::BTreeSet::new();
        assert_eq!(SearchRange::Full.resolve(&model, &none).len(), n);
        assert_eq!(
            SearchRange::HeadOnly.resolve(&model, &none),
            vec![model.head_layer_id]
        );
        let half = SearchRange::TailFraction(0.5).resolve(&model, &none);
        assert_eq!(half.len(), n.div_ceil(2));
        assert_eq!(*half.last().unwrap(), model.head_layer_id);
        let mut protected = std::collections::BTreeSet::new();
        protected.insert(model.head_layer_id);
        let resolved = SearchRange::Full.resolve(&model, &protected);
        assert_eq!(resolved.len(), n - 1);
        assert!(!resolved.contains(&model.head_layer_id));
        assert!(SearchRange::HeadOnly.resolve(&model, &protected).is_empty());
    }

    #[test]
    fn every_queue_entry_is_in_range() {
        let model = model_with_random_grads(11, QuantKind::Bf16);
        let layers: Vec<usize> = (0..model.tensors.len()).collect();
        let (queue, _) = skip_search(&model, &layers, 50);
        for c in queue.entries() {
            let t = model.tensor(c.layer_id);
            let after = t.value(c.weight_index) + c.delta_w;
            assert!(crate::bitcodec::in_range(after, t.layer_min, t.layer_max));
        }
    }
}
