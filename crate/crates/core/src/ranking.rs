//! Second-stage ranking of the Top-k queue by auxiliary utility.
//!
//! Each candidate flip is applied, measured, and reverted bit-exactly. The
//! utility score combines the relative target-loss reduction with a penalty
//! for degradation on an attack-irrelevant auxiliary dataset.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Vocab};
use crate::error::{Error, Result};
use crate::model::{FlipLocation, ToyModel, WeightedSeq};
use crate::objective::{target_loss, AttackSample};
use crate::search::FlipCandidate;

/// How auxiliary degradation is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuxKind {
    /// Exact-match accuracy over QA items; penalty is relative accuracy drop.
    AccuracyBased,
    /// Mean per-token NLL over token sequences; penalty is relative loss rise.
    LossBased,
}

/// Attack-irrelevant evaluation data for the utility penalty.
#[derive(Debug, Clone)]
pub struct AuxDataset {
    pub kind: AuxKind,
    /// AccuracyBased: (prompt, expected answer tokens incl. eos).
    qa: Vec<(Vec<usize>, Vec<usize>)>,
    /// LossBased: teacher-forced sequences with mean-per-token weights.
    seqs: Vec<WeightedSeq>,
}

impl AuxDataset {
    /// Assemble from already-tokenized parts.
    pub fn from_parts(
        kind: AuxKind,
        qa: Vec<(Vec<usize>, Vec<usize>)>,
        seqs: Vec<WeightedSeq>,
    ) -> AuxDataset {
        AuxDataset { kind, qa, seqs }
    }

    /// Build from corpus-format records: QA records become accuracy items,
    /// and every record doubles as a loss sequence.
    pub fn from_corpus_records(corpus: &Corpus, vocab: &Vocab, kind: AuxKind) -> Result<AuxDataset> {
        let mut qa = Vec::new();
        let mut seqs = Vec::new();
        for item in &corpus.qa {
            let prompt = vocab.prompt(&item.question)?;
            let mut expected = vocab.tokenize_text(&item.answer)?;
            expected.push(vocab.eos);
            qa.push((prompt, expected));
            let tokens = vocab.qa_line(&item.question, &item.answer)?;
            let n = tokens.len() - 1;
            seqs.push(WeightedSeq::new(tokens, vec![1.0 / n as f64; n]));
        }
        for text in &corpus.text {
            let tokens = vocab.text_line(text)?;
            let n = tokens.len() - 1;
            seqs.push(WeightedSeq::new(tokens, vec![1.0 / n as f64; n]));
        }
        Ok(AuxDataset { kind, qa, seqs })
    }

    pub fn len(&self) -> usize {
        match self.kind {
            AuxKind::AccuracyBased => self.qa.len(),
            AuxKind::LossBased => self.seqs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Measure the auxiliary metric over `indices` (or the full set).
    /// AccuracyBased yields exact-match accuracy; LossBased yields mean loss.
    pub fn metric(&self, model: &ToyModel, indices: Option<&[usize]>) -> Result<f64> {
        let all: Vec<usize>;
        let idx: &[usize] = match indices {
            Some(i) => i,
            None => {
                all = (0..self.len()).collect();
                &all
            }
        };
        match self.kind {
            AuxKind::AccuracyBased => {
                let mut hits = 0usize;
                for &i in idx {
                    let (prompt, expected) = &self.qa[i];
                    let decoded = model.greedy_decode(prompt, expected.len())?;
                    if decoded[prompt.len()..] == expected[..] {
                        hits += 1;
                    }
                }
                Ok(hits as f64 / idx.len() as f64)
            }
            AuxKind::LossBased => {
                let mut total = 0.0;
                for &i in idx {
                    total += model.loss_only(std::slice::from_ref(&self.seqs[i]))?;
                }
                Ok(total / idx.len() as f64)
            }
        }
    }
}

/// Per-iteration auxiliary evaluation context: the fixed candidate-ranking
/// subsample and its cached pre-flip baseline.
#[derive(Debug, Clone)]
pub struct AuxContext {
    pub subsample: Vec<usize>,
    pub baseline: f64,
}

impl AuxContext {
    /// Choose the run-level subsample deterministically from the seed.
    pub fn choose_subsample(data: &AuxDataset, size: usize, seed: u64) -> Vec<usize> {
        if data.len() <= size {
            return (0..data.len()).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA0C5);
        let mut idx: Vec<usize> = sample(&mut rng, data.len(), size).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Cache the pre-flip baseline for this iteration.
    pub fn begin_iteration(data: &AuxDataset, model: &ToyModel, subsample: &[usize]) -> Result<AuxContext> {
        let baseline = data.metric(model, Some(subsample))?;
        match data.kind {
            AuxKind::AccuracyBased if baseline <= 0.0 => Err(Error::AuxBaseline(
                "accuracy baseline must be positive".into(),
            )),
            AuxKind::LossBased if baseline == 0.0 || !baseline.is_finite() => Err(Error::AuxBaseline(
                "loss baseline must be finite and nonzero".into(),
            )),
            _ => Ok(AuxContext {
                subsample: subsample.to_vec(),
                baseline,
            }),
        }
    }
}

/// One evaluated queue entry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub candidate: FlipCandidate,
    pub delta_l_rel: f64,
    pub delta_u_aux: f64,
    pub aux_utility_score: f64,
    /// Non-finite auxiliary measurement after the flip.
    pub destabilized: bool,
}

/// The sign convention of the score comparison; the equation form makes
/// larger better, the prose form selects the minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionDirection {
    MaximizeScore,
    MinimizeScore,
}

fn flip_loc(c: &FlipCandidate) -> FlipLocation {
    FlipLocation {
        layer_id: c.layer_id,
        weight_index: c.weight_index,
        bit_position: c.bit_position,
    }
}

/// Relative target-loss reduction of one flip: apply, re-measure, revert.
pub fn delta_l_rel(
    model: &mut ToyModel,
    sample: &AttackSample,
    candidate: &FlipCandidate,
    l_before: f64,
) -> Result<f64> {
    if l_before == 0.0 {
        return Err(Error::AttackAlreadySucceeded);
    }
    let loc = flip_loc(candidate);
    model.apply_flip(loc);
    let l_after = target_loss(model, sample);
    model.apply_flip(loc);
    Ok((l_before - l_after?) / l_before)
}

/// The penalty arithmetic: relative accuracy drop, or relative loss rise
/// (positive when the auxiliary loss increases).
pub fn aux_penalty(kind: AuxKind, baseline: f64, after: f64) -> f64 {
    match kind {
        AuxKind::AccuracyBased => (baseline - after) / baseline,
        AuxKind::LossBased => -(baseline - after) / baseline.abs(),
    }
}

/// Auxiliary degradation of one flip (positive = worse). `None` marks a
/// destabilized candidate (non-finite measurement after the flip).
pub fn delta_u_aux(
    model: &mut ToyModel,
    aux: &AuxDataset,
    ctx: &AuxContext,
    candidate: &FlipCandidate,
) -> Result<Option<f64>> {
    let loc = flip_loc(candidate);
    model.apply_flip(loc);
    let after = aux.metric(model, Some(&ctx.subsample));
    model.apply_flip(loc);
    let after = after?;
    if !after.is_finite() {
        return Ok(None);
    }
    Ok(Some(aux_penalty(aux.kind, ctx.baseline, after)))
}

/// Cached trunk state for re-scoring flips confined to the output head.
/// The head layer feeds nothing upstream, so a head-row change only moves
/// one logit row; re-scoring against cached hidden states is bit-identical
/// to a full forward pass at a fraction of the cost.
struct HeadFastPath {
    /// Per target prompt, the cached weighted rows of its loss sequence.
    target_rows: Vec<Vec<crate::model::RowCache>>,
    /// Per subsample aux item (LossBased only).
    aux_rows: Vec<Vec<crate::model::RowCache>>,
}

impl HeadFastPath {
    fn build(model: &ToyModel, sample: &AttackSample, aux: Option<(&AuxDataset, &AuxContext)>) -> HeadFastPath {
        let target_rows = sample
            .targets
            .iter()
            .map(|t| model.cache_rows(&t.loss_seq()))
            .collect();
        let aux_rows = match aux {
            Some((data, ctx)) if data.kind == AuxKind::LossBased => ctx
                .subsample
                .iter()
                .map(|&i| model.cache_rows(&data.seqs[i]))
                .collect(),
            _ => Vec::new(),
        };
        HeadFastPath {
            target_rows,
            aux_rows,
        }
    }

    /// Mean keyword loss over targets, under the currently-applied head flip.
    fn target_loss(&self, model: &ToyModel, changed_token: usize) -> f64 {
        let mut total = 0.0;
        for rows in &self.target_rows {
            total += model.cached_loss(rows, Some(changed_token));
        }
        total / self.target_rows.len() as f64
    }

    /// Mean aux loss over the subsample, under the currently-applied flip.
    fn aux_loss(&self, model: &ToyModel, changed_token: usize) -> f64 {
        let mut total = 0.0;
        for rows in &self.aux_rows {
            total += model.cached_loss(rows, Some(changed_token));
        }
        total / self.aux_rows.len() as f64
    }
}

/// Evaluate every queue entry. With `aux` absent (the no-aux ablation) the
/// penalty term is zero and the score reduces to the target-loss reduction.
pub fn evaluate_candidates(
    model: &mut ToyModel,
    queue_entries: &[FlipCandidate],
    sample: &AttackSample,
    l_before: f64,
    aux: Option<(&AuxDataset, &AuxContext)>,
) -> Result<Vec<RankedCandidate>> {
    if l_before == 0.0 {
        return Err(Error::AttackAlreadySucceeded);
    }
    let head = model.head_layer_id;
    let d = model.dims.d_model;
    let fast = if queue_entries.iter().any(|c| c.layer_id == head) {
        Some(HeadFastPath::build(model, sample, aux))
    } else {
        None
    };
    let fast_aux_ok = fast.as_ref().is_some_and(|f| !f.aux_rows.is_empty());

    let mut out = Vec::with_capacity(queue_entries.len());
    for candidate in queue_entries {
        let (dl, du, destabilized) = match (&fast, candidate.layer_id == head) {
            (Some(fast), true) => {
                let loc = flip_loc(candidate);
                let changed_token = candidate.weight_index / d;
                model.apply_flip(loc);
                let l_after = fast.target_loss(model, changed_token);
                let dl = (l_before - l_after) / l_before;
                let (du, destab) = match aux {
                    Some((data, ctx)) => {
                        let after = if fast_aux_ok {
                            fast.aux_loss(model, changed_token)
                        } else {
                            data.metric(model, Some(&ctx.subsample))?
                        };
                        if after.is_finite() {
                            (aux_penalty(data.kind, ctx.baseline, after), false)
                        } else {
                            (f64::INFINITY, true)
                        }
                    }
                    None => (0.0, false),
                };
                model.apply_flip(loc);
                (dl, du, destab)
            }
            _ => {
                let dl = delta_l_rel(model, sample, candidate, l_before)?;
                let (du, destab) = match aux {
                    Some((data, ctx)) => match delta_u_aux(model, data, ctx, candidate)? {
                        Some(v) => (v, false),
                        None => (f64::INFINITY, true),
                    },
                    None => (0.0, false),
                };
                (dl, du, destab)
            }
        };
        let destabilized = destabilized || !dl.is_finite();
        out.push(RankedCandidate {
            candidate: *candidate,
            delta_l_rel: dl,
            delta_u_aux: du,
            aux_utility_score: dl - du,
            destabilized,
        });
    }
    Ok(out)
}

/// Pick the winning candidate index under the configured direction.
/// Destabilized candidates are never chosen while a finite one exists; ties
/// fall back to higher impact score, then lexicographic position.
pub fn select_winner(ranked: &[RankedCandidate], direction: SelectionDirection) -> Result<usize> {
    if ranked.is_empty() {
        return Err(Error::NoCandidate("empty ranking".into()));
    }
    let better = |a: &RankedCandidate, b: &RankedCandidate| -> bool {
        if a.destabilized != b.destabilized {
            return !a.destabilized;
        }
        let (sa, sb) = (a.aux_utility_score, b.aux_utility_score);
        if sa != sb {
            return match direction {
                SelectionDirection::MaximizeScore => sa > sb,
                SelectionDirection::MinimizeScore => sa < sb,
            };
        }
        if a.candidate.impact_score != b.candidate.impact_score {
            return a.candidate.impact_score > b.candidate.impact_score;
        }
        let key = |c: &FlipCandidate| (c.layer_id, c.weight_index, c.bit_position);
        key(&a.candidate) < key(&b.candidate)
    };
    let mut best = 0usize;
    for i in 1..ranked.len() {
        if better(&ranked[i], &ranked[best]) {
            best = i;
        }
    }
    if ranked[best].destabilized {
        return Err(Error::AllCandidatesDestabilized);
    }
    Ok(best)
}
