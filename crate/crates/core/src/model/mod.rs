//! The toy decoder-only transformer victim.
//!
//! Weights live as quantized bit patterns (`LayerTensor::patterns`) with a
//! dequantized `f64` shadow (`values`) kept in lockstep; all arithmetic runs
//! on the dequantized values. Bit flips mutate patterns via XOR, so applying
//! the same flip twice restores the tensor bit-for-bit.

mod checkpoint;
mod net;
#[cfg(test)]
pub(crate) mod tests;
mod train;

pub use checkpoint::{load_checkpoint, memory_image, save_checkpoint, tensor_image_offset};
pub use train::{exact_match_quantized, train_toy, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::bitcodec::{self, FlipDirection, QuantFormat, QuantKind};
use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};

pub(crate) use net::{Net, RowCache};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
}

impl ModelDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Canonical tensor list for a dimension set: embeddings, per-block
/// attention and MLP matrices, then the output projection.
pub fn tensor_specs(dims: &ModelDims) -> Vec<(String, Vec<usize>)> {
    let d = dims.d_model;
    let mut specs = vec![
        ("embed.tok".to_string(), vec![dims.vocab_size, d]),
        ("embed.pos".to_string(), vec![dims.context_length, d]),
    ];
    for b in 0..dims.n_blocks {
        for name in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("blocks.{b}.attn.{name}"), vec![d, d]));
        }
        specs.push((format!("blocks.{b}.mlp.fc1"), vec![dims.mlp_hidden, d]));
        specs.push((format!("blocks.{b}.mlp.fc2"), vec![d, dims.mlp_hidden]));
    }
    specs.push(("lm_head".to_string(), vec![dims.vocab_size, d]));
    specs
}

/// One quantized parameter tensor with layer statistics and a gradient buffer.
#[derive(Debug, Clone)]
pub struct LayerTensor {
    pub layer_id: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub format: QuantFormat,
    patterns: Vec<u16>,
    values: Vec<f64>,
    pub layer_min: f64,
    pub layer_max: f64,
    pub grad: Vec<f64>,
}

impl LayerTensor {
    pub fn from_values(
        layer_id: usize,
        name: String,
        shape: Vec<usize>,
        format: QuantFormat,
        source: &[f64],
    ) -> LayerTensor {
        let patterns: Vec<u16> = source.iter().map(|&v| bitcodec::quantize(v, format)).collect();
        let values: Vec<f64> = patterns.iter().map(|&p| bitcodec::decode(p, format)).collect();
        let mut tensor = LayerTensor {
            layer_id,
            name,
            shape,
            format,
            grad: vec![0.0; values.len()],
            patterns,
            values,
            layer_min: 0.0,
            layer_max: 0.0,
        };
        tensor.refresh_stats();
        tensor
    }

    pub(crate) fn from_patterns(
        layer_id: usize,
        name: String,
        shape: Vec<usize>,
        format: QuantFormat,
        patterns: Vec<u16>,
    ) -> LayerTensor {
        let values: Vec<f64> = patterns.iter().map(|&p| bitcodec::decode(p, format)).collect();
        let mut tensor = LayerTensor {
            layer_id,
            name,
            shape,
            format,
            grad: vec![0.0; values.len()],
            patterns,
            values,
            layer_min: 0.0,
            layer_max: 0.0,
        };
        tensor.refresh_stats();
        tensor
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pattern(&self, index: usize) -> u16 {
        self.patterns[index]
    }

    pub fn patterns(&self) -> &[u16] {
        &self.patterns
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Recompute layer min/max over the dequantized values.
    pub fn refresh_stats(&mut self) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        self.layer_min = lo;
        self.layer_max = hi;
    }

    /// XOR one bit of one weight, keeping the value shadow in sync.
    /// Returns the direction the bit moved. Layer statistics are NOT
    /// refreshed here; the caller decides when bounds move.
    pub fn flip_bit(&mut self, index: usize, bit_position: u8) -> FlipDirection {
        let before = self.patterns[index];
        let direction = if before & (1 << bit_position) == 0 {
            FlipDirection::ZeroToOne
        } else {
            FlipDirection::OneToZero
        };
        let after = bitcodec::flip_pattern(before, bit_position, self.format);
        self.patterns[index] = after;
        self.values[index] = bitcodec::decode(after, self.format);
        direction
    }

    /// Overwrite the dequantized shadow only (the stored pattern is left
    /// untouched). Finite-difference probes use this to realize arbitrary
    /// perturbed weights that no quantized pattern could hold; callers must
    /// restore the original value afterwards.
    pub fn set_shadow_value(&mut self, index: usize, value: f64) {
        self.values[index] = value;
    }

    /// Re-derive the shadow value from the stored pattern.
    pub fn sync_shadow_value(&mut self, index: usize) {
        self.values[index] = bitcodec::decode(self.patterns[index], self.format);
    }
}

/// Identifies one applied (or candidate) bit flip on a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipLocation {
    pub layer_id: usize,
    pub weight_index: usize,
    pub bit_position: u8,
}

/// Pre-softmax scores for every position of a forward pass.
#[derive(Debug, Clone)]
pub struct Logits {
    pub data: Vec<f64>,
    pub vocab_size: usize,
}

impl Logits {
    pub fn rows(&self) -> usize {
        self.data.len() / self.vocab_size
    }

    pub fn row(&self, position: usize) -> &[f64] {
        &self.data[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Argmax with ties broken toward the lowest token id.
    pub fn argmax(&self, position: usize) -> TokenId {
        let row = self.row(position);
        let mut best = 0usize;
        for (t, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = t;
            }
        }
        best
    }
}

/// One teacher-forced sequence with per-position loss weights.
/// `weights[p]` scales the NLL of predicting `tokens[p + 1]` from the
/// prefix ending at position `p`.
#[derive(Debug, Clone)]
pub struct WeightedSeq {
    pub tokens: Vec<TokenId>,
    pub weights: Vec<f64>,
}

impl WeightedSeq {
    pub fn new(tokens: Vec<TokenId>, weights: Vec<f64>) -> WeightedSeq {
        assert_eq!(weights.len() + 1, tokens.len());
        WeightedSeq { tokens, weights }
    }
}

/// The toy autoregressive transformer with quantized weight storage.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub dims: ModelDims,
    pub kind: QuantKind,
    pub tensors: Vec<LayerTensor>,
    pub head_layer_id: usize,
    pub vocab: Vocab,
}

impl ToyModel {
    pub fn new(dims: ModelDims, kind: QuantKind, tensors: Vec<LayerTensor>, vocab: Vocab) -> ToyModel {
        let head_layer_id = tensors.len() - 1;
        ToyModel {
            dims,
            kind,
            tensors,
            head_layer_id,
            vocab,
        }
    }

    pub fn tensor(&self, layer_id: usize) -> &LayerTensor {
        &self.tensors[layer_id]
    }

    pub fn tensor_mut(&mut self, layer_id: usize) -> &mut LayerTensor {
        &mut self.tensors[layer_id]
    }

    pub fn layer_id_by_name(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn total_weights(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn validate_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.dims.context_length {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                context: self.dims.context_length,
            });
        }
        for &t in tokens {
            if t >= self.dims.vocab_size {
                return Err(Error::TokenOutOfVocab {
                    id: t,
                    vocab: self.dims.vocab_size,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net::new(
            &self.dims,
            self.tensors.iter().map(|t| t.values.as_slice()).collect(),
        )
    }

    /// Teacher-forced forward pass over one sequence.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Logits> {
        self.validate_tokens(tokens)?;
        Ok(self.net().forward(tokens))
    }

    /// Weighted NLL over a batch, without touching gradient buffers.
    pub fn loss_only(&self, seqs: &[WeightedSeq]) -> Result<f64> {
        let net = self.net();
        let mut total = 0.0;
        for seq in seqs {
            self.validate_tokens(&seq.tokens)?;
            total += net.loss_only(seq);
        }
        Ok(total)
    }

    /// Weighted NLL and its gradient, accumulated into each tensor's `grad`.
    /// Call `zero_grads` first unless accumulation is intended.
    pub fn loss_and_grad(&mut self, seqs: &[WeightedSeq]) -> Result<f64> {
        for seq in seqs {
            self.validate_tokens(&seq.tokens)?;
        }
        let mut grads: Vec<Vec<f64>> = self.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut total = 0.0;
        {
            let net = self.net();
            for seq in seqs {
                total += net.loss_and_grad(seq, &mut grads);
            }
        }
        for (tensor, grad) in self.tensors.iter_mut().zip(grads) {
            for (g, d) in tensor.grad.iter_mut().zip(grad) {
                *g += d;
            }
        }
        Ok(total)
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Greedy decoding: append argmax tokens (lowest id wins ties) until
    /// `max_new` tokens were added, `<eos>` was produced, or the context
    /// fills. Returns the full sequence including the prompt.
    pub fn greedy_decode(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        self.validate_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        let net = self.net();
        for _ in 0..max_new {
            if seq.len() >= self.dims.context_length {
                break;
            }
            let logits = net.forward(&seq);
            let next = logits.argmax(seq.len() - 1);
            seq.push(next);
            if next == self.vocab.eos {
                break;
            }
        }
        Ok(seq)
    }

    /// Apply one bit flip permanently (no statistics refresh).
    pub fn apply_flip(&mut self, loc: FlipLocation) -> FlipDirection {
        self.tensors[loc.layer_id].flip_bit(loc.weight_index, loc.bit_position)
    }

    /// Bit-exact snapshot of every tensor's patterns.
    pub fn patterns_snapshot(&self) -> Vec<Vec<u16>> {
        self.tensors.iter().map(|t| t.patterns.clone()).collect()
    }

    /// Cache final hidden states and baseline logit rows for head-only
    /// candidate re-scoring.
    pub(crate) fn cache_rows(&self, seq: &WeightedSeq) -> Vec<net::RowCache> {
        self.net().cache_rows(seq)
    }

    /// Re-score cached rows after a flip confined to the head layer's token
    /// row `changed_token`. Bit-identical to a full forward.
    pub(crate) fn cached_loss(&self, rows: &[net::RowCache], changed_token: Option<usize>) -> f64 {
        net::cached_loss(
            rows,
            self.tensors[self.head_layer_id].values(),
            self.dims.d_model,
            changed_token,
        )
    }

    /// Compute a weighted loss with a single weight's dequantized value
    /// replaced by `value` (an FP shadow weight); the stored pattern and
    /// shadow are restored before returning.
    pub fn loss_with_shadow_weight(
        &mut self,
        seqs: &[WeightedSeq],
        loc: FlipLocation,
        value: f64,
    ) -> Result<f64> {
        let original = self.tensors[loc.layer_id].value(loc.weight_index);
        self.tensors[loc.layer_id].set_shadow_value(loc.weight_index, value);
        let result = self.loss_only(seqs);
        self.tensors[loc.layer_id].set_shadow_value(loc.weight_index, original);
        result
    }
}
