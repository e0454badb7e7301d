use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bitcodec::{QuantFormat, QuantKind};
use crate::corpus::Vocab;
use crate::model::*;

/// Small random victim for unit tests; no training involved.
pub(crate) fn tiny_model(seed: u64, kind: QuantKind) -> ToyModel {
    let vocab_words: Vec<String> = ["<q>", "<a>", "<eos>"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..37).map(|i| format!("w{i}")))
        .collect();
    let vocab = Vocab::from_tokens(vocab_words).unwrap();
    let dims = ModelDims {
        vocab_size: vocab.size(),
        context_length: 16,
        d_model: 32,
        n_heads: 4,
        n_blocks: 2,
        mlp_hidden: 64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.08).unwrap();
    let tensors = tensor_specs(&dims)
        .into_iter()
        .enumerate()
        .map(|(layer_id, (name, shape))| {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let format = match kind {
                QuantKind::Bf16 => QuantFormat::Bf16,
                QuantKind::Int8 => {
                    let peak = values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                    QuantFormat::Int8 {
                        scale: (peak / 127.0).max(1e-9) as f32,
                    }
                }
            };
            LayerTensor::from_values(layer_id, name, shape, format, &values)
        })
        .collect();
    ToyModel::new(dims, kind, tensors, vocab)
}

fn test_seq(model: &ToyModel, len: usize) -> WeightedSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..model.dims.vocab_size)).collect();
    // Weight the back half of the sequence, like an answer span.
    let mut weights = vec![0.0; len - 1];
    for (p, w) in weights.iter_mut().enumerate() {
        if p >= len / 2 {
            *w = 1.0 / (len - len / 2) as f64;
        }
    }
    WeightedSeq::new(tokens, weights)
}

#[test]
fn forward_shape_and_determinism() {
    let model = tiny_model(7, QuantKind::Bf16);
    let tokens = vec![1, 5, 9, 3];
    let a = model.forward(&tokens).unwrap();
    let b = model.forward(&tokens).unwrap();
    assert_eq!(a.rows(), 4);
    assert_eq!(a.row(0).len(), model.dims.vocab_size);
    assert_eq!(a.data, b.data);
}

#[test]
fn forward_rejects_bad_input() {
    let model = tiny_model(7, QuantKind::Bf16);
    assert!(model.forward(&[model.dims.vocab_size]).is_err());
    let long = vec![0usize; model.dims.context_length + 1];
    assert!(model.forward(&long).is_err());
}

#[test]
fn flip_involution_restores_logits_bitwise() {
    let mut model = tiny_model(7, QuantKind::Bf16);
    let tokens = vec![2, 8, 4, 11, 6];
    let before = model.forward(&tokens).unwrap();
    let loc = FlipLocation {
        layer_id: model.head_layer_id,
        weight_index: 17,
        bit_position: 14,
    };
    model.apply_flip(loc);
    let during = model.forward(&tokens).unwrap();
    assert_ne!(before.data, during.data);
    model.apply_flip(loc);
    let after = model.forward(&tokens).unwrap();
    assert_eq!(before.data, after.data);
}

#[test]
fn forward_never_mutates_patterns() {
    let model = tiny_model(7, QuantKind::Int8);
    let snapshot = model.patterns_snapshot();
    let _ = model.forward(&[1, 2, 3, 4, 5]).unwrap();
    let _ = model.greedy_decode(&[1, 2, 3], 5).unwrap();
    assert_eq!(snapshot, model.patterns_snapshot());
}

#[test]
fn grad_zero_for_unused_token_embedding() {
    let mut model = tiny_model(7, QuantKind::Bf16);
    let seq = test_seq(&model, 8);
    let unused: usize = (0..model.dims.vocab_size)
        .find(|t| !seq.tokens.contains(t))
        .unwrap();
    model.zero_grads();
    model.loss_and_grad(std::slice::from_ref(&seq)).unwrap();
    let d = model.dims.d_model;
    let row = &model.tensor(0).grad[unused * d..(unused + 1) * d];
    assert!(row.iter().all(|&g| g == 0.0));
}

#[test]
fn grad_of_sum_is_sum_of_grads() {
    let mut model = tiny_model(7, QuantKind::Bf16);
    let s1 = test_seq(&model, 8);
    let s2 = test_seq(&model, 6);
    model.zero_grads();
    model.loss_and_grad(std::slice::from_ref(&s1)).unwrap();
    let g1: Vec<f64> = model.tensor(model.head_layer_id).grad.clone();
    model.zero_grads();
    model.loss_and_grad(std::slice::from_ref(&s2)).unwrap();
    let g2: Vec<f64> = model.tensor(model.head_layer_id).grad.clone();
    model.zero_grads();
    model.loss_and_grad(&[s1, s2]).unwrap();
    let gsum = &model.tensor(model.head_layer_id).grad;
    for i in 0..gsum.len() {
        assert!((gsum[i] - (g1[i] + g2[i])).abs() <= 1e-12 * (1.0 + gsum[i].abs()));
    }
}

/// Central finite differences on FP shadow weights vs the analytic gradient.
#[test]
fn gradient_matches_finite_differences() {
    for kind in [QuantKind::Bf16, QuantKind::Int8] {
        let mut model = tiny_model(11, kind);
        let seqs = vec![test_seq(&model, 9), test_seq(&model, 7)];
        model.zero_grads();
        model.loss_and_grad(&seqs).unwrap();

        // f64 forward math keeps rounding ~1e-12 at this step size, while
        // 1e-3 would leave visible truncation on small-gradient weights.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = 1e-4;
        let mut checked = 0;
        while checked < 60 {
            let layer_id = rng.gen_range(0..model.tensors.len());
            let idx = rng.gen_range(0..model.tensor(layer_id).len());
            let analytic = model.tensor(layer_id).grad[idx];
            let loc = FlipLocation {
                layer_id,
                weight_index: idx,
                bit_position: 0,
            };
            let w = model.tensor(layer_id).value(idx);
            let up = model.loss_with_shadow_weight(&seqs, loc, w + eps).unwrap();
            let down = model.loss_with_shadow_weight(&seqs, loc, w - eps).unwrap();
            let fd = (up - down) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs());
            if denom < 1e-8 {
                // Both negligible: the weight does not influence the loss.
                assert!((analytic - fd).abs() < 1e-8);
            } else {
                let rel = (analytic - fd).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "{kind:?} layer {layer_id} idx {idx}: analytic {analytic:.3e} fd {fd:.3e} rel {rel:.3e}"
                );
            }
            checked += 1;
        }
    }
}

#[test]
fn shadow_weight_probe_restores_state() {
    let mut model = tiny_model(7, QuantKind::Bf16);
    let seqs = vec![test_seq(&model, 8)];
    let baseline = model.loss_only(&seqs).unwrap();
    let loc = FlipLocation {
        layer_id: 2,
        weight_index: 5,
        bit_position: 0,
    };
    let _ = model.loss_with_shadow_weight(&seqs, loc, 123.0).unwrap();
    assert_eq!(model.loss_only(&seqs).unwrap(), baseline);
}

#[test]
fn greedy_decode_contract() {
    let model = tiny_model(7, QuantKind::Bf16);
    let prompt = vec![3usize, 1, 4];
    assert_eq!(model.greedy_decode(&prompt, 0).unwrap(), prompt);
    let a = model.greedy_decode(&prompt, 6).unwrap();
    let b = model.greedy_decode(&prompt, 6).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= prompt.len() + 6);
}

#[test]
fn layer_stats_bracket_values_after_flip() {
    let mut model = tiny_model(7, QuantKind::Bf16);
    let loc = FlipLocation {
        layer_id: 3,
        weight_index: 20,
        bit_position: 9,
    };
    model.apply_flip(loc);
    let t = model.tensor_mut(loc.layer_id);
    t.refresh_stats();
    let (lo, hi) = (t.layer_min, t.layer_max);
    assert!(t.values().iter().all(|&v| lo <= v && v <= hi));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for kind in [QuantKind::Bf16, QuantKind::Int8] {
        let model = tiny_model(13, kind);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model.patterns_snapshot(), loaded.patterns_snapshot());
        assert_eq!(model.dims, loaded.dims);
        assert_eq!(model.vocab, loaded.vocab);
        let tokens = vec![1, 2, 3, 4];
        assert_eq!(
            model.forward(&tokens).unwrap().data,
            loaded.forward(&tokens).unwrap().data
        );
        // Saving the loaded model reproduces the file byte-for-byte.
        let path2 = dir.path().join("model2.bin");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}

#[test]
fn memory_image_layout_matches_patterns() {
    let model = tiny_model(7, QuantKind::Bf16);
    let image = memory_image(&model);
    let expected: usize = model.tensors.iter().map(|t| t.len() * 2).sum();
    assert_eq!(image.len(), expected);
    let off = tensor_image_offset(&model, model.head_layer_id);
    let head = model.tensor(model.head_layer_id);
    let first = u16::from_le_bytes([image[off], image[off + 1]]);
    assert_eq!(first, head.pattern(0));
}
