//! Training loop for the toy victim: full-precision master weights, Adam,
//! then per-tensor quantization into the requested storage format.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bitcodec::{QuantFormat, QuantKind};
use crate::corpus::{Corpus, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::{tensor_specs, LayerTensor, ModelDims, Net, ToyModel, WeightedSeq};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub context_length: usize,
    pub kind: QuantKind,
    /// Loss weight of prompt positions relative to answer positions.
    pub prompt_weight: f64,
    /// Exact-match floor the trained victim must reach on the held-in QA set.
    pub exact_match_gate: f64,
    /// Maximum exact-match drop the quantization step may introduce.
    pub quantization_drop_gate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            steps: 3000,
            batch_size: 16,
            lr: 1.5e-3,
            warmup_steps: 100,
            d_model: 128,
            n_heads: 4,
            n_blocks: 2,
            mlp_hidden: 256,
            context_length: 64,
            kind: QuantKind::Bf16,
            prompt_weight: 0.25,
            exact_match_gate: 0.95,
            quantization_drop_gate: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub master_exact_match: f64,
    pub quantized_exact_match: f64,
}

/// One QA line weighted so answer tokens dominate; each line contributes a
/// normalized total weight of 1.
fn qa_seq(vocab: &Vocab, question: &str, answer: &str, prompt_weight: f64) -> Result<WeightedSeq> {
    let tokens = vocab.qa_line(question, answer)?;
    let a_pos = tokens
        .iter()
        .position(|&t| t == vocab.a_marker)
        .expect("qa line contains <a>");
    let mut weights = vec![0.0; tokens.len() - 1];
    for (p, w) in weights.iter_mut().enumerate() {
        *w = if p >= a_pos { 1.0 } else { prompt_weight };
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(WeightedSeq::new(tokens, weights))
}

fn text_seq(vocab: &Vocab, text: &str) -> Result<WeightedSeq> {
    let tokens = vocab.text_line(text)?;
    let n = tokens.len() - 1;
    Ok(WeightedSeq::new(tokens, vec![1.0 / n as f64; n]))
}

fn argmax_lowest(row: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (t, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = t;
        }
    }
    best
}

/// Greedy decode against raw master weights.
fn decode_with_net(net: &Net<'_>, vocab: &Vocab, prompt: &[TokenId], max_new: usize) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let next = argmax_lowest(&net.next_token_logits(&seq));
        seq.push(next);
        if next == vocab.eos {
            break;
        }
    }
    seq
}

fn exact_match_master(
    dims: &ModelDims,
    weights: &[Vec<f64>],
    vocab: &Vocab,
    corpus: &Corpus,
) -> Result<f64> {
    let net = Net::new(dims, weights.iter().map(|w| w.as_slice()).collect());
    let mut hits = 0usize;
    for item in &corpus.qa {
        let prompt = vocab.prompt(&item.question)?;
        let mut expected = vocab.tokenize_text(&item.answer)?;
        expected.push(vocab.eos);
        let decoded = decode_with_net(&net, vocab, &prompt, expected.len() + 2);
        if decoded[prompt.len()..] == expected[..] {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.qa.len() as f64)
}

/// Exact match of the quantized model over the held-in QA set.
pub fn exact_match_quantized(model: &ToyModel, corpus: &Corpus) -> Result<f64> {
    let mut hits = 0usize;
    for item in &corpus.qa {
        let prompt = model.vocab.prompt(&item.question)?;
        let mut expected = model.vocab.tokenize_text(&item.answer)?;
        expected.push(model.vocab.eos);
        let decoded = model.greedy_decode(&prompt, expected.len() + 2)?;
        if decoded[prompt.len()..] == expected[..] {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.qa.len() as f64)
}

/// Train the victim on the corpus, quantize it, and enforce the accuracy
/// gates. Fixed seed and config yield a bit-identical checkpoint.
pub fn train_toy(corpus: &Corpus, config: &TrainConfig) -> Result<(ToyModel, TrainReport)> {
    let vocab = Vocab::from_corpus(corpus);
    let dims = ModelDims {
        vocab_size: vocab.size(),
        context_length: config.context_length,
        d_model: config.d_model,
        n_heads: config.n_heads,
        n_blocks: config.n_blocks,
        mlp_hidden: config.mlp_hidden,
    };
    if dims.d_model % dims.n_heads != 0 {
        return Err(Error::Config("d_model must be divisible by n_heads".into()));
    }

    let mut lines: Vec<WeightedSeq> = Vec::new();
    for item in &corpus.qa {
        lines.push(qa_seq(&vocab, &item.question, &item.answer, config.prompt_weight)?);
    }
    for text in &corpus.text {
        lines.push(text_seq(&vocab, text)?);
    }
    for line in &lines {
        if line.tokens.len() > dims.context_length {
            return Err(Error::Config(format!(
                "corpus line of {} tokens exceeds context {}",
                line.tokens.len(),
                dims.context_length
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let specs = tensor_specs(&dims);
    let mut master: Vec<Vec<f64>> = specs
        .iter()
        .map(|(_, shape)| {
            let n: usize = shape.iter().product();
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        })
        .collect();
    let mut m: Vec<Vec<f64>> = master.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut v: Vec<Vec<f64>> = master.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut grads: Vec<Vec<f64>> = master.iter().map(|w| vec![0.0; w.len()]).collect();

    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.99, 1e-8);
    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    let mut final_loss = 0.0;

    for step in 0..config.steps {
        let lr = if step < config.warmup_steps {
            config.lr * (step + 1) as f64 / config.warmup_steps as f64
        } else {
            let t = (step - config.warmup_steps) as f64
                / (config.steps - config.warmup_steps).max(1) as f64;
            let floor = 0.1 * config.lr;
            floor + 0.5 * (config.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
        };

        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = &lines[order[cursor]];
            cursor += 1;
            let net = Net::new(&dims, master.iter().map(|w| w.as_slice()).collect());
            batch_loss += net.loss_and_grad(seq, &mut grads);
        }
        final_loss = batch_loss / config.batch_size as f64;

        let t = (step + 1) as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let scale = 1.0 / config.batch_size as f64;
        for ((w, g), (ms, vs)) in master
            .iter_mut()
            .zip(&grads)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            for i in 0..w.len() {
                let gi = g[i] * scale;
                ms[i] = beta1 * ms[i] + (1.0 - beta1) * gi;
                vs[i] = beta2 * vs[i] + (1.0 - beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    let master_em = exact_match_master(&dims, &master, &vocab, corpus)?;

    let tensors: Vec<LayerTensor> = specs
        .into_iter()
        .enumerate()
        .map(|(layer_id, (name, shape))| {
            let source = &master[layer_id];
            let format = match config.kind {
                QuantKind::Bf16 => QuantFormat::Bf16,
                QuantKind::Int8 => {
                    let peak = source.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                    QuantFormat::Int8 {
                        scale: ((peak / 127.0).max(1e-12)) as f32,
                    }
                }
            };
            LayerTensor::from_values(layer_id, name, shape, format, source)
        })
        .collect();
    let model = ToyModel::new(dims, config.kind, tensors, vocab);
    let quant_em = exact_match_quantized(&model, corpus)?;

    if master_em < config.exact_match_gate {
        return Err(Error::TrainingGate(format!(
            "master exact match {master_em:.4} below gate {:.2}",
            config.exact_match_gate
        )));
    }
    if quant_em < config.exact_match_gate {
        return Err(Error::TrainingGate(format!(
            "quantized exact match {quant_em:.4} below gate {:.2}",
            config.exact_match_gate
        )));
    }
    if (master_em - quant_em).abs() >= config.quantization_drop_gate {
        return Err(Error::TrainingGate(format!(
            "quantization moved exact match by {:.4} (gate {:.2})",
            (master_em - quant_em).abs(),
            config.quantization_drop_gate
        )));
    }

    Ok((
        model,
        TrainReport {
            steps: config.steps,
            final_loss,
            master_exact_match: master_em,
            quantized_exact_match: quant_em,
        },
    ))
}
