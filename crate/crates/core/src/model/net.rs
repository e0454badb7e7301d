//! Shared transformer math over borrowed `f64` weight slices.
//!
//! Both the quantized attack-time model and the full-precision trainer run
//! through this one implementation: pre-norm blocks (parameter-free RMSNorm),
//! causal multi-head attention, a GELU MLP, and a linear output head.
//! Backward is hand-written reverse mode; the finite-difference tests in
//! `model` pin it down.

use crate::corpus::TokenId;
use crate::model::{Logits, ModelDims, WeightedSeq};

const RMS_EPS: f64 = 1e-5;

pub(crate) struct Net<'a> {
    dims: &'a ModelDims,
    w: Vec<&'a [f64]>,
}

// Canonical tensor indices (see `tensor_specs`).
const TOK: usize = 0;
const POS: usize = 1;
const BLOCK_BASE: usize = 2;
const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const WO: usize = 3;
const FC1: usize = 4;
const FC2: usize = 5;
const PER_BLOCK: usize = 6;

fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let in_dim = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        *slot = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// dx += W^T dy
fn matvec_t_accum(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let in_dim = dx.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[o * in_dim..(o + 1) * in_dim];
        for (slot, &wv) in dx.iter_mut().zip(row) {
            *slot += wv * g;
        }
    }
}

/// dW += dy ⊗ x
fn outer_accum(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let in_dim = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[o * in_dim..(o + 1) * in_dim];
        for (slot, &xv) in row.iter_mut().zip(x) {
            *slot += g * xv;
        }
    }
}

fn rmsnorm(x: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let ri = 1.0 / (ms + RMS_EPS).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * ri;
    }
    ri
}

/// dx += d(rmsnorm)/dx applied to dn.
fn rmsnorm_bwd_accum(dn: &[f64], x: &[f64], ri: f64, dx: &mut [f64]) {
    let d = x.len() as f64;
    let dot: f64 = dn.iter().zip(x).map(|(a, b)| a * b).sum();
    let k = ri * ri * ri / d * dot;
    for ((slot, &g), &xv) in dx.iter_mut().zip(dn).zip(x) {
        *slot += ri * g - k * xv;
    }
}

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C1 * (x + GELU_C2 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C1 * (x + GELU_C2 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C1 * (1.0 + 3.0 * GELU_C2 * x * x)
}

/// One weighted position's cached state for head-only re-scoring.
pub(crate) struct RowCache {
    pub weight: f64,
    pub target: TokenId,
    /// Final normed hidden state (independent of the output head).
    pub nf: Vec<f64>,
    /// Baseline logits row under the unflipped head.
    pub logits: Vec<f64>,
}

/// Re-score cached rows under a head whose token row `changed_token` was
/// modified. The changed logit is re-derived by the same dot product and the
/// log-sum-exp walks the row in the same index order as `weighted_rows`, so
/// the result is bit-identical to a full forward pass.
pub(crate) fn cached_loss(
    rows: &[RowCache],
    head: &[f64],
    d: usize,
    changed_token: Option<TokenId>,
) -> f64 {
    let mut loss = 0.0;
    for row in rows {
        let replaced = changed_token.map(|t| {
            let hrow = &head[t * d..(t + 1) * d];
            let logit: f64 = hrow.iter().zip(&row.nf).map(|(a, b)| a * b).sum();
            (t, logit)
        });
        let at = |j: usize, base: f64| -> f64 {
            match replaced {
                Some((t, v)) if t == j => v,
                _ => base,
            }
        };
        let mut m = f64::NEG_INFINITY;
        for (j, &l) in row.logits.iter().enumerate() {
            m = m.max(at(j, l));
        }
        let mut z = 0.0;
        for (j, &l) in row.logits.iter().enumerate() {
            z += (at(j, l) - m).exp();
        }
        let lse = m + z.ln();
        loss += row.weight * (lse - at(row.target, row.logits[row.target]));
    }
    loss
}

/// Activations recorded by the forward pass for reverse mode.
pub(crate) struct Tape {
    len: usize,
    blocks: Vec<BlockTape>,
    /// Final block output (input of the last norm).
    xf: Vec<f64>,
    rif: Vec<f64>,
    /// Final normed hidden states feeding the output head.
    nf: Vec<f64>,
}

struct BlockTape {
    x_in: Vec<f64>,
    ri1: Vec<f64>,
    n1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmaxed attention, head-major: att[h * L * L + i * L + j], j <= i.
    att: Vec<f64>,
    /// Concatenated per-head context vectors.
    ctx: Vec<f64>,
    x_mid: Vec<f64>,
    ri2: Vec<f64>,
    n2: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

impl<'a> Net<'a> {
    pub fn new(dims: &'a ModelDims, w: Vec<&'a [f64]>) -> Net<'a> {
        Net { dims, w }
    }

    fn block_w(&self, block: usize, which: usize) -> &'a [f64] {
        self.w[BLOCK_BASE + block * PER_BLOCK + which]
    }

    fn head_w(&self) -> &'a [f64] {
        self.w[BLOCK_BASE + self.dims.n_blocks * PER_BLOCK]
    }

    /// Run the trunk (embeddings through final norm), recording activations.
    fn forward_core(&self, tokens: &[TokenId]) -> Tape {
        let d = self.dims.d_model;
        let heads = self.dims.n_heads;
        let hd = self.dims.head_dim();
        let hidden = self.dims.mlp_hidden;
        let len = tokens.len();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; len * d];
        for (p, &t) in tokens.iter().enumerate() {
            let tok_row = &self.w[TOK][t * d..(t + 1) * d];
            let pos_row = &self.w[POS][p * d..(p + 1) * d];
            for j in 0..d {
                x[p * d + j] = tok_row[j] + pos_row[j];
            }
        }

        let mut blocks = Vec::with_capacity(self.dims.n_blocks);
        for b in 0..self.dims.n_blocks {
            let x_in = x.clone();
            let mut ri1 = vec![0.0; len];
            let mut n1 = vec![0.0; len * d];
            for p in 0..len {
                ri1[p] = rmsnorm(&x_in[p * d..(p + 1) * d], &mut n1[p * d..(p + 1) * d]);
            }

            let mut q = vec![0.0; len * d];
            let mut k = vec![0.0; len * d];
            let mut v = vec![0.0; len * d];
            for p in 0..len {
                let n1p = &n1[p * d..(p + 1) * d];
                matvec(self.block_w(b, WQ), n1p, &mut q[p * d..(p + 1) * d]);
                matvec(self.block_w(b, WK), n1p, &mut k[p * d..(p + 1) * d]);
                matvec(self.block_w(b, WV), n1p, &mut v[p * d..(p + 1) * d]);
            }

            let mut att = vec![0.0; heads * len * len];
            let mut ctx = vec![0.0; len * d];
            for h in 0..heads {
                let off = h * hd;
                for i in 0..len {
                    let qi = &q[i * d + off..i * d + off + hd];
                    let row = &mut att[h * len * len + i * len..h * len * len + i * len + i + 1];
                    let mut m = f64::NEG_INFINITY;
                    for (j, slot) in row.iter_mut().enumerate() {
                        let kj = &k[j * d + off..j * d + off + hd];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        *slot = s;
                        m = m.max(s);
                    }
                    let mut z = 0.0;
                    for slot in row.iter_mut() {
                        *slot = (*slot - m).exp();
                        z += *slot;
                    }
                    for slot in row.iter_mut() {
                        *slot /= z;
                    }
                    let ci = &mut ctx[i * d + off..i * d + off + hd];
                    for (j, &a) in row.iter().enumerate() {
                        let vj = &v[j * d + off..j * d + off + hd];
                        for (c, &vv) in ci.iter_mut().zip(vj) {
                            *c += a * vv;
                        }
                    }
                }
            }

            for p in 0..len {
                let mut attn_out = vec![0.0; d];
                matvec(self.block_w(b, WO), &ctx[p * d..(p + 1) * d], &mut attn_out);
                for j in 0..d {
                    x[p * d + j] += attn_out[j];
                }
            }
            let x_mid = x.clone();

            let mut ri2 = vec![0.0; len];
            let mut n2 = vec![0.0; len * d];
            for p in 0..len {
                ri2[p] = rmsnorm(&x_mid[p * d..(p + 1) * d], &mut n2[p * d..(p + 1) * d]);
            }
            let mut hpre = vec![0.0; len * hidden];
            let mut hact = vec![0.0; len * hidden];
            for p in 0..len {
                matvec(
                    self.block_w(b, FC1),
                    &n2[p * d..(p + 1) * d],
                    &mut hpre[p * hidden..(p + 1) * hidden],
                );
                for j in 0..hidden {
                    hact[p * hidden + j] = gelu(hpre[p * hidden + j]);
                }
                let mut mlp_out = vec![0.0; d];
                matvec(self.block_w(b, FC2), &hact[p * hidden..(p + 1) * hidden], &mut mlp_out);
                for j in 0..d {
                    x[p * d + j] += mlp_out[j];
                }
            }

            blocks.push(BlockTape {
                x_in,
                ri1,
                n1,
                q,
                k,
                v,
                att,
                ctx,
                x_mid,
                ri2,
                n2,
                hpre,
                hact,
            });
        }

        let xf = x;
        let mut rif = vec![0.0; len];
        let mut nf = vec![0.0; len * d];
        for p in 0..len {
            rif[p] = rmsnorm(&xf[p * d..(p + 1) * d], &mut nf[p * d..(p + 1) * d]);
        }
        Tape {
            len,
            blocks,
            xf,
            rif,
            nf,
        }
    }

    /// Full logits matrix (one row per input position).
    pub fn forward(&self, tokens: &[TokenId]) -> Logits {
        let tape = self.forward_core(tokens);
        let d = self.dims.d_model;
        let vocab = self.dims.vocab_size;
        let mut data = vec![0.0; tape.len * vocab];
        for p in 0..tape.len {
            matvec(
                self.head_w(),
                &tape.nf[p * d..(p + 1) * d],
                &mut data[p * vocab..(p + 1) * vocab],
            );
        }
        Logits {
            data,
            vocab_size: vocab,
        }
    }

    /// Logits for the next token only (last position row).
    pub fn next_token_logits(&self, tokens: &[TokenId]) -> Vec<f64> {
        let tape = self.forward_core(tokens);
        let d = self.dims.d_model;
        let p = tape.len - 1;
        let mut row = vec![0.0; self.dims.vocab_size];
        matvec(self.head_w(), &tape.nf[p * d..(p + 1) * d], &mut row);
        row
    }

    /// Weighted NLL; head rows are only evaluated at weighted positions.
    pub fn loss_only(&self, seq: &WeightedSeq) -> f64 {
        let tape = self.forward_core(&seq.tokens);
        self.weighted_rows(&tape, seq, None)
    }

    /// Record everything a head-only weight change needs to re-score this
    /// sequence without re-running the trunk: the final hidden state and the
    /// baseline logits row at every weighted position.
    pub fn cache_rows(&self, seq: &WeightedSeq) -> Vec<RowCache> {
        let tape = self.forward_core(&seq.tokens);
        let d = self.dims.d_model;
        let vocab = self.dims.vocab_size;
        let mut out = Vec::new();
        for (p, &w) in seq.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let nf = tape.nf[p * d..(p + 1) * d].to_vec();
            let mut logits = vec![0.0; vocab];
            matvec(self.head_w(), &nf, &mut logits);
            out.push(RowCache {
                weight: w,
                target: seq.tokens[p + 1],
                nf,
                logits,
            });
        }
        out
    }

    /// Weighted NLL plus gradient accumulation into `grads` (one buffer per
    /// tensor, in canonical order).
    pub fn loss_and_grad(&self, seq: &WeightedSeq, grads: &mut [Vec<f64>]) -> f64 {
        let tape = self.forward_core(&seq.tokens);
        let mut dl_rows: Vec<(usize, Vec<f64>)> = Vec::new();
        let loss = self.weighted_rows(&tape, seq, Some(&mut dl_rows));
        self.backward(&seq.tokens, &tape, &dl_rows, grads);
        loss
    }

    /// Shared loss computation. When `dl_out` is given, also records the
    /// per-row logit gradients `w * (softmax - onehot)`.
    fn weighted_rows(
        &self,
        tape: &Tape,
        seq: &WeightedSeq,
        mut dl_out: Option<&mut Vec<(usize, Vec<f64>)>>,
    ) -> f64 {
        let d = self.dims.d_model;
        let vocab = self.dims.vocab_size;
        let mut row = vec![0.0; vocab];
        let mut loss = 0.0;
        for (p, &w) in seq.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let target = seq.tokens[p + 1];
            matvec(self.head_w(), &tape.nf[p * d..(p + 1) * d], &mut row);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
            let lse = m + z.ln();
            loss += w * (lse - row[target]);
            if let Some(out) = dl_out.as_deref_mut() {
                let mut dl: Vec<f64> = row.iter().map(|&l| w * (l - lse).exp()).collect();
                dl[target] -= w;
                out.push((p, dl));
            }
        }
        loss
    }

    fn backward(
        &self,
        tokens: &[TokenId],
        tape: &Tape,
        dl_rows: &[(usize, Vec<f64>)],
        grads: &mut [Vec<f64>],
    ) {
        let d = self.dims.d_model;
        let heads = self.dims.n_heads;
        let hd = self.dims.head_dim();
        let hidden = self.dims.mlp_hidden;
        let len = tape.len;
        let scale = 1.0 / (hd as f64).sqrt();
        let head_id = BLOCK_BASE + self.dims.n_blocks * PER_BLOCK;

        // Output head and final norm.
        let mut dx = vec![0.0; len * d];
        {
            let mut dnf = vec![0.0; d];
            for (p, dl) in dl_rows {
                let nf_p = &tape.nf[p * d..(p + 1) * d];
                outer_accum(&mut grads[head_id], dl, nf_p);
                dnf.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_accum(self.head_w(), dl, &mut dnf);
                rmsnorm_bwd_accum(
                    &dnf,
                    &tape.xf[p * d..(p + 1) * d],
                    tape.rif[*p],
                    &mut dx[p * d..(p + 1) * d],
                );
            }
        }

        for b in (0..self.dims.n_blocks).rev() {
            let bt = &tape.blocks[b];
            let base = BLOCK_BASE + b * PER_BLOCK;

            // MLP: x = x_mid + W2·gelu(W1·rmsnorm(x_mid))
            let mut dh = vec![0.0; hidden];
            let mut dn2 = vec![0.0; d];
            for p in 0..len {
                let dy = dx[p * d..(p + 1) * d].to_vec();
                let hact_p = &bt.hact[p * hidden..(p + 1) * hidden];
                let hpre_p = &bt.hpre[p * hidden..(p + 1) * hidden];
                outer_accum(&mut grads[base + FC2], &dy, hact_p);
                dh.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_accum(self.block_w(b, FC2), &dy, &mut dh);
                for (g, &pre) in dh.iter_mut().zip(hpre_p) {
                    *g *= gelu_grad(pre);
                }
                let n2_p = &bt.n2[p * d..(p + 1) * d];
                outer_accum(&mut grads[base + FC1], &dh, n2_p);
                dn2.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_accum(self.block_w(b, FC1), &dh, &mut dn2);
                rmsnorm_bwd_accum(
                    &dn2,
                    &bt.x_mid[p * d..(p + 1) * d],
                    bt.ri2[p],
                    &mut dx[p * d..(p + 1) * d],
                );
            }

            // Attention: x_mid = x_in + Wo·ctx
            let mut dctx = vec![0.0; len * d];
            for p in 0..len {
                let dy = &dx[p * d..(p + 1) * d];
                outer_accum(&mut grads[base + WO], dy, &bt.ctx[p * d..(p + 1) * d]);
                matvec_t_accum(self.block_w(b, WO), dy, &mut dctx[p * d..(p + 1) * d]);
            }

            let mut dq = vec![0.0; len * d];
            let mut dk = vec![0.0; len * d];
            let mut dv = vec![0.0; len * d];
            let mut da = vec![0.0; len];
            for h in 0..heads {
                let off = h * hd;
                for i in 0..len {
                    let att_row = &bt.att[h * len * len + i * len..h * len * len + i * len + i + 1];
                    let dctx_i = &dctx[i * d + off..i * d + off + hd];
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vj = &bt.v[j * d + off..j * d + off + hd];
                        let daj: f64 = dctx_i.iter().zip(vj).map(|(a, b)| a * b).sum();
                        da[j] = daj;
                        dot += att_row[j] * daj;
                        let dvj = &mut dv[j * d + off..j * d + off + hd];
                        for (slot, &c) in dvj.iter_mut().zip(dctx_i) {
                            *slot += att_row[j] * c;
                        }
                    }
                    let qi = &bt.q[i * d + off..i * d + off + hd];
                    let dqi_acc = &mut dq[i * d + off..i * d + off + hd];
                    for j in 0..=i {
                        let ds = att_row[j] * (da[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &bt.k[j * d + off..j * d + off + hd];
                        for (slot, &kv) in dqi_acc.iter_mut().zip(kj) {
                            *slot += ds * kv;
                        }
                        let dkj = &mut dk[j * d + off..j * d + off + hd];
                        for (slot, &qv) in dkj.iter_mut().zip(qi) {
                            *slot += ds * qv;
                        }
                    }
                }
            }

            let mut dn1 = vec![0.0; d];
            for p in 0..len {
                let n1_p = &bt.n1[p * d..(p + 1) * d];
                outer_accum(&mut grads[base + WQ], &dq[p * d..(p + 1) * d], n1_p);
                outer_accum(&mut grads[base + WK], &dk[p * d..(p + 1) * d], n1_p);
                outer_accum(&mut grads[base + WV], &dv[p * d..(p + 1) * d], n1_p);
                dn1.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_accum(self.block_w(b, WQ), &dq[p * d..(p + 1) * d], &mut dn1);
                matvec_t_accum(self.block_w(b, WK), &dk[p * d..(p + 1) * d], &mut dn1);
                matvec_t_accum(self.block_w(b, WV), &dv[p * d..(p + 1) * d], &mut dn1);
                rmsnorm_bwd_accum(
                    &dn1,
                    &bt.x_in[p * d..(p + 1) * d],
                    bt.ri1[p],
                    &mut dx[p * d..(p + 1) * d],
                );
            }
        }

        for (p, &t) in tokens.iter().enumerate() {
            let dxp = &dx[p * d..(p + 1) * d];
            let tok_row = &mut grads[TOK][t * d..(t + 1) * d];
            for (slot, &g) in tok_row.iter_mut().zip(dxp) {
                *slot += g;
            }
            let pos_row = &mut grads[POS][p * d..(p + 1) * d];
            for (slot, &g) in pos_row.iter_mut().zip(dxp) {
                *slot += g;
            }
        }
    }
}
