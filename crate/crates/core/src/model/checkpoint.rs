//! Little-endian binary checkpoint format.
//!
//! Layout:
//!   magic                    8 bytes  "BSTEERM1"
//!   format kind              u8       0 = BF16, 1 = INT8
//!   vocab_size, context_length, d_model, n_heads, n_blocks, mlp_hidden,
//!   head_layer_id, tensor_count      u32 each
//!   vocab entries            u16 len + utf8 bytes, vocab_size times
//!   per tensor:
//!     name                   u16 len + utf8 bytes
//!     ndim                   u8, then u32 per dim
//!     scale                  f32 (INT8 only)
//!     count                  u64
//!     patterns               count * u16 (BF16) or count * u8 (INT8)

use std::path::Path;

use crate::bitcodec::{QuantFormat, QuantKind};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{tensor_specs, LayerTensor, ModelDims, ToyModel};

const MAGIC: &[u8; 8] = b"BSTEERM1";

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u16(out, s.len() as u16);
    out.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(match model.kind {
        QuantKind::Bf16 => 0,
        QuantKind::Int8 => 1,
    });
    let d = &model.dims;
    for v in [
        d.vocab_size,
        d.context_length,
        d.d_model,
        d.n_heads,
        d.n_blocks,
        d.mlp_hidden,
        model.head_layer_id,
        model.tensors.len(),
    ] {
        put_u32(&mut out, v as u32);
    }
    for token in model.vocab.tokens() {
        put_str(&mut out, token);
    }
    for tensor in &model.tensors {
        put_str(&mut out, &tensor.name);
        out.push(tensor.shape.len() as u8);
        for &dim in &tensor.shape {
            put_u32(&mut out, dim as u32);
        }
        if let QuantFormat::Int8 { scale } = tensor.format {
            out.extend_from_slice(&scale.to_le_bytes());
        }
        out.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        match model.kind {
            QuantKind::Bf16 => {
                for &p in tensor.patterns() {
                    put_u16(&mut out, p);
                }
            }
            QuantKind::Int8 => {
                for &p in tensor.patterns() {
                    out.push(p as u8);
                }
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointFormat("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::CheckpointFormat("non-utf8 string".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let kind = match r.u8()? {
        0 => QuantKind::Bf16,
        1 => QuantKind::Int8,
        k => return Err(Error::CheckpointFormat(format!("unknown format kind {k}"))),
    };
    let dims = ModelDims {
        vocab_size: r.u32()? as usize,
        context_length: r.u32()? as usize,
        d_model: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        n_blocks: r.u32()? as usize,
        mlp_hidden: r.u32()? as usize,
    };
    let head_layer_id = r.u32()? as usize;
    let tensor_count = r.u32()? as usize;

    let mut tokens = Vec::with_capacity(dims.vocab_size);
    for _ in 0..dims.vocab_size {
        tokens.push(r.string()?);
    }
    let vocab = Vocab::from_tokens(tokens)?;

    let specs = tensor_specs(&dims);
    if specs.len() != tensor_count || head_layer_id != tensor_count - 1 {
        return Err(Error::CheckpointFormat(format!(
            "tensor count {tensor_count} / head id {head_layer_id} do not match architecture"
        )));
    }

    let mut tensors = Vec::with_capacity(tensor_count);
    for (layer_id, (want_name, want_shape)) in specs.into_iter().enumerate() {
        let name = r.string()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if name != want_name || shape != want_shape {
            return Err(Error::CheckpointFormat(format!(
                "tensor {layer_id}: got {name} {shape:?}, expected {want_name} {want_shape:?}"
            )));
        }
        let format = match kind {
            QuantKind::Bf16 => QuantFormat::Bf16,
            QuantKind::Int8 => {
                let scale = r.f32()?;
                let format = QuantFormat::Int8 { scale };
                if !format.is_valid() {
                    return Err(Error::CheckpointFormat(format!(
                        "tensor {name}: invalid scale {scale}"
                    )));
                }
                format
            }
        };
        let count = r.u64()? as usize;
        if count != shape.iter().product::<usize>() {
            return Err(Error::CheckpointFormat(format!(
                "tensor {name}: count {count} does not match shape {shape:?}"
            )));
        }
        let patterns: Vec<u16> = match kind {
            QuantKind::Bf16 => {
                let bytes = r.take(count * 2)?;
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect()
            }
            QuantKind::Int8 => r.take(count)?.iter().map(|&b| b as u16).collect(),
        };
        tensors.push(LayerTensor::from_patterns(layer_id, name, shape, format, patterns));
    }
    if r.pos != buf.len() {
        return Err(Error::CheckpointFormat("trailing bytes".into()));
    }
    Ok(ToyModel::new(dims, kind, tensors, vocab))
}

/// The checkpoint's linear weight image: every tensor's patterns
/// concatenated in layer order, little-endian within each weight. This is
/// the byte layout the DRAM placement simulator maps onto pages.
pub fn memory_image(model: &ToyModel) -> Vec<u8> {
    let mut out = Vec::new();
    for tensor in &model.tensors {
        match model.kind {
            QuantKind::Bf16 => {
                for &p in tensor.patterns() {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
            QuantKind::Int8 => {
                for &p in tensor.patterns() {
                    out.push(p as u8);
                }
            }
        }
    }
    out
}

/// Byte offset of a tensor's patterns within the memory image.
pub fn tensor_image_offset(model: &ToyModel, layer_id: usize) -> usize {
    let bytes_per = match model.kind {
        QuantKind::Bf16 => 2,
        QuantKind::Int8 => 1,
    };
    model.tensors[..layer_id].iter().map(|t| t.len() * bytes_per).sum()
}
