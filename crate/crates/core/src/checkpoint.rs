//! Flat little-endian binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes   "PRIVCLM\x01"
//! vocab        u64
//! d_emb        u64
//! n_ctx        u64
//! d_hidden     u64
//! seed         u64
//! task_id      u32       last task trained
//! has_adapter  u8        0 or 1
//! rank         u64       only if has_adapter
//! adapter_task u32       only if has_adapter
//! parameters   f64 ...   embedding, hidden_weight, hidden_bias,
//!                        output_weight, output_bias, [lora_a, lora_b]
//! ```
//!
//! Every f64 is stored by its bit pattern so loading reproduces the model exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LoraAdapter, ModelDims, TinyLm};

pub const MAGIC: &[u8; 8] = b"PRIVCLM\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TinyLm,
    pub adapter: Option<LoraAdapter>,
    pub task_id: u32,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [m.dims.vocab, m.dims.d_emb, m.dims.n_ctx, m.dims.d_hidden] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&m.seed.to_le_bytes());
        out.extend_from_slice(&self.task_id.to_le_bytes());
        out.push(u8::from(self.adapter.is_some()));
        if let Some(ad) = &self.adapter {
            out.extend_from_slice(&(ad.rank() as u64).to_le_bytes());
            out.extend_from_slice(&ad.task_id.to_le_bytes());
        }
        let mut put = |xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        };
        put(m.embedding.as_slice());
        put(m.hidden_weight.as_slice());
        put(&m.hidden_bias);
        put(m.output_weight.as_slice());
        put(&m.output_bias);
        if let Some(ad) = &self.adapter {
            put(ad.a.as_slice());
            put(ad.b.as_slice());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let dims = ModelDims {
            vocab: r.u64()? as usize,
            d_emb: r.u64()? as usize,
            n_ctx: r.u64()? as usize,
            d_hidden: r.u64()? as usize,
        };
        dims.validate()?;
        let seed = r.u64()?;
        let task_id = r.u32()?;
        let adapter_meta = match r.take(1)?[0] {
            0 => None,
            1 => Some((r.u64()? as usize, r.u32()?)),
            other => return Err(Error::Data(format!("bad adapter flag {other}"))),
        };
        let d_in = dims.input_dim();
        let model = TinyLm {
            dims,
            seed,
            embedding: Matrix::from_vec(dims.vocab, dims.d_emb, r.f64s(dims.vocab * dims.d_emb)?)?,
            hidden_weight: Matrix::from_vec(dims.d_hidden, d_in, r.f64s(dims.d_hidden * d_in)?)?,
            hidden_bias: r.f64s(dims.d_hidden)?,
            output_weight: Matrix::from_vec(dims.vocab, dims.d_hidden, r.f64s(dims.vocab * dims.d_hidden)?)?,
            output_bias: r.f64s(dims.vocab)?,
        };
        let adapter = match adapter_meta {
            None => None,
            Some((rank, ad_task)) => {
                let a = Matrix::from_vec(rank, d_in, r.f64s(rank * d_in)?)?;
                let b = Matrix::from_vec(dims.d_hidden, rank, r.f64s(dims.d_hidden * rank)?)?;
                Some(LoraAdapter::from_parts(ad_task, a, b)?)
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model,
            adapter,
            task_id,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("checkpoint too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}
