//! `FMDL` model checkpoints.
//!
//! All integers little-endian:
//!
//! ```text
//! "FMDL" | u32 version | u8 arch tag | u32 n_dims | n_dims x u32 input dim
//!        | f64 dropout | u32 projection dim | u32 n_params
//!        | n_params x ( u32 name len | name utf-8 | u32 rank | rank x u32 extent
//!                     | prod(extent) x f64 )
//! ```

use std::path::Path;

use super::{Architecture, ModelConfig, ModelGraph, Parameter};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMDL";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelGraph {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(cfg.arch.tag());
        put_u32(&mut out, cfg.input_dims.len());
        for &d in &cfg.input_dims {
            put_u32(&mut out, d);
        }
        out.extend_from_slice(&cfg.dropout.to_le_bytes());
        put_u32(&mut out, cfg.projection_dim);
        put_u32(&mut out, self.parameters().len());
        for p in self.parameters() {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.rank());
            for &e in p.value.shape() {
                put_u32(&mut out, e);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes, Path::new("<memory>"))
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic, expected FMDL"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let tag = r.take(1)?[0];
        let arch = Architecture::from_tag(tag)
            .ok_or_else(|| Error::format(path, format!("unknown architecture tag {tag}")))?;
        let n_dims = r.u32()? as usize;
        if n_dims > 2 {
            return Err(Error::format(path, format!("{n_dims} input dims")));
        }
        let input_dims = (0..n_dims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let dropout = r.f64()?;
        let projection_dim = r.u32()? as usize;
        let config = ModelConfig {
            arch,
            input_dims,
            dropout,
            projection_dim,
        };
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params.min(1024));
        for _ in 0..n_params {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(path, "parameter name is not utf-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
            let numel = numel
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::format(path, format!("parameter {name} overruns file")))?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let value = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
            params.push(Parameter { name, value });
        }
        if r.remaining() != 0 {
            return Err(Error::format(path, format!("{} trailing bytes", r.remaining())));
        }
        ModelGraph::from_parameters(config, params).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn write_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelGraph::decode(&bytes, path)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
