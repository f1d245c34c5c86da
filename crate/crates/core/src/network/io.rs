//! Binary model file.
//!
//! Layout (all integers u32 little-endian, all reals f64 little-endian):
//! `"FBMT"`, version byte `0x01`, then `depth, base_channels, input_size,
//! num_classes, parameter_tensor_count`, then every parameter tensor as
//! `rank, extents..., values...`, then every batch-norm running mean and
//! running variance in the same per-tensor form, in declaration order.

use std::path::Path;

use super::{Blueprint, Model, UNetConfig};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};
use crate::util::write_atomic;

const MAGIC: &[u8; 4] = b"FBMT";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 5 * 4;

fn tensor_bytes(shape: &[usize]) -> usize {
    4 + 4 * shape.len() + 8 * shape.iter().product::<usize>()
}

/// Exact file size implied by a config.
pub(crate) fn expected_file_len(cfg: &UNetConfig) -> usize {
    let bp = Blueprint::new(cfg);
    let params: usize = bp.shapes.iter().map(|s| tensor_bytes(s)).sum();
    let stats: usize = bp.bn_channels.iter().map(|&c| 2 * tensor_bytes(&[c])).sum();
    HEADER_LEN + params + stats
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut out = Vec::with_capacity(expected_file_len(cfg));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [
            cfg.depth,
            cfg.base_channels,
            cfg.input_size,
            cfg.num_classes,
            self.params.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mut put = |shape: &[usize], data: &[f64]| {
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for t in &self.params {
            put(t.shape(), t.data());
        }
        for s in &self.stats {
            put(&[s.mean.len()], &s.mean);
            put(&[s.var.len()], &s.var);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(Error::VersionMismatch {
                found: bytes[4],
                expected: VERSION,
            });
        }
        let mut r = Reader { bytes, pos: 5 };
        let cfg = UNetConfig {
            depth: r.u32()? as usize,
            base_channels: r.u32()? as usize,
            input_size: r.u32()? as usize,
            num_classes: r.u32()? as usize,
        };
        let count = r.u32()? as usize;
        cfg.validate()
            .map_err(|e| Error::ModelFormat(format!("invalid config in header: {e}")))?;
        let expected = expected_file_len(&cfg);
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes after {expected}-byte model",
                bytes.len() - expected
            )));
        }
        let bp = Blueprint::new(&cfg);
        if count != bp.shapes.len() {
            return Err(Error::ModelFormat(format!(
                "header declares {count} parameter tensors, architecture has {}",
                bp.shapes.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for (shape, name) in bp.shapes.iter().zip(&bp.names) {
            params.push(r.tensor(shape, name)?);
        }
        let mut stats = Vec::with_capacity(bp.bn_channels.len());
        for &c in &bp.bn_channels {
            let mean = r.tensor(&[c], "running mean")?.into_data();
            let var = r.tensor(&[c], "running var")?.into_data();
            stats.push(RunningStats { mean, var });
        }
        let mut model = Model::assemble(cfg, bp, params);
        model.stats = stats;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self.bytes.get(self.pos..end).ok_or(Error::Truncated {
            expected: end,
            found: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(chunk.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn tensor(&mut self, shape: &[usize], name: &str) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank.min(8) {
            dims.push(self.u32()? as usize);
        }
        if dims != shape {
            return Err(Error::ModelFormat(format!(
                "{name}: stored shape {dims:?}, architecture expects {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(self.take()?));
        }
        Tensor::new(shape, data)
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model.to_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_bytes(&bytes)
}
