//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ICLM"  version:u32  arch:u32  config_len:u32  config (TOML, UTF-8)
//! n_tensors:u32
//!   name_len:u32 name  ndim:u32 dims:u32*ndim  data:f32*prod(dims)
//! n_bn:u32
//!   features:u32 momentum:f64 eps:f64 running_mean:f64*f running_var:f64*f
//! ```
//!
//! The batch-norm mode flag is not stored; loaded models start in eval mode.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{Arch, MlpSet, MlpSetConfig, ModelError, ModelParams, ParamSet, Transformer, TransformerConfig};
use crate::autodiff::{BatchNormState, Tensor};

pub const MAGIC: &[u8; 4] = b"ICLM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("unknown architecture code {0}")]
    UnknownArch(u32),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongArch { expected: Arch, found: Arch },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("corrupt checkpoint at offset {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
    #[error("invalid config echo: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

pub fn encode(model: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.arch().code().to_le_bytes());
    let config = model.config_text();
    put_u32(&mut buf, config.len());
    buf.extend_from_slice(config.as_bytes());
    let params = model.params();
    put_u32(&mut buf, params.len());
    for (name, t) in params.iter() {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.ndim());
        for &dim in t.shape() {
            put_u32(&mut buf, dim);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bn = model.batchnorm();
    put_u32(&mut buf, bn.len());
    for s in bn {
        put_u32(&mut buf, s.features());
        buf.extend_from_slice(&s.momentum().to_le_bytes());
        buf.extend_from_slice(&s.eps().to_le_bytes());
        for v in s.running_mean().iter().chain(s.running_var()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated {
            offset: self.pos,
            needed: n,
            len: self.buf.len(),
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<String, CheckpointError> {
        let n = self.len()?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Corrupt {
            offset: at,
            detail: e.to_string(),
        })
    }
}

pub fn decode(buf: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let code = r.u32()?;
    let arch = Arch::from_code(code).ok_or(CheckpointError::UnknownArch(code))?;
    let config = r.text()?;

    let n_tensors = r.len()?;
    let mut params = ParamSet::default();
    for _ in 0..n_tensors {
        let name = r.text()?;
        let ndim = r.len()?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len()?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or(CheckpointError::Corrupt {
            offset: r.pos,
            detail: format!("tensor {name} shape {shape:?} overflows"),
        })?;
        let bytes = r.take(numel.saturating_mul(4))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(name, Tensor::from_vec(&shape, data));
    }

    let n_bn = r.len()?;
    let mut bn = Vec::with_capacity(n_bn.min(1024));
    for _ in 0..n_bn {
        let at = r.pos;
        let f = r.len()?;
        let momentum = r.f64()?;
        let eps = r.f64()?;
        let mut stats = Vec::with_capacity(2 * f.min(1 << 16));
        for _ in 0..2 * f {
            stats.push(r.f64()?);
        }
        let var = stats.split_off(f);
        let state = BatchNormState::from_parts(stats, var, momentum, eps).ok_or(CheckpointError::Corrupt {
            offset: at,
            detail: "invalid batch-norm statistics".into(),
        })?;
        bn.push(state);
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt {
            offset: r.pos,
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }

    let cfg_err = |e: toml::de::Error| CheckpointError::Config(e.to_string());
    Ok(match arch {
        Arch::MlpSet => {
            let cfg: MlpSetConfig = toml::from_str(&config).map_err(cfg_err)?;
            ModelParams::MlpSet(MlpSet::from_parts(cfg, params, bn)?)
        }
        Arch::Transformer => {
            let cfg: TransformerConfig = toml::from_str(&config).map_err(cfg_err)?;
            if !bn.is_empty() {
                return Err(CheckpointError::Corrupt {
                    offset: r.pos,
                    detail: "transformer checkpoints carry no batch-norm state".into(),
                });
            }
            ModelParams::Transformer(Transformer::from_parts(cfg, params)?)
        }
    })
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(model))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    decode(&fs::read(path)?)
}

/// Loads and rejects checkpoints of a different architecture.
pub fn load_checkpoint_as(path: &Path, expected: Arch) -> Result<ModelParams, CheckpointError> {
    let model = load_checkpoint(path)?;
    if model.arch() != expected {
        return Err(CheckpointError::WrongArch { expected, found: model.arch() });
    }
    Ok(model)
}
