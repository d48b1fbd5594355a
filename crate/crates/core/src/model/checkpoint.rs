//! Binary checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      8 bytes   "VITRCKPT"
//! version    u32       FORMAT_VERSION
//! kind       u8        0 = generator, 1 = discriminator
//! cfg_len    u32       byte length of the config
//! config     cfg_len   ModelConfig as compact JSON (UTF-8)
//! n_params   u32
//! n_params × {
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims u64 × ndim
//!   data     f64 × product(dims)
//! }
//! ```
//!
//! Parameters appear in the model's visiting order. Trailing bytes are rejected.

use std::path::Path;

use super::{DiscriminatorModel, GeneratorModel, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{Parameters, ParametersExt};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VITRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    fn from_params(kind: ModelKind, config: &ModelConfig, named: Vec<(String, Tensor)>) -> Self {
        Self {
            kind,
            config: config.clone(),
            params: named
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.kind {
            ModelKind::Generator => 0,
            ModelKind::Discriminator => 1,
        });
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kind = match r.take(1, "kind")?[0] {
            0 => ModelKind::Generator,
            1 => ModelKind::Discriminator,
            k => return Err(Error::Format(format!("unknown model kind {k}"))),
        };
        let cfg_len = r.u32("config length")? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
            .map_err(|e| Error::Format(format!("bad config: {e}")))?;
        let n = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len()))
                .ok_or_else(|| Error::Format(format!("implausible shape {shape:?} for {name}")))?;
            let bytes = r.take(numel * 8, &name)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(NamedArray { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last parameter",
                buf.len() - r.pos
            )));
        }
        Ok(Self { kind, config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Installs the stored arrays into `model`, checking names and shapes.
    fn restore<M: Parameters + Clone>(&self, mut model: M) -> Result<M> {
        let mut slots = Vec::new();
        model.visit_mut("", &mut slots);
        if slots.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                slots.len()
            )));
        }
        for ((name, slot), stored) in slots.into_iter().zip(&self.params) {
            if name != stored.name || slot.shape() != stored.shape.as_slice() {
                return Err(Error::Format(format!(
                    "expected {name} {:?}, found {} {:?}",
                    slot.shape(),
                    stored.name,
                    stored.shape
                )));
            }
            *slot = Tensor::parameter(stored.data.clone(), &stored.shape)?;
        }
        Ok(model)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("checkpoint holds a {:?}, not a {kind:?}", self.kind)));
        }
        Ok(())
    }
}

impl GeneratorModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(ModelKind::Generator, &self.config, self.named_params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Generator)?;
        ck.restore(GeneratorModel::new(&ck.config)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl DiscriminatorModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(ModelKind::Discriminator, &self.config, self.named_params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Discriminator)?;
        ck.restore(DiscriminatorModel::new(&ck.config)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
