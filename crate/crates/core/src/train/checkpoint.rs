//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"MHMTLCK\0"
//! u32    format version
//! u32    entry count
//! entry* u32 name length, name bytes, u32 rank, u32 extents[rank], f32 values
//! section* u64 byte length, payload: optimizer, scheduler, rng, progress, config
//! ```
//!
//! The config section holds the JSON model config followed by its SHA-256
//! digest; loading into a model whose config digest differs is refused.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::optim::AdamWState;
use super::schedule::LrSchedule;
use crate::model::{Model, ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"MHMTLCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config digest mismatch: checkpoint has {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Everything needed to rebuild a model and resume its training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    pub optimizer: AdamWState,
    pub schedule: LrSchedule,
    /// Optimization steps completed.
    pub step: u64,
    /// Base seed from which per-step generators are derived.
    pub seed: u64,
    /// Lowest selection score seen so far, if any.
    pub best_score: Option<f64>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn section(&mut self, f: impl FnOnce(&mut Writer)) {
        let mut inner = Writer::default();
        f(&mut inner);
        self.bytes(&inner.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn bytes(&mut self, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let n = self.u64(what)?;
        self.take(usize::try_from(n).map_err(|_| CheckpointError::Truncated(what))?, what)
    }
    fn section(&mut self, what: &'static str) -> Result<Reader<'a>, CheckpointError> {
        Ok(Reader { buf: self.bytes(what)? })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.u32(p.name.len() as u32);
            w.0.extend_from_slice(p.name.as_bytes());
            w.u32(p.shape.len() as u32);
            p.shape.iter().for_each(|&e| w.u32(e as u32));
            w.f32s(&p.data);
        }
        w.section(|s| {
            s.u32(self.optimizer.steps.len() as u32);
            for ((m, v), &steps) in self.optimizer.m.iter().zip(&self.optimizer.v).zip(&self.optimizer.steps) {
                s.u64(steps);
                s.u64(m.len() as u64);
                s.f32s(m);
                s.f32s(v);
            }
        });
        w.section(|s| {
            s.u64(self.step);
            s.u64(self.schedule.total_steps);
            s.f64(self.schedule.backbone_lr);
            s.f64(self.schedule.head_lr);
            s.f64(self.schedule.min_lr);
        });
        w.section(|s| {
            s.u64(self.seed);
            s.u64(self.step);
        });
        w.section(|s| match self.best_score {
            Some(v) => {
                s.u32(1);
                s.f64(v);
            }
            None => s.u32(0),
        });
        w.section(|s| {
            let json = serde_json::to_vec(&self.config).expect("config serializes");
            s.bytes(&json);
            s.bytes(hex::encode(Sha256::digest(&json)).as_bytes());
        });
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes };
        if r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::Magic)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32("entry count")? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let data = r.f32s(numel.ok_or(CheckpointError::Truncated("values"))?, "values")?;
            params.push(NamedTensor { name, shape, data });
        }

        let mut s = r.section("optimizer section")?;
        let n = s.u32("optimizer count")? as usize;
        let mut optimizer = AdamWState {
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
        };
        for _ in 0..n {
            optimizer.steps.push(s.u64("optimizer steps")?);
            let len = s.u64("moment length")? as usize;
            optimizer.m.push(s.f32s(len, "first moment")?);
            optimizer.v.push(s.f32s(len, "second moment")?);
        }

        let mut s = r.section("scheduler section")?;
        let step = s.u64("scheduler step")?;
        let schedule = LrSchedule {
            total_steps: s.u64("total steps")?,
            backbone_lr: s.f64("backbone lr")?,
            head_lr: s.f64("head lr")?,
            min_lr: s.f64("min lr")?,
        };

        let mut s = r.section("rng section")?;
        let seed = s.u64("seed")?;
        if s.u64("rng position")? != step {
            return Err(CheckpointError::Corrupt("rng position disagrees with scheduler step".into()));
        }

        let mut s = r.section("progress section")?;
        let best_score = match s.u32("best flag")? {
            0 => None,
            _ => Some(s.f64("best score")?),
        };

        let mut s = r.section("config section")?;
        let json = s.bytes("config")?;
        let digest = String::from_utf8_lossy(s.bytes("config digest")?).into_owned();
        let actual = hex::encode(Sha256::digest(json));
        if actual != digest {
            return Err(CheckpointError::Corrupt(format!(
                "stored config digest {digest} does not match its contents ({actual})"
            )));
        }
        let config: ModelConfig =
            serde_json::from_slice(json).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;

        Ok(Self {
            config,
            params,
            optimizer,
            schedule,
            step,
            seed,
            best_score,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        // Write-then-rename so a crash never leaves a half-written file in place.
        let tmp = path.with_extension("tmp");
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| CheckpointError::Io { path: p, source }
        };
        fs::write(&tmp, self.to_bytes()).map_err(io(&tmp))?;
        fs::rename(&tmp, path).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }

    /// Refuses checkpoints written for a different architecture.
    pub fn verify(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        let (found, expected) = (self.digest(), expected.digest());
        if found != expected {
            return Err(CheckpointError::DigestMismatch { expected, found });
        }
        Ok(())
    }

    /// Copies the stored parameters into `model`, matching by name.
    pub fn restore_params(&self, model: &mut Model<f32>) -> Result<(), CheckpointError> {
        self.verify(model.config())?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} stored parameters for a model with {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .id(&p.name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unknown parameter `{}`", p.name)))?;
            let t = store.get_mut(id);
            if t.shape() != p.shape.as_slice() {
                return Err(CheckpointError::Corrupt(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&p.data);
        }
        Ok(())
    }

    /// Builds a fresh model from the stored config and parameters.
    pub fn build_model(&self) -> Result<Model<f32>, CheckpointError> {
        let mut model = Model::new(self.config.clone())?;
        self.restore_params(&mut model)?;
        Ok(model)
    }

    pub fn params_of(model: &Model<f32>) -> Vec<NamedTensor> {
        model
            .params()
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }
}
