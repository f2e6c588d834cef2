//! On-disk container for named `f32` arrays.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        5 bytes   "HFLOW"
//! version      u32       = 1
//! kind         u32 len + UTF-8   "model" | "vgg19"
//! -- kind = "model" only: config header --
//! variant      u32 len + UTF-8
//! image chans  u32
//! blocks       u32 count, then count × u32 expansion rates
//! style widths u32 count, then count × u32 widths
//! -- all kinds --
//! records      u32 count, then per record:
//!                u32 name len, name (UTF-8), u32 rank, rank × u32 dims,
//!                prod(dims) × f32 payload
//! train state  u8 flag (0 absent, 1 present); when present:
//!                u64 iteration, u64 optimizer step, u64 rng seed,
//!                u128 rng word position, u32 moment record count and the
//!                records themselves (names "adam.m.<param>", "adam.v.<param>")
//! ```
//!
//! Nothing may follow the train-state section.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::ModelConfig;
use crate::nets::{shape_tree, Params};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"HFLOW";
pub const VERSION: u32 = 1;

pub const KIND_MODEL: &str = "model";
pub const KIND_VGG19: &str = "vgg19";

/// Optimizer and data-pipeline state needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed training steps.
    pub iteration: u64,
    pub adam_step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub moments: Vec<(String, Tensor<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: Option<ModelConfig>,
    pub records: Vec<(String, Tensor<f32>)>,
    pub train_state: Option<TrainState>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn record(&mut self, name: &str, t: &Tensor<f32>) {
        self.str(name);
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u32(d);
        }
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::checkpoint(
                field,
                format!("truncated: needs {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u128(&mut self, field: &str) -> Result<u128> {
        let b = self.take(16, field)?;
        Ok(u128::from_le_bytes(b.try_into().unwrap()))
    }

    fn str(&mut self, field: &str) -> Result<String> {
        let len = self.u32(field)?;
        let bytes = self.take(len, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::checkpoint(field, "not valid UTF-8"))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.str("record name")?;
        let field = format!("record {name}");
        let rank = self.u32(&field)?;
        if rank > 8 {
            return Err(Error::checkpoint(field, format!("implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32(&field)).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::checkpoint(&field, "dims overflow"))?;
        let bytes = self.take(len.checked_mul(4).ok_or_else(|| Error::checkpoint(&field, "dims overflow"))?, &field)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::from_parts(dims, data)))
    }
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.str(&self.kind);
        if self.kind == KIND_MODEL {
            let config = self.config.as_ref().expect("model containers carry a config");
            w.str(&config.variant);
            w.u32(config.image_channels);
            w.u32(config.blocks.len());
            for b in &config.blocks {
                w.u32(b.expansion);
            }
            w.u32(config.style_widths.len());
            for &s in &config.style_widths {
                w.u32(s);
            }
        }
        w.u32(self.records.len());
        for (name, t) in &self.records {
            w.record(name, t);
        }
        match &self.train_state {
            None => w.buf.push(0),
            Some(state) => {
                w.buf.push(1);
                w.buf.extend_from_slice(&state.iteration.to_le_bytes());
                w.buf.extend_from_slice(&state.adam_step.to_le_bytes());
                w.buf.extend_from_slice(&state.rng_seed.to_le_bytes());
                w.buf.extend_from_slice(&state.rng_word_pos.to_le_bytes());
                w.u32(state.moments.len());
                for (name, t) in &state.moments {
                    w.record(name, t);
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(5, "magic")? != MAGIC {
            return Err(Error::checkpoint("magic", "not an HFLOW file"));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::checkpoint(
                "version",
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let kind = r.str("kind")?;
        let config = match kind.as_str() {
            KIND_MODEL => {
                let variant = r.str("variant")?;
                let image_channels = r.u32("image channels")?;
                let n_blocks = r.u32("block count")?;
                if n_blocks > 64 {
                    return Err(Error::checkpoint("block count", format!("implausible {n_blocks}")));
                }
                let expansions = (0..n_blocks)
                    .map(|_| r.u32("expansion rate"))
                    .collect::<Result<Vec<_>>>()?;
                let n_widths = r.u32("style width count")?;
                if n_widths > 64 {
                    return Err(Error::checkpoint("style width count", format!("implausible {n_widths}")));
                }
                let widths = (0..n_widths)
                    .map(|_| r.u32("style width"))
                    .collect::<Result<Vec<_>>>()?;
                let config = ModelConfig::from_expansions(&variant, image_channels, &expansions, &widths)
                    .map_err(|e| Error::checkpoint("config", e.to_string()))?;
                Some(config)
            }
            KIND_VGG19 => None,
            other => return Err(Error::checkpoint("kind", format!("unknown kind {other:?}"))),
        };
        let n_records = r.u32("record count")?;
        let records = (0..n_records).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
        let train_state = match r.u8("train state flag")? {
            0 => None,
            1 => {
                let iteration = r.u64("train state iteration")?;
                let adam_step = r.u64("train state optimizer step")?;
                let rng_seed = r.u64("train state rng seed")?;
                let rng_word_pos = r.u128("train state rng position")?;
                let n = r.u32("moment count")?;
                let moments = (0..n).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
                Some(TrainState {
                    iteration,
                    adam_step,
                    rng_seed,
                    rng_word_pos,
                    moments,
                })
            }
            other => {
                return Err(Error::checkpoint("train state flag", format!("invalid value {other}")))
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::checkpoint(
                "trailer",
                format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Container {
            kind,
            config,
            records,
            train_state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// A model checkpoint: config, parameters and optional training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: Params<f32>) -> Self {
        Checkpoint {
            config,
            params,
            train_state: None,
        }
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: KIND_MODEL.to_string(),
            config: Some(self.config.clone()),
            records: self
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            train_state: self.train_state.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != KIND_MODEL {
            return Err(Error::checkpoint("kind", format!("expected a model file, found {:?}", c.kind)));
        }
        let config = c.config.expect("model containers carry a config");
        let mut by_name: std::collections::HashMap<String, Tensor<f32>> = std::collections::HashMap::new();
        for (name, t) in c.records {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::checkpoint("records", format!("duplicate record {name}")));
            }
        }
        let mut missing = Vec::new();
        let mut wrong = Vec::new();
        let params = shape_tree(&config).map(|name, shape| match by_name.remove(name) {
            Some(t) if t.shape() == shape.as_slice() => t,
            Some(t) => {
                wrong.push(format!("{name} has shape {:?}, expected {shape:?}", t.shape()));
                Tensor::zeros(shape.clone())
            }
            None => {
                missing.push(name.to_string());
                Tensor::zeros(shape.clone())
            }
        });
        if !missing.is_empty() || !wrong.is_empty() || !by_name.is_empty() {
            let mut extra: Vec<_> = by_name.into_keys().collect();
            extra.sort();
            return Err(Error::checkpoint(
                "records",
                format!(
                    "registry mismatch for {}: missing [{}], unexpected [{}], bad shapes [{}]",
                    config.variant,
                    missing.join(", "),
                    extra.join(", "),
                    wrong.join("; ")
                ),
            ));
        }
        Ok(Checkpoint {
            config,
            params,
            train_state: c.train_state,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Loads a checkpoint and requires it to match `expected` exactly.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            return Err(Error::checkpoint(
                "config",
                format!(
                    "checkpoint holds {} {:?}, expected {} {:?}",
                    ck.config.variant,
                    ck.config.expansions(),
                    expected.variant,
                    expected.expansions()
                ),
            ));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(config: &ModelConfig, params: &Params<f32>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(config.clone(), params.clone()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
