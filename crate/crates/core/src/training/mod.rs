//! Unpaired training: data pipeline, optimizer, step and resumable loop.

pub mod data;
pub mod optim;
pub mod run;
pub mod step;

use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perceptual::LossConfig;

pub use data::{augment, resize_bilinear, sample_pair, ImagePool, ImageSize};
pub use optim::{adam_update, cosine_lr, Adam, AdamConfig};
pub use run::{train_loop, Pools, RunOptions, TrainOutcome};
pub use step::{objective, train_step, zero_gradient_params, GradMode, Objective, StepOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small crops and a short schedule that finish on one CPU core.
    Desk,
    /// Full-length schedule at 256×256 crops.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Schedule length; the learning rate reaches zero here.
    pub iterations: u64,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub resize: ImageSize,
    pub crop: ImageSize,
    /// Write a resumable checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    /// Append a log record every this many iterations; 0 disables.
    pub log_every: u64,
    /// Write a sample translation every this many iterations; 0 disables.
    pub sample_every: u64,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => TrainConfig {
                iterations: 1000,
                batch_size: 1,
                lr: 1e-5,
                loss: LossConfig::default(),
                seed: 0,
                resize: ImageSize::square(64),
                crop: ImageSize::square(64),
                checkpoint_every: 500,
                log_every: 1,
                sample_every: 250,
            },
            Profile::Paper => TrainConfig {
                iterations: 300_000,
                batch_size: 1,
                lr: 1e-5,
                loss: LossConfig::default(),
                seed: 0,
                resize: ImageSize::new(512, 256),
                crop: ImageSize::square(256),
                checkpoint_every: 10_000,
                log_every: 100,
                sample_every: 5_000,
            },
        }
    }

    pub fn desk() -> Self {
        Self::profile(Profile::Desk)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::config(format!(
                "only batch size 1 is supported, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.loss.validate()?;
        for (what, s) in [("resize", self.resize), ("crop", self.crop)] {
            if s.width == 0 || s.height == 0 {
                return Err(Error::config(format!("{what} dimensions must be positive, got {s}")));
            }
        }
        if self.crop.width > self.resize.width || self.crop.height > self.resize.height {
            return Err(Error::config(format!(
                "crop {} is larger than resize {}",
                self.crop, self.resize
            )));
        }
        Ok(())
    }
}

/// One logged training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Number of completed steps, starting at 1.
    pub iteration: u64,
    /// Learning rate used by this step.
    pub lr: f64,
    pub loss: f64,
    pub content: f64,
    pub style: f64,
    /// Wall time of the step in milliseconds.
    pub wall_ms: f64,
}

impl LogRecord {
    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &LogRecord) -> bool {
        self.iteration == other.iteration
            && self.lr.to_bits() == other.lr.to_bits()
            && self.loss.to_bits() == other.loss.to_bits()
            && self.content.to_bits() == other.content.to_bits()
            && self.style.to_bits() == other.style.to_bits()
    }
}

/// Append-only training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    records: Vec<LogRecord>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.iteration <= last.iteration {
                return Err(Error::contract(format!(
                    "log iteration {} does not follow {}",
                    r.iteration, last.iteration
                )));
            }
        }
        if ![r.lr, r.loss, r.content, r.style].iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(format!("log record {}", r.iteration)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Trailing moving averages of the total loss; entry `i` averages
    /// records `i + 1 - window ..= i`.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        assert!(window > 0);
        self.records
            .windows(window)
            .map(|w| w.iter().map(|r| r.loss).sum::<f64>() / window as f64)
            .collect()
    }

    pub fn append_jsonl(path: impl AsRef<Path>, r: &LogRecord) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let line = serde_json::to_string(r).expect("log records serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log = RunLog::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: LogRecord = serde_json::from_str(&line)
                .map_err(|e| Error::config(format!("{} line {}: {e}", path.display(), i + 1)))?;
            log.push(r)?;
        }
        Ok(log)
    }
}
