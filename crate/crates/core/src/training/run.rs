//! The resumable training loop and its run-directory artifacts.
//!
//! Run directory layout:
//!
//! ```text
//! log.jsonl                      one LogRecord per logged iteration
//! checkpoints/iter_000500.hflow  resumable checkpoints
//! samples/iter_000250.png        translations of the first source/target pair
//! final.hflow                    written when the schedule completes
//! ```

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::ModelConfig;
use crate::io::save_png;
use crate::nets::checkpoint::{Checkpoint, TrainState};
use crate::nets::{init_params, style_min_side, Params};
use crate::perceptual::{channel_norm, extract_features, TapStats, LossTargets, Vgg19, CONTENT_TAP, STYLE_TAPS};
use crate::pipeline::{translate, TranslateOptions};
use crate::tensor::FeatureMap;
use crate::training::data::{crop, crop_origin, resize_bilinear, sample_pair, ImagePool};
use crate::training::optim::{cosine_lr, Adam};
use crate::training::step::train_step;
use crate::training::{LogRecord, RunLog, TrainConfig};

pub struct Pools {
    pub source: ImagePool,
    pub target: ImagePool,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Where logs, checkpoints and samples go; nothing is written when unset.
    pub run_dir: Option<PathBuf>,
    /// Continue from a checkpoint that carries training state.
    pub resume: Option<Checkpoint>,
    /// Stop once this many iterations are complete, leaving a resumable
    /// checkpoint, instead of running the whole schedule.
    pub stop_after: Option<u64>,
    /// Called after every logged iteration.
    pub progress: Option<Box<dyn FnMut(&LogRecord) + 'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final parameters with the training state needed to continue.
    pub checkpoint: Checkpoint,
    /// Records produced by this invocation.
    pub log: RunLog,
    /// Parameters that received an all-zero gradient on the first step.
    pub zero_grad_at_start: Vec<String>,
}

fn checkpoint_name(iteration: u64) -> String {
    format!("iter_{iteration:06}.hflow")
}

/// Caches augmented images and their loss targets when augmentation is a
/// pure resize and therefore the same for every draw.
struct Prepared<'a> {
    cfg: &'a TrainConfig,
    vgg: &'a Vgg19<f32>,
    fixed: bool,
    sources: HashMap<usize, (FeatureMap<f32>, FeatureMap<f32>)>,
    targets: HashMap<usize, (FeatureMap<f32>, Vec<TapStats>)>,
}

impl<'a> Prepared<'a> {
    fn new(cfg: &'a TrainConfig, vgg: &'a Vgg19<f32>) -> Self {
        Prepared {
            cfg,
            vgg,
            fixed: cfg.resize == cfg.crop,
            sources: HashMap::new(),
            targets: HashMap::new(),
        }
    }

    fn augment(&self, img: &FeatureMap<f32>, rng: &mut ChaCha8Rng) -> Result<FeatureMap<f32>> {
        let origin = crop_origin(self.cfg.resize, self.cfg.crop, rng)?;
        crop(&resize_bilinear(img, self.cfg.resize), origin, self.cfg.crop)
    }

    fn source(&mut self, pool: &ImagePool, i: usize, rng: &mut ChaCha8Rng) -> Result<(FeatureMap<f32>, FeatureMap<f32>)> {
        if self.fixed {
            crop_origin(self.cfg.resize, self.cfg.crop, rng)?;
            if let Some(hit) = self.sources.get(&i) {
                return Ok(hit.clone());
            }
        }
        let img = if self.fixed {
            resize_bilinear(&pool.images[i], self.cfg.resize)
        } else {
            self.augment(&pool.images[i], rng)?
        };
        let content = channel_norm(&extract_features(&img, self.vgg)?.maps[CONTENT_TAP]);
        if self.fixed {
            self.sources.insert(i, (img.clone(), content.clone()));
        }
        Ok((img, content))
    }

    fn target(&mut self, pool: &ImagePool, i: usize, rng: &mut ChaCha8Rng) -> Result<(FeatureMap<f32>, Vec<TapStats>)> {
        if self.fixed {
            crop_origin(self.cfg.resize, self.cfg.crop, rng)?;
            if let Some(hit) = self.targets.get(&i) {
                return Ok(hit.clone());
            }
        }
        let img = if self.fixed {
            resize_bilinear(&pool.images[i], self.cfg.resize)
        } else {
            self.augment(&pool.images[i], rng)?
        };
        let taps = extract_features(&img, self.vgg)?;
        let stats: Vec<TapStats> = taps.maps[..STYLE_TAPS].iter().map(TapStats::of).collect();
        if self.fixed {
            self.targets.insert(i, (img.clone(), stats.clone()));
        }
        Ok((img, stats))
    }
}

struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    fn create(dir: PathBuf) -> Result<Self> {
        for sub in ["checkpoints", "samples"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Artifacts { dir })
    }

    fn log(&self, r: &LogRecord) -> Result<()> {
        RunLog::append_jsonl(self.dir.join("log.jsonl"), r)
    }

    fn checkpoint(&self, ck: &Checkpoint, name: &str) -> Result<()> {
        ck.save(self.dir.join("checkpoints").join(name))
    }

    fn sample(&self, iteration: u64, model: &ModelConfig, params: &Params<f32>, pools: &Pools, cfg: &TrainConfig) -> Result<()> {
        let source = resize_bilinear(&pools.source.images[0], cfg.crop);
        let target = resize_bilinear(&pools.target.images[0], cfg.crop);
        let out = translate(&source, Some(&target), model, params, TranslateOptions::default())?;
        save_png(self.dir.join("samples").join(format!("iter_{iteration:06}.png")), &out)
    }
}

fn snapshot(model: &ModelConfig, params: &Params<f32>, adam: &Adam, iteration: u64, rng: &ChaCha8Rng, seed: u64) -> Checkpoint {
    Checkpoint {
        config: model.clone(),
        params: params.clone(),
        train_state: Some(TrainState {
            iteration,
            adam_step: adam.step,
            rng_seed: seed,
            rng_word_pos: rng.get_word_pos(),
            moments: adam.moments(),
        }),
    }
}

/// Runs (or continues) the training schedule described by `cfg`.
pub fn train_loop(
    model: &ModelConfig,
    cfg: &TrainConfig,
    pools: &Pools,
    vgg: &Vgg19<f32>,
    mut options: RunOptions<'_>,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if pools.source.is_empty() || pools.target.is_empty() {
        return Err(Error::config("training pools must be non-empty"));
    }
    let min = style_min_side(model);
    if cfg.crop.width < min || cfg.crop.height < min {
        return Err(Error::config(format!(
            "crop {} is below the {min}x{min} minimum of the style network",
            cfg.crop
        )));
    }

    let (mut params, mut adam, mut rng, start) = match options.resume.take() {
        None => {
            let params = init_params(model, cfg.seed);
            let adam = Adam::new(&params);
            (params, adam, ChaCha8Rng::seed_from_u64(cfg.seed), 0)
        }
        Some(ck) => {
            if &ck.config != model {
                return Err(Error::config(format!(
                    "resume checkpoint is for {} {:?}, run is {} {:?}",
                    ck.config.variant,
                    ck.config.expansions(),
                    model.variant,
                    model.expansions()
                )));
            }
            let state = ck
                .train_state
                .ok_or_else(|| Error::config("resume checkpoint carries no training state"))?;
            if state.rng_seed != cfg.seed {
                return Err(Error::config(format!(
                    "resume checkpoint was trained with seed {}, config says {}",
                    state.rng_seed, cfg.seed
                )));
            }
            if state.iteration > cfg.iterations {
                return Err(Error::config(format!(
                    "resume checkpoint is at iteration {}, past the {}-iteration schedule",
                    state.iteration, cfg.iterations
                )));
            }
            let adam = Adam::from_moments(&ck.params, state.adam_step, &state.moments)?;
            let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
            rng.set_word_pos(state.rng_word_pos);
            (ck.params, adam, rng, state.iteration)
        }
    };

    // Registry census: the optimizer must track every registered parameter.
    if adam.names() != params.names().as_slice() {
        return Err(Error::contract("optimizer state does not cover the parameter registry"));
    }

    let end = options.stop_after.map_or(cfg.iterations, |s| s.min(cfg.iterations));
    let artifacts = options.run_dir.take().map(Artifacts::create).transpose()?;
    let mut prepared = Prepared::new(cfg, vgg);
    let mut log = RunLog::new();
    let mut zero_grad_at_start = Vec::new();

    for t in start..end {
        let started = Instant::now();
        let (si, ti) = sample_pair(&pools.source, &pools.target, &mut rng)?;
        let (source, content) = prepared.source(&pools.source, si, &mut rng)?;
        let (target, style) = prepared.target(&pools.target, ti, &mut rng)?;
        let targets = LossTargets { content, style };
        let lr = cosine_lr(t, cfg.iterations, cfg.lr)?;
        let out = train_step(model, &mut params, &mut adam, &source, &target, &targets, &cfg.loss, vgg, lr, t + 1)?;
        if t == start {
            zero_grad_at_start = out.zero_grad;
        }
        let iteration = t + 1;
        let record = LogRecord {
            iteration,
            lr,
            loss: out.losses.total,
            content: out.losses.content,
            style: out.losses.style,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if cfg.log_every > 0 && iteration % cfg.log_every == 0 {
            log.push(record)?;
            if let Some(a) = &artifacts {
                a.log(&record)?;
            }
            if let Some(cb) = options.progress.as_mut() {
                cb(&record);
            }
        }
        if let Some(a) = &artifacts {
            if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
                a.checkpoint(&snapshot(model, &params, &adam, iteration, &rng, cfg.seed), &checkpoint_name(iteration))?;
            }
            if cfg.sample_every > 0 && iteration % cfg.sample_every == 0 {
                a.sample(iteration, model, &params, pools, cfg)?;
            }
        }
    }

    let checkpoint = snapshot(model, &params, &adam, end.max(start), &rng, cfg.seed);
    if let Some(a) = &artifacts {
        if end == cfg.iterations {
            checkpoint.save(a.dir.join("final.hflow"))?;
        } else {
            a.checkpoint(&checkpoint, &checkpoint_name(end))?;
        }
    }
    Ok(TrainOutcome {
        checkpoint,
        log,
        zero_grad_at_start,
    })
}
