//! Self-checks runnable from the command line: exact inversion, closed-form
//! equivalence of the coupling recurrences, finite-difference gradients and
//! loss identities.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{
    couple_reverse, forward_block, model_forward, model_reverse, recover_input, BlockSpec, Fusion, ModelConfig,
    Styling,
};
use crate::nets::{affine_net_apply, init_block, init_params, Params};
use crate::perceptual::{
    aligned_style_from_stats, aligned_style_loss, vanilla_style_from_stats, vanilla_style_loss, LossConfig,
    LossTargets, TapStats, Vgg19,
};
use crate::tensor::{nan_max, Element, FeatureMap};
use crate::training::step::{objective, GradMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Inversion,
    Oracle,
    Gradients,
    Losses,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inversion" => Ok(Suite::Inversion),
            "oracle" => Ok(Suite::Oracle),
            "gradients" => Ok(Suite::Gradients),
            "losses" => Ok(Suite::Losses),
            "all" => Ok(Suite::All),
            other => Err(Error::config(format!(
                "unknown suite {other:?} (expected inversion, oracle, gradients, losses or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(suite: &'static str, name: impl Into<String>, max_error: f64, tolerance: f64) -> Self {
        CheckResult {
            suite,
            name: name.into(),
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: max error {:.3e} (tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

/// Models for the inversion suite.
pub struct CheckTarget {
    pub config: ModelConfig,
    pub params: Params<f32>,
}

pub fn run(suite: Suite, targets: &[CheckTarget], seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Inversion | Suite::All) {
        for t in targets {
            out.extend(inversion(&t.config, &t.params, seed)?);
        }
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        out.extend(oracle(200, 100, seed)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.push(gradients(seed)?);
    }
    if matches!(suite, Suite::Losses | Suite::All) {
        out.extend(losses(seed)?);
    }
    Ok(out)
}

fn random_image<T: Element>(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<T> {
    FeatureMap::from_fn(c, h, w, |_, _, _| T::of(rng.gen::<f64>()))
}

/// Round-trip error; a non-finite intermediate counts as an infinite error.
fn roundtrip_error<T: Element>(x: &FeatureMap<T>, config: &ModelConfig, params: &Params<T>) -> Result<f64> {
    let back = model_forward(x, config, params)
        .and_then(|(y, cache)| model_reverse(&y, cache, Styling::Bypass, config, params, Fusion::ForceOne));
    match back {
        Ok(back) => Ok(back.max_abs_diff(x)),
        Err(Error::NonFinite { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Forward then reversed pass with AdaIN bypassed and every fusion weight
/// forced to one, on a random 32×32 image, in `f32` and `f64`.
pub fn inversion(config: &ModelConfig, params: &Params<f32>, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: FeatureMap<f64> = random_image(&mut rng, 3, 32, 32);
    let e32 = roundtrip_error(&x.cast::<f32>(), config, params)?;
    let e64 = roundtrip_error(&x, config, &params.cast::<f64>())?;
    Ok(vec![
        CheckResult::new("inversion", format!("{} f32", config.variant), e32, 1e-5),
        CheckResult::new("inversion", format!("{} f64", config.variant), e64, 1e-10),
    ])
}

fn random_block(rng: &mut ChaCha8Rng) -> (BlockSpec, crate::nets::BlockParams<crate::tensor::Tensor<f64>>) {
    let c = rng.gen_range(1..=3);
    let n = rng.gen_range(2..=5);
    let spec = BlockSpec::new(c, n).expect("valid block");
    let mut block = init_block(&spec, rng.gen()).cast::<f64>();
    for v in block.fusion_logits.data_mut() {
        *v = rng.gen_range(-3.0..3.0);
    }
    (spec, block)
}

/// Closed-form checks on random blocks of at most 3×4×4 input.
pub fn oracle(cases: usize, recover_cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0AC1E);
    let (mut fwd_err, mut rev_err, mut rec_err) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..cases.max(recover_cases) {
        let (spec, block) = random_block(&mut rng);
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let c = spec.input_channels;
        let n = spec.expansion;
        let x: FeatureMap<f64> = FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0));
        let affine = affine_net_apply(&x, &block.affine)?;
        let (y, entry) = forward_block(&x, &spec, &block)?;

        // y_i = x - (a_1 + ... + a_i)
        let plane = h * w;
        let mut prefix = vec![0.0; c * plane];
        for i in 0..n {
            for (k, p) in prefix.iter_mut().enumerate() {
                *p += affine.data()[i * c * plane + k];
                let expected = x.data()[k] - *p;
                fwd_err = nan_max(fwd_err, (y.data()[i * c * plane + k] - expected).abs());
            }
        }

        if case < recover_cases {
            for (k, xv) in x.data().iter().enumerate() {
                let rebuilt = y.data()[k] + entry.splits()[0].data()[k];
                rec_err = nan_max(rec_err, (rebuilt - xv).abs());
            }
        }

        if case < cases {
            // h_1 = sum_i w_i (y_i + a_i), w_i = alpha_i prod_{j<i}(1 - alpha_j),
            // w_n = prod_{j<n}(1 - alpha_j).
            let y2: FeatureMap<f64> = FeatureMap::from_fn(n * c, h, w, |_, _, _| rng.gen_range(-2.0..2.0));
            let alphas: Vec<f64> = block
                .fusion_logits
                .data()
                .iter()
                .map(|t| 1.0 / (1.0 + (-t).exp()))
                .collect();
            let mut weights = Vec::with_capacity(n);
            let mut keep = 1.0;
            for a in &alphas {
                weights.push(keep * a);
                keep *= 1.0 - a;
            }
            weights.push(keep);
            let splits: Vec<Vec<f64>> = entry.splits().iter().map(|s| s.data().to_vec()).collect();
            let out = couple_reverse(&y2, entry, None, &alphas)?;
            for k in 0..c * plane {
                let expected: f64 = (0..n)
                    .map(|i| weights[i] * (y2.data()[i * c * plane + k] + splits[i][k]))
                    .sum();
                rev_err = nan_max(rev_err, (out.data()[k] - expected).abs());
            }
        }
    }

    // Model-level recovery with learned (non-unit) fusion weights in place.
    let config = ModelConfig::mini();
    let mut params = init_params(&config, seed).cast::<f64>();
    for b in &mut params.blocks {
        for v in b.fusion_logits.data_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
    }
    let x: FeatureMap<f64> = random_image(&mut rng, 3, 4, 4);
    let (y, cache) = model_forward(&x, &config, &params)?;
    rec_err = nan_max(rec_err, recover_input(&y, &cache)?.max_abs_diff(&x));

    Ok(vec![
        CheckResult::new("oracle", format!("forward prefix sums ({cases} blocks)"), fwd_err, 1e-6),
        CheckResult::new("oracle", format!("reversed fusion expansion ({cases} blocks)"), rev_err, 1e-6),
        CheckResult::new("oracle", format!("input recovery ({recover_cases} blocks)"), rec_err, 1e-6),
    ])
}

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative errors use `max(|analytic|, |numeric|, GRAD_FLOOR)` as the
/// denominator so that entries that are zero up to rounding do not
/// dominate.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares analytic gradients of the total loss on the small two-block
/// model (`f64`, 8×8 source, 16×16 target, seeded stand-in extractor)
/// against central differences for every parameter and source pixel.
pub fn gradient_report(seed: u64) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AD);
    let config = ModelConfig::mini();
    let mut params = init_params(&config, seed).cast::<f64>();
    // Move away from the all-zero biases and logits of a fresh model.
    params.visit_mut(|name, t| {
        if !name.ends_with(".weight") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    });
    let source: FeatureMap<f64> = random_image(&mut rng, 3, 8, 8);
    let target: FeatureMap<f64> = random_image(&mut rng, 3, 16, 16);
    let vgg = Vgg19::standin(seed).cast::<f64>();
    let loss = LossConfig::default();
    let targets = LossTargets::new(&source, &target, &vgg)?;
    let eval = |p: &Params<f64>, s: &FeatureMap<f64>| -> Result<f64> {
        Ok(objective(&config, p, s, &target, &targets, &loss, &vgg, GradMode::None)?.losses.total)
    };
    let analytic = objective(&config, &params, &source, &target, &targets, &loss, &vgg, GradMode::ParamsAndSource)?;
    let grads = analytic.grads.expect("requested");
    let source_grad = analytic.source_grad.expect("requested");

    let mut report = GradientReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut note = |name: String, a: f64, n: f64| {
        let e = relative_error(a, n);
        report.checked += 1;
        if e.is_nan() || e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = format!("{name}: analytic {a:.6e}, numeric {n:.6e}");
        }
    };
    for (name, g) in grads.named() {
        for i in 0..g.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let shift = |p: &mut Params<f64>, d: f64| {
                p.visit_mut(|n, t| {
                    if n == name {
                        t.data_mut()[i] += d;
                    }
                })
            };
            shift(&mut plus, FD_STEP);
            shift(&mut minus, -FD_STEP);
            let numeric = (eval(&plus, &source)? - eval(&minus, &source)?) / (2.0 * FD_STEP);
            note(format!("{name}[{i}]"), g.data()[i], numeric);
        }
    }
    for i in 0..source.data().len() {
        let mut plus = source.clone();
        let mut minus = source.clone();
        plus.data_mut()[i] += FD_STEP;
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(&params, &plus)? - eval(&params, &minus)?) / (2.0 * FD_STEP);
        note(format!("source[{i}]"), source_grad.data()[i], numeric);
    }
    Ok(report)
}

pub fn gradients(seed: u64) -> Result<CheckResult> {
    let r = gradient_report(seed)?;
    Ok(CheckResult::new(
        "gradients",
        format!("{} entries, worst {}", r.checked, r.worst),
        r.max_rel_err,
        1e-3,
    ))
}

fn random_stats(rng: &mut ChaCha8Rng, n: usize) -> TapStats {
    TapStats {
        mean: (0..n).map(|_| rng.gen_range(0.0..2.0)).collect(),
        std: (0..n).map(|_| rng.gen_range(0.0..2.0)).collect(),
    }
}

/// Loss identities: full selection equals the vanilla loss, the loss never
/// decreases with `k`, and a hand-computed single-tap case.
pub fn losses(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let vgg = Vgg19::standin(seed).cast::<f64>();
    let mut vanilla_err = 0.0f64;
    for _ in 0..3 {
        let a: FeatureMap<f64> = random_image(&mut rng, 3, 16, 16);
        let b: FeatureMap<f64> = random_image(&mut rng, 3, 16, 16);
        let full = aligned_style_loss(&a, &b, 1.0, &vgg)?;
        let vanilla = vanilla_style_loss(&a, &b, &vgg)?;
        vanilla_err = nan_max(vanilla_err, (full - vanilla).abs() / vanilla.max(1.0));
    }

    let mut worst_drop = 0.0f64;
    for _ in 0..50 {
        let out: Vec<TapStats> = [64, 128, 256].iter().map(|&n| random_stats(&mut rng, n)).collect();
        let tgt: Vec<TapStats> = [64, 128, 256].iter().map(|&n| random_stats(&mut rng, n)).collect();
        vanilla_err = nan_max(vanilla_err, 
            (aligned_style_from_stats(&out, &tgt, 1.0)? - vanilla_style_from_stats(&out, &tgt)?).abs(),
        );
        let mut prev = 0.0;
        for step in 1..=10 {
            let v = aligned_style_from_stats(&out, &tgt, step as f64 / 10.0)?;
            worst_drop = nan_max(worst_drop, prev - v);
            prev = v;
        }
    }

    let out = [TapStats {
        mean: vec![0.9, 0.1, 0.5, 0.3, 0.7],
        std: vec![0.5; 5],
    }];
    let tgt = [TapStats {
        mean: vec![0.0; 5],
        std: vec![0.3; 5],
    }];
    let worked = aligned_style_from_stats(&out, &tgt, 0.8)?;

    Ok(vec![
        CheckResult::new("losses", "k = 1 equals vanilla style loss", vanilla_err, 1e-7),
        CheckResult::new("losses", "non-decreasing in k (50 pairs)", worst_drop, 0.0),
        CheckResult::new("losses", format!("five-channel example = {worked}"), (worked - 2.4).abs(), 1e-12),
    ])
}
