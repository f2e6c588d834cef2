//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary so the lines are always shown. Pass criterion
//! numbers to run a subset:
//!
//! ```text
//! cargo test -p hflow-cli --test acceptance -- 4 7
//! ```
//!
//! The process fails when any criterion fails that is not listed in
//! [`KNOWN_FAILURES`].

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use hflow_core::flow::{
    adain, forward_block, model_forward, model_reverse, recover_input, reverse_block, squeeze, unsqueeze, BlockSpec,
};
use hflow_core::io::{encode_png, load_image, save_png};
use hflow_core::metrics::{checkerboard_energy, psnr, ssim};
use hflow_core::nets::{affine_net_apply, init_block, param_breakdown, BlockParams, BlockStyle};
use hflow_core::perceptual::{
    aligned_style_from_stats, aligned_style_loss, extract_features, vanilla_style_loss, LossTargets, TapStats,
};
use hflow_core::training::data::ImagePool;
use hflow_core::training::step::{objective, GradMode};
use hflow_core::training::RunLog;
use hflow_core::{
    init_params, save_checkpoint, translate, Checkpoint, Element, FeatureMap, Fusion, ImageSize, LossConfig,
    ModelConfig, Params, Styling, Tensor, TranslateOptions, Variant, Vgg19,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Pinned tolerances and budgets
// ---------------------------------------------------------------------------

const INVERSION_TOL_F32: f64 = 1e-5;
const INVERSION_TOL_F64: f64 = 1e-10;
const INVERSION_BUDGET_S: f64 = 60.0;

const ORACLE_CASES: usize = 200;
const ORACLE_TOL: f64 = 1e-6;
const RECOVER_CASES: usize = 100;
const RECOVER_TOL: f64 = 1e-6;

const GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error; entries whose true gradient is
/// zero are compared absolutely below it.
const GRAD_FLOOR: f64 = 1e-4;
/// Sampled entries for the second gradient pass at a size where the
/// content term is non-zero.
const GRAD_SAMPLED_PARAMS: usize = 200;
const GRAD_SAMPLED_PIXELS: usize = 60;
const GRAD_BUDGET_S: f64 = 300.0;

const VANILLA_TOL: f64 = 1e-7;
const MONOTONE_PAIRS: usize = 50;
const WORKED_TOL: f64 = 1e-12;

const BUDGET_SLACK: f64 = 0.30;
const HF_BUDGET: f64 = 0.68e6;
const HF_DAGGER_BUDGET: f64 = 6.30e6;

const SMOKE_SEED: u64 = 7;
const SMOKE_WINDOW: usize = 100;
const SMOKE_MIN_DROP: f64 = 0.20;
const SMOKE_REPEAT: u64 = 100;
const SMOKE_BUDGET_S: f64 = 900.0;

const PROBE_IMAGES: usize = 10;
const PROBE_SIZE: usize = 32;

const METRIC_TOL: f64 = 1e-9;

/// Criteria that cannot pass as specified, with the reason.
const KNOWN_FAILURES: &[(u32, &str)] = &[(
    6,
    "the fourth HF† Affine-Net (480 -> 960 -> 1920 -> 1920 channels, 3x3) alone holds 53.9M weights",
)];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

type Criterion = fn() -> Outcome;

const CRITERIA: &[(u32, &str, Criterion)] = &[
    (1, "exact inversion", exact_inversion),
    (2, "oracle equivalence", oracle_equivalence),
    (3, "recoverability", recoverability),
    (4, "gradient correctness", gradient_correctness),
    (5, "loss identities", loss_identities),
    (6, "parameter budget", parameter_budget),
    (7, "desk training smoke", training_smoke),
    (8, "checkerboard probe", checkerboard_probe),
    (9, "metrics sanity", metrics_sanity),
    (10, "serialization", serialization),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    if !args.is_empty() && selected.is_empty() {
        println!("acceptance: no criteria selected by {args:?}");
        return;
    }
    let mut unexpected = Vec::new();
    let mut failed = 0;
    for &(id, title, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {title}: {} [{secs:.1}s]", outcome.detail);
        if !outcome.passed {
            failed += 1;
            match KNOWN_FAILURES.iter().find(|(k, _)| *k == id) {
                Some((_, why)) => println!("             known failure: {why}"),
                None => unexpected.push(id),
            }
        }
    }
    println!("acceptance: {failed} failed, unexpected failures {unexpected:?}");
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn random_map<T: Element>(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> FeatureMap<T> {
    FeatureMap::from_fn(c, h, w, |_, _, _| T::of(rng.gen_range(lo..hi)))
}

/// Fresh parameters with biases and fusion logits moved off zero.
fn random_params(config: &ModelConfig, seed: u64) -> Params<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(config, seed);
    params.visit_mut(|name, t| {
        if !name.ends_with(".weight") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    });
    params
}

fn random_block(rng: &mut ChaCha8Rng, logit_range: f64) -> (BlockSpec, BlockParams<Tensor<f64>>) {
    let spec = BlockSpec::new(rng.gen_range(1..=3), rng.gen_range(2..=5)).unwrap();
    let mut block = init_block(&spec, rng.gen()).cast::<f64>();
    for conv in block.affine.convs.iter_mut() {
        for v in conv.bias.data_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    for v in block.fusion_logits.data_mut() {
        *v = rng.gen_range(-logit_range..logit_range);
    }
    (spec, block)
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn hflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hflow"))
        .args(args)
        .env_remove("HFLOW_RUN_DIR")
        .env_remove("HFLOW_VGG_WEIGHTS")
        .output()
        .expect("hflow binary runs")
}

fn ok(out: &Output, what: &str) -> String {
    assert!(
        out.status.success(),
        "{what} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

// ---------------------------------------------------------------------------
// 1. Exact inversion
// ---------------------------------------------------------------------------

fn roundtrip<T: Element>(x: &FeatureMap<T>, config: &ModelConfig, params: &Params<T>) -> f64 {
    let (y, cache) = model_forward(x, config, params).unwrap();
    let back = model_reverse(&y, cache, Styling::Bypass, config, params, Fusion::ForceOne).unwrap();
    back.max_abs_diff(x)
}

fn exact_inversion() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut parts = Vec::new();
    let mut passed = true;
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let config = ModelConfig::preset(v);
        let params = random_params(&config, 100 + i as u64);
        let x: FeatureMap<f64> = random_map(&mut rng, 3, 32, 32, 0.0, 1.0);
        let e32 = roundtrip(&x.cast::<f32>(), &config, &params);
        let e64 = roundtrip(&x, &config, &params.cast::<f64>());
        passed &= e32 <= INVERSION_TOL_F32 && e64 <= INVERSION_TOL_F64;
        parts.push(format!("{} {e32:.1e}/{e64:.1e}", v.name()));
    }
    let secs = started.elapsed().as_secs_f64();
    passed &= secs < INVERSION_BUDGET_S;
    Outcome::new(
        passed,
        format!(
            "max |x - reverse(forward(x))| f32/f64: {} (tol {INVERSION_TOL_F32:.0e}/{INVERSION_TOL_F64:.0e}, {secs:.1}s of {INVERSION_BUDGET_S}s)",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence
// ---------------------------------------------------------------------------

/// `(x - mean) / sqrt(var + eps) * sigma + mu` per channel.
fn adain_oracle(y: &FeatureMap<f64>, style: &BlockStyle<f64>) -> FeatureMap<f64> {
    let stats = y.channel_stats();
    FeatureMap::from_fn(y.channels(), y.height(), y.width(), |c, i, j| {
        let (m, s) = stats[c];
        (y.get(c, i, j) - m) / (s * s + 1e-5).sqrt() * style.sigma[c] + style.mu[c]
    })
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut fwd, mut rev, mut styled) = (0.0f64, 0.0f64, 0usize);
    for case in 0..ORACLE_CASES {
        let (spec, block) = random_block(&mut rng, 3.0);
        let (c, n) = (spec.input_channels, spec.expansion);
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let x: FeatureMap<f64> = random_map(&mut rng, c, h, w, -1.0, 1.0);

        let (y, entry) = forward_block(&x, &spec, &block).unwrap();
        let a = affine_net_apply(&x, &block.affine).unwrap();
        let splits: Vec<FeatureMap<f64>> = entry.splits().to_vec();
        for i in 0..n {
            for ch in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        let prefix: f64 = (0..=i).map(|j| a.get(j * c + ch, yy, xx)).sum();
                        fwd = fwd.max((y.get(i * c + ch, yy, xx) - (x.get(ch, yy, xx) - prefix)).abs());
                        fwd = fwd.max((splits[i].get(ch, yy, xx) - a.get(i * c + ch, yy, xx)).abs());
                    }
                }
            }
        }

        // Reverse from a perturbed code so the check does not reduce to the
        // identity; every other case also restyles the code first.
        let noise: FeatureMap<f64> = random_map(&mut rng, n * c, h, w, -0.5, 0.5);
        let y2 = FeatureMap::from_fn(n * c, h, w, |ch, i, j| y.get(ch, i, j) + noise.get(ch, i, j));
        let style = (case % 2 == 1).then(|| BlockStyle {
            mu: (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            sigma: (0..n * c).map(|_| rng.gen_range(0.2..2.0)).collect(),
        });
        styled += style.is_some() as usize;
        let got = reverse_block(&y2, entry, style.as_ref(), &spec, &block, Fusion::Learned).unwrap();
        let yt = match &style {
            Some(s) => adain_oracle(&y2, s),
            None => y2.clone(),
        };
        let alphas: Vec<f64> = block.fusion_logits.data().iter().map(|&t| logistic(t)).collect();
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let term = |i: usize| yt.get(i * c + ch, yy, xx) + splits[i].get(ch, yy, xx);
                    let mut hv = term(n - 1);
                    for i in (0..n - 1).rev() {
                        hv = alphas[i] * term(i) + (1.0 - alphas[i]) * hv;
                    }
                    rev = rev.max((got.get(ch, yy, xx) - hv).abs());
                }
            }
        }
    }
    let passed = fwd <= ORACLE_TOL && rev <= ORACLE_TOL && fwd.is_finite() && rev.is_finite();
    Outcome::new(
        passed,
        format!(
            "{ORACLE_CASES} cases ({styled} restyled): prefix-sum err {fwd:.1e}, recurrence err {rev:.1e} (tol {ORACLE_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Recoverability
// ---------------------------------------------------------------------------

fn recoverability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut block_err = 0.0f64;
    for _ in 0..RECOVER_CASES {
        let (spec, block) = random_block(&mut rng, 20.0);
        let c = spec.input_channels;
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let x: FeatureMap<f64> = random_map(&mut rng, c, h, w, -1.0, 1.0);
        let (y, entry) = forward_block(&x, &spec, &block).unwrap();
        let y1 = y.narrow(0, c).unwrap();
        let a1 = &entry.splits()[0];
        let rebuilt = FeatureMap::from_fn(c, h, w, |ch, i, j| y1.get(ch, i, j) + a1.get(ch, i, j));
        block_err = block_err.max(rebuilt.max_abs_diff(&x));
    }
    // Whole models with random fusion weights.
    let mut model_err = 0.0f64;
    let models = 10;
    for m in 0..models {
        let e = [rng.gen_range(2..=4), rng.gen_range(2..=4)];
        let config = ModelConfig::from_expansions("recover", 3, &e, &[4, 8, 8, 8]).unwrap();
        let mut params = random_params(&config, 300 + m).cast::<f64>();
        for b in params.blocks.iter_mut() {
            for v in b.fusion_logits.data_mut() {
                *v = rng.gen_range(-20.0..20.0);
            }
        }
        let x: FeatureMap<f64> = random_map(&mut rng, 3, 4, 4, 0.0, 1.0);
        let (y, cache) = model_forward(&x, &config, &params).unwrap();
        model_err = model_err.max(recover_input(&y, &cache).unwrap().max_abs_diff(&x));
    }
    let passed = block_err <= RECOVER_TOL && model_err <= RECOVER_TOL;
    Outcome::new(
        passed,
        format!(
            "{RECOVER_CASES} blocks err {block_err:.1e}, {models} two-block models err {model_err:.1e} (tol {RECOVER_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Gradient correctness
// ---------------------------------------------------------------------------

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

struct FdResult {
    checked: usize,
    max_err: f64,
    worst: String,
    content: f64,
}

/// Central differences of the total loss against the backward pass.
/// `pick` selects which `(parameter, index)` entries and source pixels to
/// visit; `None` means all of them.
fn fd_check(source_side: usize, seed: u64, sample: Option<(usize, usize)>) -> FdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig::mini();
    let params = random_params(&config, seed).cast::<f64>();
    let source: FeatureMap<f64> = random_map(&mut rng, 3, source_side, source_side, 0.05, 0.95);
    let target: FeatureMap<f64> = random_map(&mut rng, 3, 16, 16, 0.05, 0.95);
    let vgg = Vgg19::standin(seed).cast::<f64>();
    let loss = LossConfig::default();
    let targets = LossTargets::new(&source, &target, &vgg).unwrap();
    let eval = |p: &Params<f64>, s: &FeatureMap<f64>| {
        objective(&config, p, s, &target, &targets, &loss, &vgg, GradMode::None).unwrap().losses.total
    };
    let analytic = objective(&config, &params, &source, &target, &targets, &loss, &vgg, GradMode::ParamsAndSource).unwrap();
    let content = analytic.losses.content;
    let grads = analytic.grads.unwrap();
    let source_grad = analytic.source_grad.unwrap();

    let mut entries: Vec<(String, usize)> = grads
        .named()
        .into_iter()
        .flat_map(|(name, g)| (0..g.len()).map(move |i| (name.clone(), i)))
        .collect();
    let mut pixels: Vec<usize> = (0..source.data().len()).collect();
    if let Some((np, nx)) = sample {
        entries = (0..np).map(|_| entries[rng.gen_range(0..entries.len())].clone()).collect();
        pixels = (0..nx).map(|_| rng.gen_range(0..pixels.len())).collect();
    }

    let mut r = FdResult {
        checked: 0,
        max_err: 0.0,
        worst: String::new(),
        content,
    };
    let mut note = |what: String, a: f64, n: f64| {
        let e = rel_err(a, n);
        r.checked += 1;
        if e.is_nan() || e > r.max_err {
            r.max_err = e;
            r.worst = format!("{what} analytic {a:.4e} numeric {n:.4e}");
        }
    };
    let analytic_of: std::collections::HashMap<String, &Tensor<f64>> = grads.named().into_iter().collect();
    for (name, i) in entries {
        let shifted = |d: f64| {
            let mut q = params.clone();
            q.visit_mut(|n, t| {
                if n == name {
                    t.data_mut()[i] += d;
                }
            });
            q
        };
        let numeric = (eval(&shifted(FD_STEP), &source) - eval(&shifted(-FD_STEP), &source)) / (2.0 * FD_STEP);
        note(format!("{name}[{i}]"), analytic_of[&name].data()[i], numeric);
    }
    for i in pixels {
        let shifted = |d: f64| {
            let mut s = source.clone();
            s.data_mut()[i] += d;
            s
        };
        let numeric = (eval(&params, &shifted(FD_STEP)) - eval(&params, &shifted(-FD_STEP))) / (2.0 * FD_STEP);
        note(format!("source[{i}]"), source_grad.data()[i], numeric);
    }
    r
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let full = fd_check(8, 4, None);
    let t_full = started.elapsed().as_secs_f64();
    let sampled = fd_check(16, 5, Some((GRAD_SAMPLED_PARAMS, GRAD_SAMPLED_PIXELS)));
    let secs = started.elapsed().as_secs_f64();
    let passed = full.max_err <= GRAD_TOL && sampled.max_err <= GRAD_TOL && sampled.content > 0.0 && secs < GRAD_BUDGET_S;
    Outcome::new(
        passed,
        format!(
            "8x8 all {} entries max rel err {:.1e} (worst {}) in {t_full:.0}s; 16x16 {} sampled entries with content {:.3e} max rel err {:.1e} in {:.0}s (tol {GRAD_TOL:.0e}, {secs:.0}s of {GRAD_BUDGET_S}s)",
            full.checked, full.max_err, full.worst, sampled.checked, sampled.content, sampled.max_err, secs - t_full
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Loss identities
// ---------------------------------------------------------------------------

fn stats_of(f: &FeatureMap<f64>) -> (Vec<f64>, Vec<f64>) {
    f.channel_stats().into_iter().unzip()
}

/// Sort-and-sum reference: keep the `max(1, floor(k N))` channels of
/// smallest mean gap, ties by index, and add their mean and std gaps.
fn aligned_oracle(out: &[(Vec<f64>, Vec<f64>)], tgt: &[(Vec<f64>, Vec<f64>)], k: f64) -> f64 {
    let mut total = 0.0;
    for ((mo, so), (mt, st)) in out.iter().zip(tgt) {
        let n = mo.len();
        let keep = ((k * n as f64).floor() as usize).max(1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| (mo[a] - mt[a]).abs().total_cmp(&(mo[b] - mt[b]).abs()));
        total += idx[..keep].iter().map(|&j| (mo[j] - mt[j]).abs() + (so[j] - st[j]).abs()).sum::<f64>();
    }
    total
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vgg = Vgg19::standin(0).cast::<f64>();

    // k = 1 against the all-channel sum, on images through the extractor.
    let mut vanilla_err = 0.0f64;
    for _ in 0..5 {
        let a: FeatureMap<f64> = random_map(&mut rng, 3, 24, 24, 0.0, 1.0);
        let b: FeatureMap<f64> = random_map(&mut rng, 3, 24, 24, 0.0, 1.0);
        let fa = extract_features(&a, &vgg).unwrap();
        let fb = extract_features(&b, &vgg).unwrap();
        let mut reference = 0.0;
        for t in 0..3 {
            let (ma, sa) = stats_of(&fa.maps[t]);
            let (mb, sb) = stats_of(&fb.maps[t]);
            reference += (0..ma.len()).map(|j| (ma[j] - mb[j]).abs() + (sa[j] - sb[j]).abs()).sum::<f64>();
        }
        let k1 = aligned_style_loss(&a, &b, 1.0, &vgg).unwrap();
        let vanilla = vanilla_style_loss(&a, &b, &vgg).unwrap();
        vanilla_err = vanilla_err.max((k1 - reference).abs()).max((k1 - vanilla).abs());
    }

    // Non-decreasing in k, and equal to the sort-and-sum reference.
    let ks: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let (mut worst_drop, mut oracle_err) = (0.0f64, 0.0f64);
    for _ in 0..MONOTONE_PAIRS {
        let mut out = Vec::new();
        let mut tgt = Vec::new();
        let mut out_raw = Vec::new();
        let mut tgt_raw = Vec::new();
        for _ in 0..3 {
            let n = rng.gen_range(1..=40);
            let fo: FeatureMap<f64> = random_map(&mut rng, n, 4, 4, -2.0, 2.0);
            let ft: FeatureMap<f64> = random_map(&mut rng, n, 4, 4, -2.0, 2.0);
            out.push(TapStats::of(&fo));
            tgt.push(TapStats::of(&ft));
            out_raw.push(stats_of(&fo));
            tgt_raw.push(stats_of(&ft));
        }
        let mut prev = f64::NEG_INFINITY;
        for &k in &ks {
            let v = aligned_style_from_stats(&out, &tgt, k).unwrap();
            worst_drop = worst_drop.max(prev - v);
            prev = v;
            let o = aligned_oracle(&out_raw, &tgt_raw, k);
            oracle_err = oracle_err.max((v - o).abs() / o.max(1.0));
        }
    }

    // Single tap, five channels: keep 4 of 5 at k = 0.8.
    let mu_out = [0.9, 0.1, 0.5, 0.3, 0.7];
    let single = |mu: &[f64], sigma: f64| {
        let f = FeatureMap::from_fn(5, 1, 2, |c, _, x| if x == 0 { mu[c] - sigma } else { mu[c] + sigma });
        TapStats::of(&f)
    };
    let worked = aligned_style_from_stats(&[single(&mu_out, 0.2)], &[single(&[0.0; 5], 0.0)], 0.8).unwrap();
    let combined = LossConfig::default().combine(1.0, worked);

    let passed = vanilla_err <= VANILLA_TOL
        && worst_drop <= 0.0
        && oracle_err <= WORKED_TOL
        && (worked - 2.4).abs() <= WORKED_TOL
        && (combined - 1.24).abs() <= WORKED_TOL;
    Outcome::new(
        passed,
        format!(
            "k=1 vs all-channel sum {vanilla_err:.1e} (tol {VANILLA_TOL:.0e}); {MONOTONE_PAIRS} pairs over k=0.1..1.0 worst drop {worst_drop:.1e}, sort-and-sum err {oracle_err:.1e}; worked example {worked} and total {combined} (tol {WORKED_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Parameter budget
// ---------------------------------------------------------------------------

/// Conv-IN-ReLU stack `C -> 2C -> 4C -> nC`, 3×3 kernels with biases.
fn affine_net_size(c: usize, n: usize) -> usize {
    let conv = |i: usize, o: usize| 9 * i * o + o;
    conv(c, 2 * c) + conv(2 * c, 4 * c) + conv(4 * c, n * c)
}

fn parse_total(table: &str, variant: &str) -> Option<usize> {
    let mut current = false;
    for line in table.lines() {
        if !line.starts_with(' ') {
            current = line.split_whitespace().next() == Some(variant);
        } else if current && line.trim_start().starts_with("total") {
            return line.split_whitespace().nth(1)?.parse().ok();
        }
    }
    None
}

fn parameter_budget() -> Outcome {
    let table = ok(&hflow(&["param-count", "--variant", "HF", "--variant", "HF†"]), "param-count");
    print!("{}", table.lines().map(|l| format!("             | {l}\n")).collect::<String>());
    let mut parts = Vec::new();
    let mut passed = true;
    for (v, budget) in [(Variant::Hf, HF_BUDGET), (Variant::HfDagger, HF_DAGGER_BUDGET)] {
        let config = ModelConfig::preset(v);
        let breakdown = param_breakdown(&config);
        let mut chain = 3;
        for (b, &n) in v.expansions().iter().enumerate() {
            let row = breakdown.rows.iter().find(|(name, _)| *name == format!("block{b}.affine")).unwrap();
            assert_eq!(row.1, affine_net_size(chain, n), "{} block {b}", v.name());
            chain *= n;
        }
        let counted = init_params(&config, 0).count();
        let printed = parse_total(&table, v.name()).expect("param-count prints a total");
        assert_eq!(counted, printed, "{}: registry and report disagree", v.name());
        let ratio = printed as f64 / budget;
        let within = (ratio - 1.0).abs() <= BUDGET_SLACK;
        passed &= within;
        parts.push(format!(
            "{} {:.2}M vs {:.2}M ({:+.0}%) {}",
            v.name(),
            printed as f64 / 1e6,
            budget / 1e6,
            100.0 * (ratio - 1.0),
            if within { "ok" } else { "outside" }
        ));
    }
    Outcome::new(passed, format!("{} (slack ±{:.0}%)", parts.join("; "), BUDGET_SLACK * 100.0))
}

// ---------------------------------------------------------------------------
// 7. Desk-scale training smoke
// ---------------------------------------------------------------------------

fn train(run_dir: &Path, extra: &[&str]) -> f64 {
    let seed = SMOKE_SEED.to_string();
    let mut args = vec![
        "train",
        "--variant",
        "HF",
        "--profile",
        "desk",
        "--seed",
        &seed,
        "--run-dir",
        p(run_dir),
        "--progress-every",
        "0",
    ];
    args.extend_from_slice(extra);
    let started = Instant::now();
    ok(&hflow(&args), "train");
    started.elapsed().as_secs_f64()
}

fn training_smoke() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (straight, resumed, repeat) = (tmp.path().join("straight"), tmp.path().join("resumed"), tmp.path().join("repeat"));

    let t_straight = train(&straight, &[]);
    let log = RunLog::read_jsonl(straight.join("log.jsonl")).unwrap();
    let records = log.records();
    let iterations = records.len() as u64;
    let mut lr_err = 0.0f64;
    for r in records {
        let expected = 1e-5 * 0.5 * (1.0 + (std::f64::consts::PI * (r.iteration - 1) as f64 / 1000.0).cos());
        lr_err = lr_err.max((r.lr - expected).abs() / 1e-5);
    }
    let ma = log.moving_average(SMOKE_WINDOW);
    let (first, last) = (ma[0], *ma.last().unwrap());
    let drop = (first - last) / first;

    let mid = straight.join("checkpoints").join("iter_000500.hflow");
    let t_resumed = train(&resumed, &["--resume", p(&mid)]);
    let final_bytes = std::fs::read(straight.join("final.hflow")).unwrap();
    let resume_identical = final_bytes == std::fs::read(resumed.join("final.hflow")).unwrap();
    let resumed_log = RunLog::read_jsonl(resumed.join("log.jsonl")).unwrap();
    let resume_log_identical = resumed_log.len() == 500
        && resumed_log.records().iter().zip(&records[500..]).all(|(a, b)| a.same_values(b));

    let stop = SMOKE_REPEAT.to_string();
    let t_repeat = train(&repeat, &["--stop-after", &stop]);
    let repeat_log = RunLog::read_jsonl(repeat.join("log.jsonl")).unwrap();
    let repeat_identical = repeat_log.len() as u64 == SMOKE_REPEAT
        && repeat_log.records().iter().zip(records).all(|(a, b)| a.same_values(b));

    let ck = Checkpoint::load(straight.join("final.hflow")).unwrap();
    let finite = ck.params.named().iter().all(|(_, t)| t.is_finite());
    let secs = t_straight + t_resumed + t_repeat;
    let passed = iterations == 1000
        && finite
        && drop >= SMOKE_MIN_DROP
        && lr_err <= 1e-12
        && resume_identical
        && resume_log_identical
        && repeat_identical
        && secs < SMOKE_BUDGET_S;
    Outcome::new(
        passed,
        format!(
            "{iterations} iterations in {t_straight:.0}s; {SMOKE_WINDOW}-iteration moving average {first:.3} -> {last:.3} (drop {:.1}%, need {:.0}%); cosine lr err {lr_err:.1e}; resume from 500 byte-identical {resume_identical}, log identical {resume_log_identical}; {SMOKE_REPEAT}-iteration repeat identical {repeat_identical}; {secs:.0}s of {SMOKE_BUDGET_S}s",
            100.0 * drop,
            100.0 * SMOKE_MIN_DROP
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Checkerboard probe
// ---------------------------------------------------------------------------

/// Shifts every channel's mean by `shift` and scales its std by `scale`.
fn perturb(f: &FeatureMap<f64>, shift: &[f64], scale: &[f64]) -> FeatureMap<f64> {
    let (mu, sigma): (Vec<f64>, Vec<f64>) = f
        .channel_stats()
        .into_iter()
        .enumerate()
        .map(|(c, (m, s))| (m + shift[c], s * scale[c]))
        .unzip();
    adain(f, &mu, &sigma).unwrap()
}

fn checkerboard_probe() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images = ImagePool::synthetic_source(PROBE_IMAGES, ImageSize::square(PROBE_SIZE), 8).images;
    let spec = BlockSpec::new(3, 4).unwrap();
    let block = init_block(&spec, 8).cast::<f64>();
    let mut wins = 0;
    let (mut min_sq, mut max_hf, mut max_plain) = (f64::INFINITY, 0.0f64, 0.0f64);
    for img in &images {
        let x = img.cast::<f64>();
        let shift: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let scale: Vec<f64> = (0..12).map(|_| rng.gen_range(0.5..1.5)).collect();

        let squeezed = unsqueeze(&perturb(&squeeze(&x).unwrap(), &shift, &scale)).unwrap();
        let (y, entry) = forward_block(&x, &spec, &block).unwrap();
        let hierarchy = reverse_block(&perturb(&y, &shift, &scale), entry, None, &spec, &block, Fusion::Learned).unwrap();

        let e_sq = checkerboard_energy(&squeezed).unwrap();
        let e_hf = checkerboard_energy(&hierarchy).unwrap();
        wins += (e_sq > e_hf) as usize;
        min_sq = min_sq.min(e_sq);
        max_hf = max_hf.max(e_hf);
        max_plain = max_plain.max(checkerboard_energy(&x).unwrap());
    }
    Outcome::new(
        wins == PROBE_IMAGES,
        format!(
            "squeeze energy > hierarchy energy on {wins}/{PROBE_IMAGES} images; min squeeze {min_sq:.3e}, max hierarchy {max_hf:.3e}, max unperturbed {max_plain:.3e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Metrics sanity
// ---------------------------------------------------------------------------

fn metrics_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: FeatureMap<f64> = random_map(&mut rng, 3, 24, 24, 0.0, 1.0);
    let b: FeatureMap<f64> = random_map(&mut rng, 3, 24, 24, 0.0, 1.0);
    let self_err = (ssim(&a, &a).unwrap() - 1.0).abs();
    let sym_err = (ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs();

    let zeros = FeatureMap::<f64>::filled(3, 16, 16, 0.0);
    let ones = FeatureMap::<f64>::filled(3, 16, 16, 1.0);
    let c1 = (0.01f64 * 1.0).powi(2);
    let constant_err = (ssim(&zeros, &ones).unwrap() - c1 / (1.0 + c1)).abs();

    let half = FeatureMap::<f64>::filled(3, 16, 16, 0.5);
    let tenth = half.map(|v| v + 0.1);
    let db20 = (psnr(&half, &tenth).unwrap() - 20.0).abs();
    let db0 = (psnr(&zeros, &ones).unwrap() - 0.0).abs();
    let inf = psnr(&a, &a).unwrap();

    let passed = self_err <= METRIC_TOL
        && sym_err <= METRIC_TOL
        && constant_err <= METRIC_TOL
        && db20 <= METRIC_TOL
        && db0 <= METRIC_TOL
        && inf == f64::INFINITY;
    Outcome::new(
        passed,
        format!(
            "|ssim(x,x)-1| {self_err:.1e}, symmetry {sym_err:.1e}, constant pair vs C1/(1+C1) {constant_err:.1e}, psnr 20 dB err {db20:.1e}, 0 dB err {db0:.1e}, identical {inf} (tol {METRIC_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Serialization
// ---------------------------------------------------------------------------

fn bits(params: &Params<f32>) -> Vec<(String, Vec<u32>)> {
    params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn serialization() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = ModelConfig::preset(Variant::Hf);
    let params = random_params(&config, 10);
    let ck = dir.join("hf.hflow");
    save_checkpoint(&config, &params, &ck).unwrap();
    let loaded = Checkpoint::load(&ck).unwrap();
    let params_identical = loaded.config == config && bits(&loaded.params) == bits(&params);
    let resaved = dir.join("again.hflow");
    loaded.save(&resaved).unwrap();
    let bytes_identical = std::fs::read(&ck).unwrap() == std::fs::read(&resaved).unwrap();

    let rejected_lib = Variant::ALL
        .into_iter()
        .filter(|v| *v != Variant::Hf)
        .all(|v| Checkpoint::load_for(&ck, &ModelConfig::preset(v)).is_err());

    let src = dir.join("src.png");
    let tgt = dir.join("tgt.png");
    save_png(&src, &ImagePool::synthetic_source(1, ImageSize::square(48), 10).images[0]).unwrap();
    save_png(&tgt, &ImagePool::synthetic_target(1, ImageSize::square(48), 11).images[0]).unwrap();
    let run = |out: &PathBuf, variant: Option<&str>| {
        let mut args = vec!["translate", "--checkpoint", p(&ck), "--source", p(&src), "--target", p(&tgt), "--output", p(out)];
        if let Some(v) = variant {
            args.extend(["--variant", v]);
        }
        hflow(&args)
    };
    let (o1, o2, o3) = (dir.join("o1.png"), dir.join("o2.png"), dir.join("o3.png"));
    ok(&run(&o1, None), "translate");
    ok(&run(&o2, Some("HF")), "translate");
    let cli_identical = std::fs::read(&o1).unwrap() == std::fs::read(&o2).unwrap();
    let rejected_cli = run(&o3, Some("HF++")).status.code() == Some(1) && !o3.exists();

    let x = load_image(&src).unwrap();
    let t = load_image(&tgt).unwrap();
    let direct = translate(&x, Some(&t), &config, &params, TranslateOptions::default()).unwrap();
    let lib_identical = encode_png(&direct).unwrap() == std::fs::read(&o1).unwrap();

    let passed = params_identical && bytes_identical && rejected_lib && rejected_cli && cli_identical && lib_identical;
    Outcome::new(
        passed,
        format!(
            "round trip bit-identical {params_identical}, re-save byte-identical {bytes_identical}; other variants rejected by loader {rejected_lib} and CLI {rejected_cli}; repeated translate byte-identical {cli_identical}, matches library {lib_identical}"
        ),
    )
}
