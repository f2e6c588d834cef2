//! Subcommand bodies. Each returns `Ok(false)` when checks ran and failed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hflow_core::checks::{self, CheckTarget};
use hflow_core::io::{encode_png, list_images, load_image};
use hflow_core::metrics::MetricReport;
use hflow_core::nets::param_breakdown;
use hflow_core::perceptual::{aligned_style_loss, check_k};
use hflow_core::training::{train_loop, LogRecord, RunOptions};
use hflow_core::{
    init_params, translate as run_translate, Backend, Checkpoint, FeatureMap, Fusion, ModelConfig, TranslateOptions,
    Variant, Vgg19,
};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{backend_from, slug, RunConfig};
use crate::{CheckArgs, MetricsArgs, ParamCountArgs, TrainArgs, TranslateArgs};

pub fn train(args: TrainArgs) -> Result<bool> {
    let mut cfg = RunConfig::load(args.config.as_deref(), args.profile)?;
    if let Some(v) = args.variant {
        cfg.model.variant = v.name().to_string();
        cfg.model.expansions = None;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(l) = args.lambda {
        cfg.train.loss.lambda = l;
    }
    if let Some(k) = args.k {
        cfg.train.loss.k = k;
    }
    if let Some(c) = args.checkpoint_every {
        cfg.train.checkpoint_every = c;
    }
    if args.source_dir.is_some() || args.target_dir.is_some() {
        cfg.data.source_dir = args.source_dir;
        cfg.data.target_dir = args.target_dir;
    }
    cfg.backend = backend_from(args.vgg_weights, cfg.backend);
    cfg.validate()?;

    let model = cfg.model_config()?;
    let run_dir = args
        .run_dir
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-s{}", slug(&model.variant), cfg.train.seed)));
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let echo = run_dir.join("config.toml");
    std::fs::write(&echo, cfg.to_toml()).with_context(|| format!("writing {}", echo.display()))?;

    let pools = cfg.pools()?;
    let vgg: Vgg19<f32> = cfg.backend.build()?;
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let every = args.progress_every;
    let total = cfg.train.iterations;
    let progress = move |r: &LogRecord| {
        if every > 0 && (r.iteration % every == 0 || r.iteration == total) {
            eprintln!(
                "iter {:>7}/{total}  loss {:.4}  content {:.4}  style {:.4}  lr {:.3e}  {:.0} ms",
                r.iteration, r.loss, r.content, r.style, r.lr, r.wall_ms
            );
        }
    };
    eprintln!(
        "training {} {:?} for {} iterations into {}",
        model.variant,
        model.expansions(),
        total,
        run_dir.display()
    );
    let outcome = train_loop(
        &model,
        &cfg.train,
        &pools,
        &vgg,
        RunOptions {
            run_dir: Some(run_dir.clone()),
            resume,
            stop_after: args.stop_after,
            progress: Some(Box::new(progress)),
        },
    )?;
    if !outcome.zero_grad_at_start.is_empty() {
        eprintln!("warning: no gradient on the first step for {}", outcome.zero_grad_at_start.join(", "));
    }
    let done = outcome.checkpoint.train_state.as_ref().map_or(0, |s| s.iteration);
    let window = 100;
    let ma = outcome.log.moving_average(window);
    if let (Some(first), Some(last)) = (ma.first(), ma.last()) {
        println!(
            "{window}-iteration moving average loss {first:.4} -> {last:.4} ({:+.1}%)",
            100.0 * (last - first) / first
        );
    }
    println!("completed {done}/{total} iterations in {}", run_dir.display());
    Ok(true)
}

fn translate_one(
    source: &Path,
    target: Option<&FeatureMap<f32>>,
    ck: &Checkpoint,
    options: TranslateOptions,
) -> Result<FeatureMap<f32>> {
    let x = load_image(source)?;
    run_translate(&x, target, &ck.config, &ck.params, options).with_context(|| format!("translating {}", source.display()))
}

pub fn translate(args: TranslateArgs) -> Result<bool> {
    let ck = match args.variant {
        Some(v) => Checkpoint::load_for(&args.checkpoint, &ModelConfig::preset(v))?,
        None => Checkpoint::load(&args.checkpoint)?,
    };
    if let Some(k) = args.k {
        check_k(k)?;
    }
    let target = match (&args.target, args.adain_bypass) {
        (Some(t), _) => Some(load_image(t)?),
        (None, true) => None,
        (None, false) => bail!("--target is required unless --adain-bypass is set"),
    };
    if args.k.is_some() && target.is_none() {
        bail!("--k needs a --target image to score against");
    }
    let vgg: Option<Vgg19<f32>> = match args.k {
        Some(_) => Some(backend_from(args.vgg_weights.clone(), Backend::SeededStandin { seed: 0 }).build()?),
        None => None,
    };
    let options = TranslateOptions {
        adain_bypass: args.adain_bypass,
        fusion: if args.alpha_one { Fusion::ForceOne } else { Fusion::Learned },
    };

    let jobs: Vec<(PathBuf, PathBuf)> = if args.source.is_dir() {
        std::fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
        list_images(&args.source)?
            .into_iter()
            .map(|p| {
                let name = Path::new(p.file_stem().expect("listed images have names")).with_extension("png");
                let out = args.output.join(name);
                (p, out)
            })
            .collect()
    } else {
        vec![(args.source.clone(), args.output.clone())]
    };

    let results: Vec<Result<serde_json::Value>> = jobs
        .par_iter()
        .map(|(src, out)| {
            let y = translate_one(src, target.as_ref(), &ck, options)?;
            let bytes = encode_png(&y)?;
            std::fs::write(out, bytes).with_context(|| format!("writing {}", out.display()))?;
            let mut record = json!({
                "source": src.display().to_string(),
                "output": out.display().to_string(),
                "width": y.width(),
                "height": y.height(),
            });
            if let (Some(k), Some(vgg), Some(t)) = (args.k, vgg.as_ref(), target.as_ref()) {
                let clamped = y.map(|v| v.clamp(0.0, 1.0));
                record["k"] = json!(k);
                record["aligned_style_loss"] = json!(aligned_style_loss(&clamped, t, k, vgg)?);
            }
            Ok(record)
        })
        .collect();
    for r in results {
        println!("{}", r?);
    }
    Ok(true)
}

pub fn check(args: CheckArgs) -> Result<bool> {
    let targets = match &args.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            vec![CheckTarget {
                config: ck.config,
                params: ck.params,
            }]
        }
        None => {
            let variants = if args.variant.is_empty() { Variant::ALL.to_vec() } else { args.variant.clone() };
            variants
                .into_iter()
                .map(|v| {
                    let config = ModelConfig::preset(v);
                    let params = init_params(&config, args.seed);
                    CheckTarget { config, params }
                })
                .collect()
        }
    };
    let results = checks::run(args.suite, &targets, args.seed)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{r}");
    }
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn compare(candidate: &Path, reference: &Path) -> serde_json::Value {
    let report = load_image(candidate)
        .and_then(|a| load_image(reference).map(|b| (a, b)))
        .and_then(|(a, b)| MetricReport::compute(&a, &b));
    let mut record = match report {
        Ok(r) => r.to_json(),
        Err(e) => json!({ "error": e.to_string() }),
    };
    record["pair"] = json!(file_name(candidate));
    record
}

pub fn metrics(args: MetricsArgs) -> Result<bool> {
    match (args.candidate.is_dir(), args.reference.is_dir()) {
        (false, false) => {
            let record = compare(&args.candidate, &args.reference);
            println!("{record}");
            if let Some(e) = record.get("error") {
                bail!("{}", e.as_str().unwrap_or("metrics failed"));
            }
            Ok(true)
        }
        (true, true) => {
            let by_name = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
                Ok(list_images(dir)?.into_iter().map(|p| (file_name(&p), p)).collect())
            };
            let a = by_name(&args.candidate)?;
            let b = by_name(&args.reference)?;
            for name in a.keys().filter(|n| !b.contains_key(*n)) {
                eprintln!("warning: {name} has no counterpart in {}; skipped", args.reference.display());
            }
            for name in b.keys().filter(|n| !a.contains_key(*n)) {
                eprintln!("warning: {name} has no counterpart in {}; skipped", args.candidate.display());
            }
            let pairs: Vec<(&PathBuf, &PathBuf)> =
                a.iter().filter_map(|(n, p)| b.get(n).map(|q| (p, q))).collect();
            let records: Vec<serde_json::Value> = pairs.par_iter().map(|(p, q)| compare(p, q)).collect();
            for r in &records {
                println!("{r}");
            }
            eprintln!("{} pairs compared", records.len());
            Ok(true)
        }
        _ => bail!(
            "{} and {} must both be files or both be directories",
            args.candidate.display(),
            args.reference.display()
        ),
    }
}

pub fn param_count(args: ParamCountArgs) -> Result<bool> {
    let variants = if args.variant.is_empty() { Variant::ALL.to_vec() } else { args.variant };
    for v in variants {
        let config = ModelConfig::preset(v);
        let b = param_breakdown(&config);
        if args.json {
            let rows: serde_json::Map<String, serde_json::Value> =
                b.rows.iter().map(|(n, c)| (n.clone(), json!(c))).collect();
            println!(
                "{}",
                json!({ "variant": v.name(), "expansions": config.expansions(), "rows": rows, "total": b.total })
            );
        } else {
            println!("{} {:?}", v.name(), config.expansions());
            for (name, count) in &b.rows {
                println!("  {name:<16} {count:>12}");
            }
            println!("  {:<16} {:>12}  ({:.2}M)", "total", b.total, b.total as f64 / 1e6);
        }
    }
    Ok(true)
}
