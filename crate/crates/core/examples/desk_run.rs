//! Trains HF on synthetic 64×64 pools with the desk profile and prints the
//! 100-iteration moving average of the total loss.
//!
//! `cargo run --release -p hflow-core --example desk_run -- [iterations]`

use hflow_core::training::{train_loop, ImagePool, Pools, RunOptions};
use hflow_core::{ImageSize, ModelConfig, TrainConfig, Variant, Vgg19};

fn main() -> hflow_core::Result<()> {
    let iterations = std::env::args().nth(1).map_or(1000, |s| s.parse().expect("iteration count"));
    let model = ModelConfig::preset(Variant::Hf);
    let mut cfg = TrainConfig::desk();
    cfg.iterations = iterations;
    let pools = Pools {
        source: ImagePool::synthetic_source(20, ImageSize::square(64), cfg.seed),
        target: ImagePool::synthetic_target(20, ImageSize::square(64), cfg.seed),
    };
    let vgg = Vgg19::standin(0);
    let started = std::time::Instant::now();
    let out = train_loop(
        &model,
        &cfg,
        &pools,
        &vgg,
        RunOptions {
            progress: Some(Box::new(|r| {
                if r.iteration % 50 == 0 {
                    eprintln!(
                        "iter {:5}  lr {:.3e}  loss {:.4}  content {:.4}  style {:.4}  {:.0} ms",
                        r.iteration, r.lr, r.loss, r.content, r.style, r.wall_ms
                    );
                }
            })),
            ..Default::default()
        },
    )?;
    let ma = out.log.moving_average(100.min(out.log.len().max(1)));
    if let (Some(first), Some(last)) = (ma.first(), ma.last()) {
        println!(
            "moving average: first {first:.4}, last {last:.4}, drop {:.1}%",
            100.0 * (1.0 - last / first)
        );
    }
    println!("zero-gradient parameters at start: {:?}", out.zero_grad_at_start);
    println!("elapsed {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}
