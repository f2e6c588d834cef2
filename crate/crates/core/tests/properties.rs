use hflow_core::flow::{adain, model_forward, model_reverse, squeeze, unsqueeze};
use hflow_core::metrics::{checkerboard_energy, grayscale, psnr, ssim};
use hflow_core::nets::checkpoint::Checkpoint;
use hflow_core::perceptual::{aligned_style_from_stats, content_distance, ChannelSelection, TapStats};
use hflow_core::training::data::{crop, resize_bilinear, sample_pair, ImagePool};
use hflow_core::training::{adam_update, cosine_lr, AdamConfig};
use hflow_core::{init_params, FeatureMap, Fusion, ImageSize, ModelConfig, Styling};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn map_strategy(c: usize, h: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = FeatureMap<f64>> {
    prop::collection::vec(lo..hi, c * h * w).prop_map(move |d| FeatureMap::new(c, h, w, d).unwrap())
}

fn stats_strategy(max_channels: usize) -> impl Strategy<Value = (TapStats, TapStats)> {
    (1..=max_channels).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(0.0..2.0f64, n),
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(0.0..2.0f64, n),
        )
            .prop_map(|(m1, s1, m2, s2)| (TapStats { mean: m1, std: s1 }, TapStats { mean: m2, std: s2 }))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aligned_style_is_monotone_in_k((out, tgt) in stats_strategy(48), k1 in 0.01..=1.0f64, k2 in 0.01..=1.0f64) {
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let a = aligned_style_from_stats(std::slice::from_ref(&out), std::slice::from_ref(&tgt), lo).unwrap();
        let b = aligned_style_from_stats(std::slice::from_ref(&out), std::slice::from_ref(&tgt), hi).unwrap();
        prop_assert!(a <= b, "k {lo} -> {a}, k {hi} -> {b}");
    }

    #[test]
    fn selection_follows_channel_permutation((out, tgt) in stats_strategy(24), k in 0.05..=1.0f64, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = out.channels();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permute = |s: &TapStats| TapStats {
            mean: perm.iter().map(|&i| s.mean[i]).collect(),
            std: perm.iter().map(|&i| s.std[i]).collect(),
        };
        let (po, pt) = (permute(&out), permute(&tgt));
        let base = ChannelSelection::between(&out, &tgt, k).unwrap();
        let moved = ChannelSelection::between(&po, &pt, k).unwrap();
        prop_assert_eq!(base.count, moved.count);
        // Same energies are chosen; ties may pick different channels.
        let mut e1: Vec<f64> = base.chosen().iter().map(|&i| base.energy[i]).collect();
        let mut e2: Vec<f64> = moved.chosen().iter().map(|&i| moved.energy[i]).collect();
        e1.sort_by(f64::total_cmp);
        e2.sort_by(f64::total_cmp);
        prop_assert_eq!(e1, e2);
        let l1 = aligned_style_from_stats(&[out], &[tgt], k).unwrap();
        let l2 = aligned_style_from_stats(&[po], &[pt], k).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-12 * l1.max(1.0));
    }

    #[test]
    fn content_distance_ignores_channel_affine_changes(
        f in map_strategy(4, 5, 5, -2.0, 2.0),
        g in map_strategy(4, 5, 5, -2.0, 2.0),
        scale in prop::collection::vec(0.5..4.0f64, 4),
        shift in prop::collection::vec(-5.0..5.0f64, 4),
    ) {
        let moved = FeatureMap::from_fn(4, 5, 5, |c, y, x| f.get(c, y, x) * scale[c] + shift[c]);
        let d0 = content_distance(&f, &g).unwrap();
        let d1 = content_distance(&moved, &g).unwrap();
        prop_assert!((d0 - d1).abs() <= 1e-3 * d0.max(1.0), "{d0} vs {d1}");
    }

    #[test]
    fn ssim_and_psnr_are_symmetric(a in map_strategy(3, 12, 12, 0.0, 1.0), b in map_strategy(3, 12, 12, 0.0, 1.0)) {
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_of_uniform_offset(a in map_strategy(3, 6, 6, 0.0, 0.5), delta in 0.01..0.5f64) {
        let b = a.map(|v| v + delta);
        let expected = -10.0 * (delta * delta).log10();
        prop_assert!((psnr(&a, &b).unwrap() - expected).abs() <= 1e-6);
    }

    #[test]
    fn checkerboard_matches_fft(hh in 1..=8usize, ww in 1..=8usize, seed in any::<u64>()) {
        let (h, w) = (2 * hh, 2 * ww);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImagePool::synthetic_source(1, ImageSize::new(w, h), rng.next_u64()).images.remove(0);
        let img = img.cast::<f64>();
        let got = checkerboard_energy(&img).unwrap();
        let luma = grayscale(&img).unwrap();
        let mut planner = FftPlanner::<f64>::new();
        let (row_fft, col_fft) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
        let mut data: Vec<Complex<f64>> = luma.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in data.chunks_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            let mut col: Vec<Complex<f64>> = (0..h).map(|y| data[y * w + x]).collect();
            col_fft.process(&mut col);
            for y in 0..h {
                data[y * w + x] = col[y];
            }
        }
        let (mut ac, mut nyq) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if x == 0 && y == 0 {
                    continue;
                }
                let pw = data[y * w + x].norm_sqr();
                ac += pw;
                if x == w / 2 || y == h / 2 {
                    nyq += pw;
                }
            }
        }
        let expected = if ac <= 1e-12 { 0.0 } else { nyq / ac };
        prop_assert!((got - expected).abs() <= 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn squeeze_round_trips(c in 1..=4usize, hh in 1..=5usize, ww in 1..=5usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = FeatureMap::from_fn(c, 2 * hh, 2 * ww, |_, _, _| rng.gen::<f64>());
        let s = squeeze(&x).unwrap();
        prop_assert_eq!(s.dims(), (4 * c, hh, ww));
        prop_assert_eq!(s.get(4 * (c - 1) + 3, hh - 1, ww - 1), x.get(c - 1, 2 * hh - 1, 2 * ww - 1));
        prop_assert_eq!(unsqueeze(&s).unwrap(), x);
    }

    #[test]
    fn random_models_invert_exactly(
        e1 in 2..=4usize,
        e2 in 2..=3usize,
        h in 1..=9usize,
        w in 1..=9usize,
        seed in any::<u64>(),
    ) {
        let config = ModelConfig::from_expansions("prop", 3, &[e1, e2], &[4, 8, 8, 8]).unwrap();
        let params = init_params(&config, seed).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = FeatureMap::from_fn(3, h, w, |_, _, _| rng.gen::<f64>());
        let (y, cache) = model_forward(&x, &config, &params).unwrap();
        prop_assert_eq!(y.channels(), 3 * e1 * e2);
        let back = model_reverse(&y, cache, Styling::Bypass, &config, &params, Fusion::ForceOne).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn adain_sets_channel_statistics(
        x in map_strategy(3, 6, 6, -2.0, 2.0),
        mu in prop::collection::vec(-1.0..1.0f64, 3),
        sigma in prop::collection::vec(0.1..2.0f64, 3),
    ) {
        let out = adain(&x, &mu, &sigma).unwrap();
        for (c, ((m, s), (_, s0))) in out.channel_stats().into_iter().zip(x.channel_stats()).enumerate() {
            prop_assert!((m - mu[c]).abs() <= 1e-9);
            let expected = sigma[c] * s0 / (s0 * s0 + 1e-5).sqrt();
            prop_assert!((s - expected).abs() <= 1e-9);
        }
    }

    #[test]
    fn checkpoints_round_trip_any_values(values in prop::collection::vec(any::<f32>(), 16), seed in any::<u64>()) {
        let config = ModelConfig::mini();
        let mut params = init_params(&config, seed);
        let mut i = 0;
        params.visit_mut(|_, t| {
            for v in t.data_mut().iter_mut().take(2) {
                *v = values[i % values.len()];
                i += 1;
            }
        });
        let ck = Checkpoint { config, params, train_state: None };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
        let bits = |c: &Checkpoint| -> Vec<u32> {
            c.params.named().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
        };
        prop_assert_eq!(bits(&back), bits(&ck));
    }

    #[test]
    fn resize_and_crop_preserve_constants(v in 0.0..1.0f32, w in 2..40usize, h in 2..40usize, cw in 1..20usize, ch in 1..20usize) {
        let img = FeatureMap::filled(3, 17, 23, v);
        let r = resize_bilinear(&img, ImageSize::new(w, h));
        prop_assert_eq!(r.dims(), (3, h, w));
        prop_assert!(r.data().iter().all(|x| (x - v).abs() <= 1e-6));
        let size = ImageSize::new(cw.min(w), ch.min(h));
        let c = crop(&r, (0, 0), size).unwrap();
        prop_assert_eq!(c.dims(), (3, size.height, size.width));
    }

    #[test]
    fn cosine_schedule_is_non_increasing(total in 1..5000u64, lr in 1e-6..1e-2f64) {
        let mut prev = f64::INFINITY;
        for t in (0..=total).step_by((total as usize / 50).max(1)) {
            let v = cosine_lr(t, total, lr).unwrap();
            prop_assert!(v <= prev && v >= 0.0);
            prev = v;
        }
        prop_assert_eq!(cosine_lr(0, total, lr).unwrap(), lr);
        prop_assert!(cosine_lr(total, total, lr).unwrap().abs() <= 1e-12 * lr);
        prop_assert!(cosine_lr(total + 1, total, lr).is_err());
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let hp = AdamConfig::default();
    let mut theta = vec![1.5f64, -2.0, 0.3, 4.0];
    let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
    for step in 1..=2000 {
        let grad: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        adam_update(&mut theta, &grad, &mut m, &mut v, step, 0.05 * cosine_lr(step - 1, 2000, 1.0).unwrap(), &hp);
    }
    assert!(theta.iter().all(|t| t.abs() < 1e-2), "{theta:?}");
}

#[test]
fn pair_sampling_is_uniform() {
    let mk = |n: usize| {
        ImagePool::new(
            (0..n).map(|i| format!("{i}")).collect(),
            (0..n).map(|_| FeatureMap::filled(3, 2, 2, 0.5f32)).collect(),
        )
        .unwrap()
    };
    let (s, t) = (mk(2), mk(2));
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let (i, j) = sample_pair(&s, &t, &mut rng).unwrap();
            counts[i * 2 + j] += 1;
        }
        for c in counts {
            let share = c as f64 / draws as f64;
            assert!((share - 0.25).abs() <= 0.03, "seed {seed}: {counts:?}");
        }
    }
}
