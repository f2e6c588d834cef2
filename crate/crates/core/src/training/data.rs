//! Unpaired image pools, sampling and augmentation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{list_images, load_image};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

impl ImageSize {
    pub const fn new(width: usize, height: usize) -> Self {
        ImageSize { width, height }
    }

    pub const fn square(side: usize) -> Self {
        ImageSize { width: side, height: side }
    }
}

impl std::fmt::Display for ImageSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A named set of RGB images in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePool {
    pub labels: Vec<String>,
    pub images: Vec<FeatureMap<f32>>,
}

impl ImagePool {
    pub fn new(labels: Vec<String>, images: Vec<FeatureMap<f32>>) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(Error::contract("pool labels and images differ in count"));
        }
        Ok(ImagePool { labels, images })
    }

    /// Loads every PNG/JPEG directly inside `dir`, in file-name order.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::config(format!("image directory {} does not exist", dir.display())));
        }
        let paths = list_images(dir)?;
        if paths.is_empty() {
            return Err(Error::config(format!("image directory {} holds no PNG/JPEG files", dir.display())));
        }
        let mut labels = Vec::with_capacity(paths.len());
        let mut images = Vec::with_capacity(paths.len());
        for p in paths {
            images.push(load_image(&p)?);
            labels.push(p.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
        Ok(ImagePool { labels, images })
    }

    /// Daylight-like scenes: sky gradient, ground plane and a few bright
    /// shapes.
    pub fn synthetic_source(count: usize, size: ImageSize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
        let images = (0..count).map(|_| scene(size, &mut rng, false)).collect();
        Self::labelled("source", images)
    }

    /// Night-like scenes: dark blue tones, point lights and a stripe texture.
    pub fn synthetic_target(count: usize, size: ImageSize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
        let images = (0..count).map(|_| scene(size, &mut rng, true)).collect();
        Self::labelled("target", images)
    }

    fn labelled(prefix: &str, images: Vec<FeatureMap<f32>>) -> Self {
        let labels = (0..images.len()).map(|i| format!("{prefix}_{i:03}")).collect();
        ImagePool { labels, images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn scene(size: ImageSize, rng: &mut ChaCha8Rng, night: bool) -> FeatureMap<f32> {
    let (w, h) = (size.width, size.height);
    let horizon = rng.gen_range(0.35..0.65) * h as f64;
    let sky_top: [f64; 3] = if night {
        [0.02, 0.03, rng.gen_range(0.12..0.25)]
    } else {
        [rng.gen_range(0.3..0.5), rng.gen_range(0.55..0.75), rng.gen_range(0.85..1.0)]
    };
    let sky_bottom: [f64; 3] = if night {
        [0.05, 0.06, rng.gen_range(0.25..0.4)]
    } else {
        [0.85, 0.9, 0.95]
    };
    let ground: [f64; 3] = if night {
        [0.04, 0.05, 0.1]
    } else {
        [rng.gen_range(0.2..0.45), rng.gen_range(0.45..0.7), rng.gen_range(0.1..0.3)]
    };
    struct Shape {
        cx: f64,
        cy: f64,
        r: f64,
        round: bool,
        color: [f64; 3],
    }
    let n_shapes = if night { rng.gen_range(6..12) } else { rng.gen_range(2..5) };
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let r = if night {
                rng.gen_range(0.01..0.035) * w as f64
            } else {
                rng.gen_range(0.08..0.2) * w as f64
            };
            let color = if night {
                [rng.gen_range(0.8..1.0), rng.gen_range(0.7..0.95), rng.gen_range(0.3..0.6)]
            } else {
                [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]
            };
            Shape {
                cx: rng.gen::<f64>() * w as f64,
                cy: rng.gen_range(0.2..0.95) * h as f64,
                r,
                round: night || rng.gen_bool(0.5),
                color,
            }
        })
        .collect();
    let stripe_period = rng.gen_range(6.0..12.0);
    let noise: Vec<f64> = (0..3 * w * h).map(|_| rng.gen_range(-0.01..0.01)).collect();
    FeatureMap::from_fn(3, h, w, |c, y, x| {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut v = if yf < horizon {
            let t = yf / horizon;
            sky_top[c] * (1.0 - t) + sky_bottom[c] * t
        } else {
            let t = (yf - horizon) / (h as f64 - horizon).max(1.0);
            ground[c] * (1.0 - 0.3 * t)
        };
        if night && yf >= horizon {
            v += 0.03 * (std::f64::consts::TAU * xf / stripe_period).sin();
        }
        for s in &shapes {
            let (dx, dy) = (xf - s.cx, yf - s.cy);
            let inside = if s.round {
                (dx * dx + dy * dy).sqrt() <= s.r
            } else {
                dx.abs() <= s.r && dy.abs() <= s.r * 0.7
            };
            if inside {
                v = s.color[c];
            }
        }
        (v + noise[(c * h + y) * w + x]).clamp(0.0, 1.0) as f32
    })
}

/// Independent uniform draws of a source and a target index.
pub fn sample_pair(source: &ImagePool, target: &ImagePool, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::config("training pools must be non-empty"));
    }
    let s = rng.gen_range(0..source.len() as u64) as usize;
    let t = rng.gen_range(0..target.len() as u64) as usize;
    Ok((s, t))
}

/// Bilinear resampling with half-pixel centres; same-size input is copied.
pub fn resize_bilinear(img: &FeatureMap<f32>, size: ImageSize) -> FeatureMap<f32> {
    let (c, h, w) = img.dims();
    let (oh, ow) = (size.height, size.width);
    if (oh, ow) == (h, w) {
        return img.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(oh, h);
    let xs = axis(ow, w);
    FeatureMap::from_fn(c, oh, ow, |ch, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = img.get(ch, y0, x0) * (1.0 - fx) + img.get(ch, y0, x1) * fx;
        let bottom = img.get(ch, y1, x0) * (1.0 - fx) + img.get(ch, y1, x1) * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    })
}

/// Draws a crop origin within a `resize`-sized image. Always consumes the
/// same amount of randomness, even when the crop covers the whole image.
pub fn crop_origin(resize: ImageSize, crop: ImageSize, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    if crop.width > resize.width || crop.height > resize.height {
        return Err(Error::config(format!("crop {crop} is larger than resize {resize}")));
    }
    let x = rng.gen_range(0..=(resize.width - crop.width) as u64) as usize;
    let y = rng.gen_range(0..=(resize.height - crop.height) as u64) as usize;
    Ok((x, y))
}

pub fn crop(img: &FeatureMap<f32>, origin: (usize, usize), size: ImageSize) -> Result<FeatureMap<f32>> {
    let (c, h, w) = img.dims();
    let (x0, y0) = origin;
    if x0 + size.width > w || y0 + size.height > h {
        return Err(Error::contract(format!("crop {size} at {origin:?} leaves a {w}x{h} image")));
    }
    Ok(FeatureMap::from_fn(c, size.height, size.width, |ch, y, x| img.get(ch, y0 + y, x0 + x)))
}

/// Bilinear resize to `resize`, then a uniformly placed `crop`.
pub fn augment(img: &FeatureMap<f32>, resize: ImageSize, crop_size: ImageSize, rng: &mut ChaCha8Rng) -> Result<FeatureMap<f32>> {
    let origin = crop_origin(resize, crop_size, rng)?;
    crop(&resize_bilinear(img, resize), origin, crop_size)
}
