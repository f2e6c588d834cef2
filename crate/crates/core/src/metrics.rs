//! Image quality metrics: SSIM, PSNR and a checkerboard spectral probe.
//!
//! All metrics work on [`FeatureMap`] images with values in `[0, 1]` and
//! compute in `f64`.

use serde_json::json;

use crate::error::{Error, Result};
use crate::tensor::{Element, FeatureMap};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Textual form of the PSNR of identical images.
pub const PSNR_INF: &str = "inf";

fn check_pair<T: Element>(a: &FeatureMap<T>, b: &FeatureMap<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!(
            "{what} needs equal dimensions, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Normalized 1-D Gaussian of `size` taps centred on the middle tap.
fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = kernel.iter().enumerate().map(|(i, c)| c * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = kernel.iter().enumerate().map(|(i, c)| c * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity, averaged over channels.
///
/// Uses an 11×11 Gaussian window (σ = 1.5) over valid positions only. When
/// a side is shorter than 11 pixels the window shrinks to that side.
pub fn ssim<T: Element>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    check_pair(a, b, "ssim")?;
    let (c, h, w) = a.dims();
    let kernel = gaussian(SSIM_WINDOW.min(h).min(w), SSIM_SIGMA);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.channel(ch).iter().map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.channel(ch).iter().map(|v| v.as_f64()).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &kernel);
        let mu_b = filter_valid(&pb, h, w, &kernel);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &kernel);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &kernel);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &kernel);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
        }
        total += sum / n as f64;
    }
    Ok(total / c as f64)
}

pub fn mse<T: Element>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    check_pair(a, b, "mse")?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB for data range 1. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr<T: Element>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Luma plane: the image itself for one channel, BT.601 weights for three.
pub fn grayscale<T: Element>(img: &FeatureMap<T>) -> Result<Vec<f64>> {
    match img.channels() {
        1 => Ok(img.data().iter().map(|v| v.as_f64()).collect()),
        3 => Ok((0..img.plane_len())
            .map(|i| {
                0.299 * img.channel(0)[i].as_f64()
                    + 0.587 * img.channel(1)[i].as_f64()
                    + 0.114 * img.channel(2)[i].as_f64()
            })
            .collect()),
        c => Err(Error::contract(format!("grayscale needs 1 or 3 channels, got {c}"))),
    }
}

/// Fraction of the non-DC spectral power of the luma plane that sits on the
/// Nyquist row or Nyquist column of its 2-D DFT.
///
/// Evaluated without a transform: the Nyquist row of the DFT is the 1-D DFT
/// of `sum_y (-1)^y f(y, x)`, so its power follows from Parseval, and
/// likewise for the column. Constant images give 0.
pub fn checkerboard_energy<T: Element>(img: &FeatureMap<T>) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!(
            "checkerboard probe needs even dimensions, got {h}x{w}"
        )));
    }
    let f = grayscale(img)?;
    let sign = |i: usize| if i % 2 == 0 { 1.0 } else { -1.0 };
    let mut col_alt = vec![0.0; w]; // sum_y (-1)^y f(y, x)
    let mut row_alt = vec![0.0; h]; // sum_x (-1)^x f(y, x)
    let (mut total, mut sq, mut both) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = f[y * w + x];
            col_alt[x] += sign(y) * v;
            row_alt[y] += sign(x) * v;
            both += sign(x + y) * v;
            total += v;
            sq += v * v;
        }
    }
    let (hf, wf) = (h as f64, w as f64);
    let ac = hf * wf * sq - total * total;
    if ac <= 1e-12 * hf * wf * sq.max(f64::MIN_POSITIVE) {
        return Ok(0.0);
    }
    let nyquist_row = wf * col_alt.iter().map(|v| v * v).sum::<f64>();
    let nyquist_col = hf * row_alt.iter().map(|v| v * v).sum::<f64>();
    let ratio = (nyquist_row + nyquist_col - both * both) / ac;
    Ok(ratio.clamp(0.0, 1.0))
}

/// Metrics of a candidate image against a reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub ssim: f64,
    /// `f64::INFINITY` for identical images.
    pub psnr: f64,
    /// Checkerboard ratio of the candidate, or `None` for odd dimensions.
    pub checkerboard: Option<f64>,
}

impl MetricReport {
    pub fn compute<T: Element>(candidate: &FeatureMap<T>, reference: &FeatureMap<T>) -> Result<Self> {
        Ok(MetricReport {
            ssim: ssim(candidate, reference)?,
            psnr: psnr(candidate, reference)?,
            checkerboard: checkerboard_energy(candidate).ok(),
        })
    }

    /// JSON object with PSNR written as `"inf"` when infinite.
    pub fn to_json(&self) -> serde_json::Value {
        let psnr = if self.psnr.is_infinite() {
            json!(PSNR_INF)
        } else {
            json!(self.psnr)
        };
        json!({ "ssim": self.ssim, "psnr": psnr, "checkerboard": self.checkerboard })
    }
}
