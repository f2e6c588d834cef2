//! Raw forward/backward kernels over `[C, H, W]` buffers. The autodiff layer
//! wraps these; nothing here allocates graph state.

use crate::tensor::{gemm, Element};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `x` into a `[C*k*k, Ho*Wo]` patch matrix with zero padding.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let mut cols = vec![T::zero(); g.patch_len() * plane];
    let k = g.kernel;
    for c in 0..g.in_channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        // ix = ox + kx - pad must lie in [0, width)
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (g.width + g.pad).saturating_sub(kx).min(wo);
                        if lo < hi {
                            let start = lo + kx - g.pad;
                            dst_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let mut x = vec![T::zero(); g.in_channels * g.height * g.width];
    let k = g.kernel;
    for c in 0..g.in_channels {
        let dst = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `weight` is `[O, C, k, k]`, `bias` is `[O]`. Returns `[O, Ho, Wo]`.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let cols = im2col(x, g);
    let plane = g.out_plane();
    let mut out = vec![T::zero(); out_channels * plane];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(plane).enumerate() {
            row.fill(b[o]);
        }
    }
    gemm(
        false,
        false,
        out_channels,
        g.patch_len(),
        plane,
        weight,
        &cols,
        T::one(),
        &mut out,
    );
    out
}

pub fn conv2d_backward_input<T: Element>(
    grad_out: &[T],
    weight: &[T],
    out_channels: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let plane = g.out_plane();
    let mut dcols = vec![T::zero(); g.patch_len() * plane];
    gemm(
        true,
        false,
        g.patch_len(),
        out_channels,
        plane,
        weight,
        grad_out,
        T::zero(),
        &mut dcols,
    );
    col2im(&dcols, g)
}

/// Returns `(d_weight, d_bias)`.
pub fn conv2d_backward_params<T: Element>(
    grad_out: &[T],
    x: &[T],
    out_channels: usize,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let plane = g.out_plane();
    let mut dw = vec![T::zero(); out_channels * g.patch_len()];
    gemm(
        false,
        true,
        out_channels,
        plane,
        g.patch_len(),
        grad_out,
        &cols,
        T::zero(),
        &mut dw,
    );
    let db = grad_out
        .chunks(plane)
        .map(|row| row.iter().copied().sum())
        .collect();
    (dw, db)
}

/// 2×2 stride-2 max pooling (odd trailing rows/columns are dropped).
/// Returns the pooled map and, per output element, the flat input index
/// that won (first maximum in row-major window order).
pub fn max_pool2_forward<T: Element>(
    x: &[T],
    channels: usize,
    height: usize,
    width: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(channels * ho * wo);
    let mut arg = Vec::with_capacity(channels * ho * wo);
    for c in 0..channels {
        let base = c * height * width;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * width + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * width + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Element>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

/// Per-channel spatial mean and population variance.
pub fn channel_moments<T: Element>(x: &[T], channels: usize) -> Vec<(T, T)> {
    let plane = x.len() / channels;
    let n = T::of(plane as f64);
    x.chunks(plane)
        .map(|p| {
            let mean = p.iter().copied().sum::<T>() / n;
            let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            (mean, var)
        })
        .collect()
}

/// Instance normalization without affine terms:
/// `(x - mean) / sqrt(var + eps)` per channel. Returns the normalized map
/// and the per-channel inverse standard deviation.
pub fn instance_norm_forward<T: Element>(x: &[T], channels: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let plane = x.len() / channels;
    let moments = channel_moments(x, channels);
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(channels);
    for (c, &(mean, var)) in moments.iter().enumerate() {
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        out.extend(x[c * plane..(c + 1) * plane].iter().map(|&v| (v - mean) * inv));
    }
    (out, inv_std)
}

/// Gradient of [`instance_norm_forward`] given its output `xhat`:
/// `dx = inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))`.
pub fn instance_norm_backward<T: Element>(grad_out: &[T], xhat: &[T], inv_std: &[T]) -> Vec<T> {
    let channels = inv_std.len();
    let plane = xhat.len() / channels;
    let n = T::of(plane as f64);
    let mut dx = Vec::with_capacity(xhat.len());
    for c in 0..channels {
        let dy = &grad_out[c * plane..(c + 1) * plane];
        let xh = &xhat[c * plane..(c + 1) * plane];
        let mean_dy = dy.iter().copied().sum::<T>() / n;
        let mean_dy_xh = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        dx.extend(
            dy.iter()
                .zip(xh)
                .map(|(&g, &h)| inv_std[c] * (g - mean_dy - h * mean_dy_xh)),
        );
    }
    dx
}
