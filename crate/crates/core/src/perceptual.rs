//! Frozen VGG-19 feature taps and the training losses built on them.
//!
//! The extractor runs the VGG-19 convolutional trunk up to `relu4_1`:
//!
//! ```text
//! conv1_1 3->64   relu  [relu1_1]   conv1_2 64->64   relu  pool
//! conv2_1 64->128 relu  [relu2_1]   conv2_2 128->128 relu  pool
//! conv3_1 128->256 relu [relu3_1]   conv3_2..conv3_4 256->256 relu  pool
//! conv4_1 256->512 relu [relu4_1]
//! ```
//!
//! Inputs in `[0, 1]` are normalized with the ImageNet channel statistics
//! before the first convolution. Weight files use the checkpoint container
//! with kind `"vgg19"` and records `conv1_1.weight` (`[64, 3, 3, 3]`),
//! `conv1_1.bias` (`[64]`), and so on for every layer above.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flow::NORM_EPS;
use crate::nets::checkpoint::{Container, KIND_VGG19};
use crate::tensor::{Element, FeatureMap, Tensor};

pub const TAP_NAMES: [&str; 4] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1"];
pub const TAP_CHANNELS: [usize; 4] = [64, 128, 256, 512];
/// Taps compared by the style loss.
pub const STYLE_TAPS: usize = 3;
/// Tap compared by the content loss.
pub const CONTENT_TAP: usize = 3;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy)]
enum Layer {
    Conv { name: &'static str, inputs: usize, outputs: usize, tap: Option<usize> },
    Pool,
}

const LAYERS: [Layer; 13] = [
    Layer::Conv { name: "conv1_1", inputs: 3, outputs: 64, tap: Some(0) },
    Layer::Conv { name: "conv1_2", inputs: 64, outputs: 64, tap: None },
    Layer::Pool,
    Layer::Conv { name: "conv2_1", inputs: 64, outputs: 128, tap: Some(1) },
    Layer::Conv { name: "conv2_2", inputs: 128, outputs: 128, tap: None },
    Layer::Pool,
    Layer::Conv { name: "conv3_1", inputs: 128, outputs: 256, tap: Some(2) },
    Layer::Conv { name: "conv3_2", inputs: 256, outputs: 256, tap: None },
    Layer::Conv { name: "conv3_3", inputs: 256, outputs: 256, tap: None },
    Layer::Conv { name: "conv3_4", inputs: 256, outputs: 256, tap: None },
    Layer::Pool,
    Layer::Conv { name: "conv4_1", inputs: 256, outputs: 512, tap: Some(3) },
    Layer::Pool,
];

/// Number of layers actually evaluated; the trailing pool is never needed.
const EVALUATED: usize = 12;

/// Where extractor weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Backend {
    /// Same topology with He-uniform weights drawn from `seed`.
    SeededStandin { seed: u64 },
    /// Weights read from a `"vgg19"` container file.
    PretrainedVgg19 { path: PathBuf },
}

impl Backend {
    pub fn id(&self) -> &'static str {
        match self {
            Backend::SeededStandin { .. } => "seeded-standin",
            Backend::PretrainedVgg19 { .. } => "pretrained-vgg19",
        }
    }

    pub fn build<T: Element>(&self) -> Result<Vgg19<T>> {
        match self {
            Backend::SeededStandin { seed } => Ok(Vgg19::standin(*seed).cast()),
            Backend::PretrainedVgg19 { path } => Ok(Vgg19::load(path)?.cast()),
        }
    }
}

/// Frozen VGG-19 trunk up to `relu4_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vgg19<T = f32> {
    backend: &'static str,
    /// `(name, weight, bias)` in layer order.
    convs: Vec<(String, Arc<Tensor<T>>, Arc<Tensor<T>>)>,
}

fn conv_layers() -> impl Iterator<Item = (&'static str, usize, usize)> {
    LAYERS.iter().filter_map(|l| match *l {
        Layer::Conv { name, inputs, outputs, .. } => Some((name, inputs, outputs)),
        Layer::Pool => None,
    })
}

impl Vgg19<f32> {
    pub fn standin(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = conv_layers()
            .map(|(name, inputs, outputs)| {
                let fan_in = inputs * 9;
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = (0..outputs * fan_in)
                    .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32)
                    .collect();
                (
                    name.to_string(),
                    Arc::new(Tensor::from_parts(vec![outputs, inputs, 3, 3], weight)),
                    Arc::new(Tensor::zeros(vec![outputs])),
                )
            })
            .collect();
        Vgg19 {
            backend: "seeded-standin",
            convs,
        }
    }

    /// Reads a `"vgg19"` weight container, checking every expected record.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let container = Container::load(path)?;
        Self::from_container(container)
            .map_err(|e| Error::config(format!("VGG-19 weights {}: {e}", path.display())))
    }

    pub fn from_container(container: Container) -> Result<Self> {
        if container.kind != KIND_VGG19 {
            return Err(Error::checkpoint(
                "kind",
                format!("expected a vgg19 weight file, found {:?}", container.kind),
            ));
        }
        let mut records: std::collections::HashMap<String, Tensor<f32>> =
            container.records.into_iter().collect();
        let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor<f32>> {
            let t = records
                .remove(&name)
                .ok_or_else(|| Error::checkpoint(name.as_str(), "missing record"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::checkpoint(
                    name.as_str(),
                    format!("shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::checkpoint(name.as_str(), "non-finite values"));
            }
            Ok(t)
        };
        let mut convs = Vec::new();
        for (name, inputs, outputs) in conv_layers() {
            let weight = take(format!("{name}.weight"), vec![outputs, inputs, 3, 3])?;
            let bias = take(format!("{name}.bias"), vec![outputs])?;
            convs.push((name.to_string(), Arc::new(weight), Arc::new(bias)));
        }
        Ok(Vgg19 {
            backend: "pretrained-vgg19",
            convs,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut records = Vec::new();
        for (name, w, b) in &self.convs {
            records.push((format!("{name}.weight"), (**w).clone()));
            records.push((format!("{name}.bias"), (**b).clone()));
        }
        Container {
            kind: KIND_VGG19.to_string(),
            config: None,
            records,
            train_state: None,
        }
    }
}

impl<T: Element> Vgg19<T> {
    pub fn backend_id(&self) -> &'static str {
        self.backend
    }

    pub fn cast<U: Element>(&self) -> Vgg19<U> {
        Vgg19 {
            backend: self.backend,
            convs: self
                .convs
                .iter()
                .map(|(n, w, b)| (n.clone(), Arc::new(w.cast()), Arc::new(b.cast())))
                .collect(),
        }
    }

    /// Binds the weights as constants and returns the four tap handles.
    pub fn taps_var(&self, g: &Graph<T>, image: Var) -> [Var; 4] {
        let shape = g.shape(image);
        assert_eq!(shape.first(), Some(&3), "VGG input must have 3 channels");
        let scale = g.constant(Tensor::from_parts(
            vec![3],
            IMAGENET_STD.iter().map(|s| T::of(1.0 / s)).collect(),
        ));
        let shift = g.constant(Tensor::from_parts(
            vec![3],
            IMAGENET_MEAN
                .iter()
                .zip(IMAGENET_STD)
                .map(|(m, s)| T::of(-m / s))
                .collect(),
        ));
        let mut h = g.channel_affine(image, scale, shift);
        let mut taps = [image; 4];
        let mut convs = self.convs.iter();
        for layer in &LAYERS[..EVALUATED] {
            match *layer {
                Layer::Conv { tap, .. } => {
                    let (_, w, b) = convs.next().expect("one weight set per conv");
                    let w = g.constant_shared(Arc::clone(w));
                    let b = g.constant_shared(Arc::clone(b));
                    h = g.relu(g.conv2d(h, w, b, 1, 1));
                    if let Some(i) = tap {
                        taps[i] = h;
                    }
                }
                Layer::Pool => h = g.max_pool2(h),
            }
        }
        taps
    }

    /// Smallest input side for which every tap is at least 1×1.
    pub const MIN_SIDE: usize = 8;
}

/// The four feature taps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTaps<T = f32> {
    pub backend: &'static str,
    pub maps: [FeatureMap<T>; 4],
}

impl<T: Element> FeatureTaps<T> {
    pub fn get(&self, name: &str) -> Option<&FeatureMap<T>> {
        TAP_NAMES.iter().position(|n| *n == name).map(|i| &self.maps[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &FeatureMap<T>)> {
        TAP_NAMES.iter().copied().zip(self.maps.iter())
    }
}

fn check_image<T: Element>(image: &FeatureMap<T>) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::contract(format!(
            "feature extraction needs a 3-channel image, got {}",
            image.channels()
        )));
    }
    if image.height() < Vgg19::<T>::MIN_SIDE || image.width() < Vgg19::<T>::MIN_SIDE {
        return Err(Error::contract(format!(
            "feature extraction needs at least {0}x{0} pixels, got {1}x{2}",
            Vgg19::<T>::MIN_SIDE,
            image.height(),
            image.width()
        )));
    }
    if image.data().iter().any(|v| *v < T::zero() || *v > T::one()) {
        return Err(Error::contract("feature extraction needs pixels in [0, 1]"));
    }
    Ok(())
}

pub fn extract_features<T: Element>(image: &FeatureMap<T>, vgg: &Vgg19<T>) -> Result<FeatureTaps<T>> {
    check_image(image)?;
    let g = Graph::inference();
    let x = g.constant(image.to_tensor());
    let taps = vgg.taps_var(&g, x);
    let maps = taps.map(|t| FeatureMap::from_tensor((*g.value(t)).clone()).expect("taps are [C, H, W]"));
    Ok(FeatureTaps {
        backend: vgg.backend_id(),
        maps,
    })
}

/// Per-channel standardization: `(f - mean) / sqrt(var + eps)`.
pub fn channel_norm<T: Element>(f: &FeatureMap<T>) -> FeatureMap<T> {
    let stats = f.channel_stats();
    let plane = f.plane_len();
    let mut out = f.clone();
    for (c, (mean, std)) in stats.into_iter().enumerate() {
        let denom = (std * std + NORM_EPS).sqrt();
        for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
            *v = T::of((v.as_f64() - mean) / denom);
        }
    }
    out
}

/// Euclidean distance between channel-normalized maps of equal shape.
pub fn content_distance<T: Element>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!(
            "content maps differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (na, nb) = (channel_norm(a), channel_norm(b));
    Ok(na
        .data()
        .iter()
        .zip(nb.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt())
}

pub fn content_loss<T: Element>(output: &FeatureMap<T>, source: &FeatureMap<T>, vgg: &Vgg19<T>) -> Result<f64> {
    if output.dims() != source.dims() {
        return Err(Error::contract("content loss needs images of equal size"));
    }
    let a = extract_features(output, vgg)?;
    let b = extract_features(source, vgg)?;
    content_distance(&a.maps[CONTENT_TAP], &b.maps[CONTENT_TAP])
}

/// Per-channel spatial mean and population standard deviation of a tap.
#[derive(Debug, Clone, PartialEq)]
pub struct TapStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TapStats {
    pub fn of<T: Element>(f: &FeatureMap<T>) -> Self {
        let (mean, std) = f.channel_stats().into_iter().unzip();
        TapStats { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Channels whose means already agree best between output and target.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSelection {
    /// `|mean_out - mean_target|` per channel.
    pub energy: Vec<f64>,
    /// Channel indices sorted by ascending energy, ties by index.
    pub order: Vec<usize>,
    /// Number of leading entries of `order` that are selected.
    pub count: usize,
}

pub fn check_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::contract(format!("k must lie in (0, 1], got {k}")));
    }
    Ok(())
}

/// `max(1, floor(k * n))`.
pub fn selection_size(k: f64, n: usize) -> usize {
    ((k * n as f64).floor() as usize).clamp(1, n.max(1))
}

impl ChannelSelection {
    pub fn from_energy(energy: Vec<f64>, k: f64) -> Result<Self> {
        check_k(k)?;
        if energy.is_empty() {
            return Err(Error::contract("channel selection over zero channels"));
        }
        if energy.iter().any(|e| !e.is_finite()) {
            return Err(Error::non_finite("channel selection energy"));
        }
        let mut order: Vec<usize> = (0..energy.len()).collect();
        // sort_by is stable, so equal energies keep index order.
        order.sort_by(|&a, &b| energy[a].total_cmp(&energy[b]));
        let count = selection_size(k, energy.len());
        Ok(ChannelSelection { energy, order, count })
    }

    pub fn between(output: &TapStats, target: &TapStats, k: f64) -> Result<Self> {
        if output.channels() != target.channels() {
            return Err(Error::contract(format!(
                "tap channel counts differ: {} vs {}",
                output.channels(),
                target.channels()
            )));
        }
        let energy = output
            .mean
            .iter()
            .zip(&target.mean)
            .map(|(a, b)| (a - b).abs())
            .collect();
        Self::from_energy(energy, k)
    }

    pub fn chosen(&self) -> &[usize] {
        &self.order[..self.count]
    }
}

fn check_tap_lists(output: &[TapStats], target: &[TapStats]) -> Result<()> {
    if output.len() != target.len() {
        return Err(Error::contract(format!(
            "style loss over {} output taps but {} target taps",
            output.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Aligned-style loss from precomputed tap statistics.
pub fn aligned_style_from_stats(output: &[TapStats], target: &[TapStats], k: f64) -> Result<f64> {
    check_k(k)?;
    check_tap_lists(output, target)?;
    let mut total = 0.0;
    for (o, t) in output.iter().zip(target) {
        let sel = ChannelSelection::between(o, t, k)?;
        for &j in sel.chosen() {
            total += (o.mean[j] - t.mean[j]).abs() + (o.std[j] - t.std[j]).abs();
        }
    }
    Ok(total)
}

/// Mean and standard deviation mismatch summed over every channel of every
/// tap.
pub fn vanilla_style_from_stats(output: &[TapStats], target: &[TapStats]) -> Result<f64> {
    check_tap_lists(output, target)?;
    let mut total = 0.0;
    for (o, t) in output.iter().zip(target) {
        if o.channels() != t.channels() {
            return Err(Error::contract("tap channel counts differ"));
        }
        let dm: f64 = o.mean.iter().zip(&t.mean).map(|(a, b)| (a - b).abs()).sum();
        let ds: f64 = o.std.iter().zip(&t.std).map(|(a, b)| (a - b).abs()).sum();
        total += dm + ds;
    }
    Ok(total)
}

fn style_stats<T: Element>(taps: &FeatureTaps<T>) -> Vec<TapStats> {
    taps.maps[..STYLE_TAPS].iter().map(TapStats::of).collect()
}

pub fn aligned_style_loss<T: Element>(
    output: &FeatureMap<T>,
    target: &FeatureMap<T>,
    k: f64,
    vgg: &Vgg19<T>,
) -> Result<f64> {
    check_k(k)?;
    let a = style_stats(&extract_features(output, vgg)?);
    let b = style_stats(&extract_features(target, vgg)?);
    aligned_style_from_stats(&a, &b, k)
}

pub fn vanilla_style_loss<T: Element>(output: &FeatureMap<T>, target: &FeatureMap<T>, vgg: &Vgg19<T>) -> Result<f64> {
    let a = style_stats(&extract_features(output, vgg)?);
    let b = style_stats(&extract_features(target, vgg)?);
    vanilla_style_from_stats(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Style weight.
    pub lambda: f64,
    /// Fraction of channels kept by the aligned-style loss.
    pub k: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.1, k: 0.8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        check_k(self.k).map_err(|_| Error::config(format!("k must lie in (0, 1], got {}", self.k)))
    }

    pub fn combine(&self, content: f64, style: f64) -> f64 {
        content + self.lambda * style
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

/// Everything the losses need from the source and target images, which do
/// not depend on model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets<T = f32> {
    /// Channel-normalized `relu4_1` of the source.
    pub content: FeatureMap<T>,
    /// Style-tap statistics of the target.
    pub style: Vec<TapStats>,
}

impl<T: Element> LossTargets<T> {
    pub fn new(source: &FeatureMap<T>, target: &FeatureMap<T>, vgg: &Vgg19<T>) -> Result<Self> {
        let s = extract_features(source, vgg)?;
        let t = extract_features(target, vgg)?;
        Ok(LossTargets {
            content: channel_norm(&s.maps[CONTENT_TAP]),
            style: style_stats(&t),
        })
    }
}

/// `L = L_c + lambda * L_as` for a translated image.
pub fn total_loss<T: Element>(
    output: &FeatureMap<T>,
    source: &FeatureMap<T>,
    target: &FeatureMap<T>,
    cfg: &LossConfig,
    vgg: &Vgg19<T>,
) -> Result<LossParts> {
    cfg.validate()?;
    if output.dims() != source.dims() {
        return Err(Error::contract("output and source must have equal size"));
    }
    let o = extract_features(output, vgg)?;
    let s = extract_features(source, vgg)?;
    let t = extract_features(target, vgg)?;
    let content = content_distance(&o.maps[CONTENT_TAP], &s.maps[CONTENT_TAP])?;
    let style = aligned_style_from_stats(&style_stats(&o), &style_stats(&t), cfg.k)?;
    Ok(LossParts {
        total: cfg.combine(content, style),
        content,
        style,
    })
}

/// Loss nodes recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub content: Var,
    pub style: Var,
}

pub fn content_loss_var<T: Element>(g: &Graph<T>, tap: Var, target_normalized: &FeatureMap<T>) -> Var {
    let normalized = g.instance_norm(tap, T::of(NORM_EPS));
    let target = g.constant(target_normalized.to_tensor());
    g.l2_norm(g.sub(normalized, target))
}

/// Aligned-style loss of graph taps against fixed target statistics. The
/// channel selection is computed from current values and held constant.
pub fn aligned_style_loss_var<T: Element>(g: &Graph<T>, taps: &[Var], target: &[TapStats], k: f64) -> Result<Var> {
    check_k(k)?;
    if taps.len() != target.len() {
        return Err(Error::contract("style taps and target statistics differ in count"));
    }
    let mut terms = Vec::with_capacity(taps.len());
    for (&tap, t) in taps.iter().zip(target) {
        let mean = g.channel_mean(tap);
        let std = g.channel_std(tap);
        let out_stats = TapStats {
            mean: g.value(mean).data().iter().map(|v| v.as_f64()).collect(),
            std: g.value(std).data().iter().map(|v| v.as_f64()).collect(),
        };
        let sel = ChannelSelection::between(&out_stats, t, k)?;
        let chosen = sel.chosen();
        let t_mean = g.constant(Tensor::from_parts(
            vec![chosen.len()],
            chosen.iter().map(|&j| T::of(t.mean[j])).collect(),
        ));
        let t_std = g.constant(Tensor::from_parts(
            vec![chosen.len()],
            chosen.iter().map(|&j| T::of(t.std[j])).collect(),
        ));
        let dm = g.sum(g.abs(g.sub(g.gather(mean, chosen), t_mean)));
        let ds = g.sum(g.abs(g.sub(g.gather(std, chosen), t_std)));
        terms.push(g.add(dm, ds));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(total)
}

/// Records the full objective for a translated-image node.
pub fn total_loss_var<T: Element>(
    g: &Graph<T>,
    output: Var,
    targets: &LossTargets<T>,
    cfg: &LossConfig,
    vgg: &Vgg19<T>,
) -> Result<LossVars> {
    cfg.validate()?;
    let taps = vgg.taps_var(g, output);
    let content_shape = g.shape(taps[CONTENT_TAP]);
    let (c, h, w) = targets.content.dims();
    if content_shape != [c, h, w] {
        return Err(Error::contract(format!(
            "output relu4_1 is {content_shape:?}, source gives {:?}",
            [c, h, w]
        )));
    }
    let content = content_loss_var(g, taps[CONTENT_TAP], &targets.content);
    let style = aligned_style_loss_var(g, &taps[..STYLE_TAPS], &targets.style, cfg.k)?;
    let total = g.add(content, g.affine_const(style, T::of(cfg.lambda), T::zero()));
    Ok(LossVars { total, content, style })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, h: usize, w: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(3, h, w, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn tap_shapes_follow_the_trunk() {
        let vgg = Vgg19::standin(1).cast::<f64>();
        let taps = extract_features(&image(0, 16, 24), &vgg).unwrap();
        let dims: Vec<_> = taps.maps.iter().map(|m| m.dims()).collect();
        assert_eq!(dims, vec![(64, 16, 24), (128, 8, 12), (256, 4, 6), (512, 2, 3)]);
        assert_eq!(taps.backend, "seeded-standin");
    }

    #[test]
    fn standin_seeds_differ() {
        let x = image(3, 8, 8);
        let a = extract_features(&x, &Vgg19::standin(1).cast()).unwrap();
        let b = extract_features(&x, &Vgg19::standin(2).cast()).unwrap();
        assert_ne!(a.maps[0], b.maps[0]);
    }

    #[test]
    fn channel_norm_is_affine_invariant() {
        let f = image(5, 4, 4);
        let g = f.map(|v| 3.0 * v - 2.0);
        assert!(channel_norm(&f).max_abs_diff(&channel_norm(&g)) < 1e-3);
        let constant = FeatureMap::filled(2, 3, 3, 7.0f64);
        assert!(channel_norm(&constant).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn selection_prefixes_are_nested() {
        let sel = ChannelSelection::from_energy(vec![0.9, 0.1, 0.5, 0.1, 0.7], 0.8).unwrap();
        assert_eq!(sel.order, vec![1, 3, 2, 4, 0]);
        assert_eq!(sel.chosen(), &[1, 3, 2, 4]);
        assert_eq!(selection_size(0.01, 5), 1);
        assert_eq!(selection_size(1.0, 5), 5);
        assert!(ChannelSelection::from_energy(vec![1.0], 0.0).is_err());
        assert!(ChannelSelection::from_energy(vec![1.0], 1.5).is_err());
    }

    #[test]
    fn graph_losses_match_direct_evaluation() {
        let vgg = Vgg19::standin(4).cast::<f64>();
        let (x, out, y) = (image(1, 16, 16), image(2, 16, 16), image(3, 16, 16));
        let cfg = LossConfig::default();
        let direct = total_loss(&out, &x, &y, &cfg, &vgg).unwrap();
        let targets = LossTargets::new(&x, &y, &vgg).unwrap();
        let g = Graph::new();
        let o = g.param(out.to_tensor());
        let vars = total_loss_var(&g, o, &targets, &cfg, &vgg).unwrap();
        assert!((g.scalar(vars.content) - direct.content).abs() < 1e-9 * direct.content.max(1.0));
        assert!((g.scalar(vars.style) - direct.style).abs() < 1e-9 * direct.style.max(1.0));
        assert!((g.scalar(vars.total) - direct.total).abs() < 1e-9 * direct.total.max(1.0));
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.hflow");
        let vgg = Vgg19::standin(8);
        vgg.to_container().save(&path).unwrap();
        let loaded = Vgg19::load(&path).unwrap();
        assert_eq!(loaded.convs, vgg.convs);
        assert_eq!(loaded.backend_id(), "pretrained-vgg19");

        let mut c = vgg.to_container();
        c.records.retain(|(n, _)| n != "conv3_2.weight");
        c.save(&path).unwrap();
        let err = Vgg19::load(&path).unwrap_err().to_string();
        assert!(err.contains("conv3_2.weight"), "{err}");

        let missing = Backend::PretrainedVgg19 { path: dir.path().join("absent.hflow") };
        assert!(missing.build::<f32>().is_err());
    }
}
