//! Hierarchical coupling layers.
//!
//! A block expands its `C`-channel input `x` through the Affine-Net into a
//! non-negative `nC`-channel tensor `a`, splits it into `a_1..a_n`, and
//! emits `y = concat(h_1..h_n)` with `h_1 = x - a_1`, `h_i = h_{i-1} - a_i`.
//! The reversed pass takes `y` (optionally restyled by AdaIN), restores
//! `h_n = y_n + a_n`, and fuses downwards with learnable weights:
//! `h_i = alpha_i * (y_i + a_i) + (1 - alpha_i) * h_{i+1}`. With every
//! `alpha_i = 1` and no restyling this returns `x` exactly.
//!
//! Every operation has a graph-level form (`*_var`) used for training and a
//! [`FeatureMap`] form for inference; the latter are thin wrappers over the
//! former so both paths share one implementation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{
    affine_net_var, AffineNet, BlockParams, BlockStyle, Conv, ModelParams, Params, StyleParams,
};
use crate::tensor::{Element, FeatureMap, Tensor};

/// Added to the variance under every normalization square root.
pub const NORM_EPS: f64 = 1e-5;

/// Style-Net trunk widths used by the preset variants.
pub const DEFAULT_STYLE_WIDTHS: [usize; 4] = [64, 128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Hf,
    HfPlus,
    HfPlusPlus,
    HfDagger,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Hf, Variant::HfPlus, Variant::HfPlusPlus, Variant::HfDagger];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hf => "HF",
            Variant::HfPlus => "HF+",
            Variant::HfPlusPlus => "HF++",
            Variant::HfDagger => "HF†",
        }
    }

    pub fn expansions(self) -> &'static [usize] {
        match self {
            Variant::Hf => &[10, 4],
            Variant::HfPlus => &[4, 5, 2],
            Variant::HfPlusPlus => &[10, 4, 4],
            Variant::HfDagger => &[10, 4, 4, 4],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts the display names plus ASCII spellings of the dagger variant
    /// (`HFdagger`, `HF-dagger`, `HFD`).
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hf" => Ok(Variant::Hf),
            "hf+" | "hfplus" => Ok(Variant::HfPlus),
            "hf++" | "hfplusplus" => Ok(Variant::HfPlusPlus),
            "hf†" | "hfdagger" | "hf-dagger" | "hfd" => Ok(Variant::HfDagger),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected HF, HF+, HF++ or HF†)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub input_channels: usize,
    pub expansion: usize,
}

impl BlockSpec {
    pub fn new(input_channels: usize, expansion: usize) -> Result<Self> {
        if input_channels == 0 {
            return Err(Error::config("block input channels must be positive"));
        }
        if expansion < 2 {
            return Err(Error::config(format!(
                "expansion rate must be at least 2, got {expansion}"
            )));
        }
        Ok(BlockSpec {
            input_channels,
            expansion,
        })
    }

    pub fn output_channels(&self) -> usize {
        self.input_channels * self.expansion
    }

    /// Number of learnable fusion weights (`n - 1`).
    pub fn fusion_steps(&self) -> usize {
        self.expansion - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub image_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub style_widths: Vec<usize>,
}

impl ModelConfig {
    pub fn preset(variant: Variant) -> Self {
        Self::from_expansions(variant.name(), 3, variant.expansions(), &DEFAULT_STYLE_WIDTHS)
            .expect("preset variants are valid")
    }

    /// Two `n = 2` blocks and a narrow Style-Net; small enough for
    /// exhaustive finite-difference checks.
    pub fn mini() -> Self {
        Self::from_expansions("HF-mini", 3, &[2, 2], &[4, 8, 8, 8]).expect("mini config is valid")
    }

    /// Builds the channel chain from per-block expansion rates.
    pub fn from_expansions(
        name: &str,
        image_channels: usize,
        expansions: &[usize],
        style_widths: &[usize],
    ) -> Result<Self> {
        if expansions.is_empty() {
            return Err(Error::config("a model needs at least one block"));
        }
        let mut blocks = Vec::with_capacity(expansions.len());
        let mut channels = image_channels;
        for &n in expansions {
            let spec = BlockSpec::new(channels, n)?;
            channels = spec.output_channels();
            blocks.push(spec);
        }
        let config = ModelConfig {
            variant: name.to_string(),
            image_channels,
            blocks,
            style_widths: style_widths.to_vec(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels != 3 {
            return Err(Error::config(format!(
                "models take 3-channel images, config says {}",
                self.image_channels
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("a model needs at least one block"));
        }
        let mut channels = self.image_channels;
        for (b, spec) in self.blocks.iter().enumerate() {
            if spec.input_channels != channels {
                return Err(Error::config(format!(
                    "block {b} takes {} channels but receives {channels}",
                    spec.input_channels
                )));
            }
            if spec.expansion < 2 {
                return Err(Error::config(format!("block {b} expansion must be >= 2")));
            }
            channels = spec.output_channels();
        }
        if self.style_widths.is_empty() || self.style_widths.contains(&0) {
            return Err(Error::config("style widths must be a non-empty list of positive sizes"));
        }
        Ok(())
    }

    pub fn expansions(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.expansion).collect()
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(self.image_channels, |b| b.output_channels())
    }
}

/// How the reversed pass treats style statistics.
#[derive(Debug, Clone, Copy)]
pub enum Styling<'a, T> {
    /// Restyle every block output with its `(mu, sigma)` before splitting.
    Adain(&'a StyleParams<T>),
    /// Skip AdaIN entirely.
    Bypass,
}

/// How fusion weights are realized in the reversed pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    /// `alpha_i = logistic(theta_i)`, strictly inside `(0, 1)`.
    #[default]
    Learned,
    /// Debug override: every `alpha_i = 1`, which makes the reversed pass
    /// the exact inverse of the forward pass.
    ForceOne,
}

/// Affine splits `a_1..a_n` of one block.
#[derive(Debug)]
pub struct CacheEntry<T = f32> {
    splits: Vec<FeatureMap<T>>,
}

impl<T: Element> CacheEntry<T> {
    pub fn splits(&self) -> &[FeatureMap<T>] {
        &self.splits
    }
}

/// Every block's affine splits from one forward pass.
///
/// A cache belongs to the input that produced it and is consumed by the
/// reversed pass, so it cannot be replayed:
///
/// ```compile_fail
/// use hflow_core::flow::{model_forward, model_reverse, Fusion, ModelConfig, Styling, Variant};
/// use hflow_core::nets::init_params;
/// use hflow_core::FeatureMap;
///
/// let config = ModelConfig::preset(Variant::Hf);
/// let params = init_params(&config, 0);
/// let x = FeatureMap::<f32>::filled(3, 4, 4, 0.5);
/// let (y, cache) = model_forward(&x, &config, &params).unwrap();
/// let _ = model_reverse(&y, cache, Styling::Bypass, &config, &params, Fusion::Learned);
/// let _ = model_reverse(&y, cache, Styling::Bypass, &config, &params, Fusion::Learned);
/// ```
#[derive(Debug)]
pub struct AffineCache<T = f32> {
    entries: Vec<CacheEntry<T>>,
}

impl<T: Element> AffineCache<T> {
    pub fn entries(&self) -> &[CacheEntry<T>] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<CacheEntry<T>> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---- graph-level operations ------------------------------------------------

/// `sigma * (y - mean(y)) / sqrt(var(y) + eps) + mu`, per channel.
pub fn adain_var<T: Element>(g: &Graph<T>, y: Var, mu: Var, sigma: Var) -> Var {
    let normalized = g.instance_norm(y, T::of(NORM_EPS));
    g.channel_affine(normalized, sigma, mu)
}

/// Subtractive coupling of `x` against an `n·C`-channel affine tensor.
/// Returns `y` and the splits `a_1..a_n`.
pub fn couple_forward_var<T: Element>(g: &Graph<T>, x: Var, affine: Var, n: usize) -> (Var, Vec<Var>) {
    let c = g.shape(x)[0];
    let splits: Vec<Var> = (0..n).map(|i| g.narrow_channels(affine, i * c, c)).collect();
    let mut hs = Vec::with_capacity(n);
    let mut h = x;
    for &a in &splits {
        h = g.sub(h, a);
        hs.push(h);
    }
    (g.concat_channels(&hs), splits)
}

/// Additive coupling with fusion; `alphas` holds `n - 1` one-element nodes
/// where `alphas[i]` weights step `i + 1`.
pub fn couple_reverse_var<T: Element>(g: &Graph<T>, y: Var, splits: &[Var], alphas: &[Var]) -> Var {
    let n = splits.len();
    assert_eq!(alphas.len(), n - 1, "need n - 1 fusion weights");
    let c = g.shape(splits[0])[0];
    let ys: Vec<Var> = (0..n).map(|i| g.narrow_channels(y, i * c, c)).collect();
    let mut h = g.add(ys[n - 1], splits[n - 1]);
    for i in (0..n - 1).rev() {
        let restored = g.add(ys[i], splits[i]);
        let keep = g.affine_const(alphas[i], -T::one(), T::one());
        let a = g.mul_scalar(restored, alphas[i]);
        let b = g.mul_scalar(h, keep);
        h = g.add(a, b);
    }
    h
}

/// Realized fusion weights of one block.
pub fn fusion_alphas_var<T: Element>(g: &Graph<T>, logits: Var, steps: usize, fusion: Fusion) -> Vec<Var> {
    match fusion {
        Fusion::Learned => {
            let alphas = g.sigmoid(logits);
            (0..steps).map(|i| g.pick(alphas, i)).collect()
        }
        Fusion::ForceOne => (0..steps).map(|_| g.constant(Tensor::scalar(T::one()))).collect(),
    }
}

pub fn block_forward_var<T: Element>(
    g: &Graph<T>,
    x: Var,
    spec: &BlockSpec,
    block: &BlockParams<Var>,
) -> (Var, Vec<Var>) {
    let affine = affine_net_var(g, x, &block.affine);
    couple_forward_var(g, x, affine, spec.expansion)
}

pub fn block_reverse_var<T: Element>(
    g: &Graph<T>,
    y: Var,
    splits: &[Var],
    style: Option<(Var, Var)>,
    spec: &BlockSpec,
    block: &BlockParams<Var>,
    fusion: Fusion,
) -> Var {
    let y = match style {
        Some((mu, sigma)) => adain_var(g, y, mu, sigma),
        None => y,
    };
    let alphas = fusion_alphas_var(g, block.fusion_logits, spec.fusion_steps(), fusion);
    couple_reverse_var(g, y, splits, &alphas)
}

/// Sequential forward pass; returns the output and per-block splits.
pub fn model_forward_var<T: Element>(
    g: &Graph<T>,
    x: Var,
    config: &ModelConfig,
    params: &ModelParams<Var>,
) -> (Var, Vec<Vec<Var>>) {
    let mut h = x;
    let mut cache = Vec::with_capacity(config.blocks.len());
    for (spec, block) in config.blocks.iter().zip(&params.blocks) {
        let (y, splits) = block_forward_var(g, h, spec, block);
        cache.push(splits);
        h = y;
    }
    (h, cache)
}

/// Reversed pass from the last block to the first. `style`, when given,
/// holds one `(mu, sigma)` pair per block.
pub fn model_reverse_var<T: Element>(
    g: &Graph<T>,
    y: Var,
    cache: &[Vec<Var>],
    style: Option<&[(Var, Var)]>,
    config: &ModelConfig,
    params: &ModelParams<Var>,
    fusion: Fusion,
) -> Var {
    let mut h = y;
    for b in (0..config.blocks.len()).rev() {
        let block_style = style.map(|s| s[b]);
        h = block_reverse_var(g, h, &cache[b], block_style, &config.blocks[b], &params.blocks[b], fusion);
    }
    h
}

// ---- feature-map API -------------------------------------------------------

fn bind_block<T: Element>(g: &Graph<T>, block: &BlockParams<Tensor<T>>) -> BlockParams<Var> {
    BlockParams {
        affine: AffineNet {
            convs: block.affine.convs.clone().map(|c| Conv {
                weight: g.constant(c.weight),
                bias: g.constant(c.bias),
            }),
        },
        fusion_logits: g.constant(block.fusion_logits.clone()),
    }
}

fn to_map<T: Element>(g: &Graph<T>, v: Var, context: impl FnOnce() -> String) -> Result<FeatureMap<T>> {
    let t = (*g.value(v)).clone();
    if !t.is_finite() {
        return Err(Error::non_finite(context()));
    }
    FeatureMap::from_tensor(t)
}

fn check_style_vectors<T: Element>(channels: usize, style: &BlockStyle<T>) -> Result<()> {
    if style.mu.len() != channels || style.sigma.len() != channels {
        return Err(Error::contract(format!(
            "AdaIN needs {channels} mu/sigma values, got ({}, {})",
            style.mu.len(),
            style.sigma.len()
        )));
    }
    if style.sigma.iter().any(|s| !(*s > T::zero())) {
        return Err(Error::contract("AdaIN sigma entries must be positive"));
    }
    Ok(())
}

/// Adaptive instance normalization of `x` to per-channel targets.
pub fn adain<T: Element>(x: &FeatureMap<T>, mu: &[T], sigma: &[T]) -> Result<FeatureMap<T>> {
    let style = BlockStyle {
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
    };
    check_style_vectors(x.channels(), &style)?;
    let g = Graph::inference();
    let xv = g.constant(x.to_tensor());
    let m = g.constant(Tensor::from_parts(vec![mu.len()], style.mu));
    let s = g.constant(Tensor::from_parts(vec![sigma.len()], style.sigma));
    let out = adain_var(&g, xv, m, s);
    to_map(&g, out, || "AdaIN output".into())
}

/// Subtractive coupling against a precomputed affine tensor. The affine
/// tensor must have `n · x.channels()` non-negative channels.
pub fn couple_forward<T: Element>(
    x: &FeatureMap<T>,
    affine: &FeatureMap<T>,
    n: usize,
) -> Result<(FeatureMap<T>, CacheEntry<T>)> {
    if n < 2 {
        return Err(Error::config(format!("expansion rate must be at least 2, got {n}")));
    }
    if affine.channels() != n * x.channels()
        || affine.height() != x.height()
        || affine.width() != x.width()
    {
        return Err(Error::config(format!(
            "affine tensor {:?} does not match {n} splits of {:?}",
            affine.dims(),
            x.dims()
        )));
    }
    if affine.data().iter().any(|v| *v < T::zero()) {
        return Err(Error::contract("affine splits must be non-negative"));
    }
    let g = Graph::inference();
    let xv = g.constant(x.to_tensor());
    let av = g.constant(affine.to_tensor());
    let (y, splits) = couple_forward_var(&g, xv, av, n);
    let y = to_map(&g, y, || "coupling output".into())?;
    let splits = splits
        .into_iter()
        .map(|s| to_map(&g, s, || "affine split".into()))
        .collect::<Result<_>>()?;
    Ok((y, CacheEntry { splits }))
}

fn check_entry<T: Element>(y: &FeatureMap<T>, entry: &CacheEntry<T>, block: Option<usize>) -> Result<usize> {
    let at = block.map(|b| format!(" at block {b}")).unwrap_or_default();
    let n = entry.splits.len();
    if n < 2 {
        return Err(Error::contract(format!("cache entry{at} holds {n} splits")));
    }
    let (c, h, w) = entry.splits[0].dims();
    if entry.splits.iter().any(|s| s.dims() != (c, h, w)) {
        return Err(Error::contract(format!("cache entry{at} has splits of mixed shape")));
    }
    if y.channels() != n * c || y.height() != h || y.width() != w {
        return Err(Error::contract(format!(
            "cache entry{at} ({n} splits of {c}x{h}x{w}) does not match input {:?}",
            y.dims()
        )));
    }
    Ok(c)
}

/// Additive coupling with explicit fusion weights (`alphas[i]` weights step
/// `i + 1`). Consumes the cache entry.
pub fn couple_reverse<T: Element>(
    y: &FeatureMap<T>,
    entry: CacheEntry<T>,
    style: Option<&BlockStyle<T>>,
    alphas: &[T],
) -> Result<FeatureMap<T>> {
    check_entry(y, &entry, None)?;
    let n = entry.splits.len();
    if alphas.len() != n - 1 {
        return Err(Error::contract(format!(
            "{n} splits need {} fusion weights, got {}",
            n - 1,
            alphas.len()
        )));
    }
    if let Some(s) = style {
        check_style_vectors(y.channels(), s)?;
    }
    let g = Graph::inference();
    let mut yv = g.constant(y.to_tensor());
    if let Some(s) = style {
        let mu = g.constant(Tensor::from_parts(vec![s.mu.len()], s.mu.clone()));
        let sigma = g.constant(Tensor::from_parts(vec![s.sigma.len()], s.sigma.clone()));
        yv = adain_var(&g, yv, mu, sigma);
    }
    let splits: Vec<Var> = entry.splits.into_iter().map(|s| g.constant(s.into_tensor())).collect();
    let alphas: Vec<Var> = alphas.iter().map(|&a| g.constant(Tensor::scalar(a))).collect();
    let out = couple_reverse_var(&g, yv, &splits, &alphas);
    to_map(&g, out, || "reversed coupling output".into())
}

/// One block's forward pass: Affine-Net then subtractive coupling.
pub fn forward_block<T: Element>(
    x: &FeatureMap<T>,
    spec: &BlockSpec,
    block: &BlockParams<Tensor<T>>,
) -> Result<(FeatureMap<T>, CacheEntry<T>)> {
    forward_block_at(x, spec, block, 0)
}

fn forward_block_at<T: Element>(
    x: &FeatureMap<T>,
    spec: &BlockSpec,
    block: &BlockParams<Tensor<T>>,
    index: usize,
) -> Result<(FeatureMap<T>, CacheEntry<T>)> {
    if x.channels() != spec.input_channels {
        return Err(Error::config(format!(
            "block {index} expects {} channels, got {}",
            spec.input_channels,
            x.channels()
        )));
    }
    let g = Graph::inference();
    let bound = bind_block(&g, block);
    let xv = g.constant(x.to_tensor());
    let (y, splits) = block_forward_var(&g, xv, spec, &bound);
    let y = to_map(&g, y, || format!("block {index} forward output"))?;
    let splits = splits
        .into_iter()
        .map(|s| to_map(&g, s, || format!("block {index} affine split")))
        .collect::<Result<_>>()?;
    Ok((y, CacheEntry { splits }))
}

/// One block's reversed pass. Consumes the cache entry.
pub fn reverse_block<T: Element>(
    y: &FeatureMap<T>,
    entry: CacheEntry<T>,
    style: Option<&BlockStyle<T>>,
    spec: &BlockSpec,
    block: &BlockParams<Tensor<T>>,
    fusion: Fusion,
) -> Result<FeatureMap<T>> {
    let c = check_entry(y, &entry, None)?;
    if c != spec.input_channels || entry.splits.len() != spec.expansion {
        return Err(Error::contract(format!(
            "cache entry ({} splits of {c} channels) does not match block spec {spec:?}",
            entry.splits.len()
        )));
    }
    let alphas = realized_alphas(block, spec, fusion);
    couple_reverse(y, entry, style, &alphas)
}

/// The fusion weights a block uses for the given mode.
pub fn realized_alphas<T: Element>(block: &BlockParams<Tensor<T>>, spec: &BlockSpec, fusion: Fusion) -> Vec<T> {
    match fusion {
        Fusion::Learned => block.fusion_logits.data().iter().map(|&t| crate::autodiff::logistic(t)).collect(),
        Fusion::ForceOne => vec![T::one(); spec.fusion_steps()],
    }
}

fn check_image<T: Element>(x: &FeatureMap<T>, config: &ModelConfig) -> Result<()> {
    if x.channels() != config.image_channels {
        return Err(Error::contract(format!(
            "model input must have {} channels, got {}",
            config.image_channels,
            x.channels()
        )));
    }
    if x.data().iter().any(|v| *v < T::zero() || *v > T::one()) {
        return Err(Error::contract("model input pixels must lie in [0, 1]"));
    }
    Ok(())
}

/// Encodes an image through every block.
pub fn model_forward<T: Element>(
    x: &FeatureMap<T>,
    config: &ModelConfig,
    params: &Params<T>,
) -> Result<(FeatureMap<T>, AffineCache<T>)> {
    check_image(x, config)?;
    if params.blocks.len() != config.blocks.len() {
        return Err(Error::config("parameter blocks do not match config"));
    }
    let mut h = x.clone();
    let mut entries = Vec::with_capacity(config.blocks.len());
    for (b, (spec, block)) in config.blocks.iter().zip(&params.blocks).enumerate() {
        let (y, entry) = forward_block_at(&h, spec, block, b)?;
        entries.push(entry);
        h = y;
    }
    Ok((h, AffineCache { entries }))
}

/// Decodes `y` from the last block to the first, consuming the cache.
pub fn model_reverse<T: Element>(
    y: &FeatureMap<T>,
    cache: AffineCache<T>,
    styling: Styling<'_, T>,
    config: &ModelConfig,
    params: &Params<T>,
    fusion: Fusion,
) -> Result<FeatureMap<T>> {
    if cache.entries.len() != config.blocks.len() {
        return Err(Error::contract(format!(
            "cache covers {} blocks, model has {}",
            cache.entries.len(),
            config.blocks.len()
        )));
    }
    if let Styling::Adain(style) = styling {
        style.validate(config)?;
    }
    let mut h = y.clone();
    for (b, entry) in cache.entries.into_iter().enumerate().rev() {
        check_entry(&h, &entry, Some(b))?;
        let spec = &config.blocks[b];
        let block_style = match styling {
            Styling::Adain(style) => Some(&style.blocks[b]),
            Styling::Bypass => None,
        };
        h = reverse_block(&h, entry, block_style, spec, &params.blocks[b], fusion)
            .map_err(|e| match e {
                Error::NonFinite { context } => Error::non_finite(format!("block {b}: {context}")),
                other => other,
            })?;
    }
    Ok(h)
}

/// Reconstructs the model input from its output by applying
/// `x = y_1 + a_1` block by block, last to first. This ignores fusion
/// weights entirely and shows no information is lost by the forward pass.
pub fn recover_input<T: Element>(y: &FeatureMap<T>, cache: &AffineCache<T>) -> Result<FeatureMap<T>> {
    let mut h = y.clone();
    for (b, entry) in cache.entries.iter().enumerate().rev() {
        let c = check_entry(&h, entry, Some(b))?;
        let first = h.narrow(0, c)?;
        let a1 = &entry.splits[0];
        let data = first.data().iter().zip(a1.data()).map(|(&u, &v)| u + v).collect();
        h = FeatureMap::new(c, h.height(), h.width(), data)?;
    }
    Ok(h)
}

/// Space-to-channel rearrangement: `C×H×W -> 4C×H/2×W/2`. Input channel `c`
/// becomes output channels `4c..4c+4` holding the top-left, top-right,
/// bottom-left and bottom-right pixel of every 2×2 cell.
pub fn squeeze<T: Element>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (c, h, w) = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!("squeeze needs even dims, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    Ok(FeatureMap::from_fn(4 * c, ho, wo, |oc, y, xx| {
        let (src, sub) = (oc / 4, oc % 4);
        x.get(src, 2 * y + sub / 2, 2 * xx + sub % 2)
    }))
}

/// Exact inverse of [`squeeze`].
pub fn unsqueeze<T: Element>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (c, h, w) = x.dims();
    if c % 4 != 0 {
        return Err(Error::contract(format!(
            "unsqueeze needs a multiple of 4 channels, got {c}"
        )));
    }
    Ok(FeatureMap::from_fn(c / 4, 2 * h, 2 * w, |oc, y, xx| {
        let sub = (y % 2) * 2 + xx % 2;
        x.get(4 * oc + sub, y / 2, xx / 2)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_params;

    fn map(c: usize, h: usize, w: usize, values: &[f64]) -> FeatureMap<f64> {
        FeatureMap::new(c, h, w, values.to_vec()).unwrap()
    }

    #[test]
    fn presets_have_documented_chains() {
        let hf = ModelConfig::preset(Variant::Hf);
        assert_eq!(hf.expansions(), vec![10, 4]);
        assert_eq!(hf.blocks[1].input_channels, 30);
        assert_eq!(hf.output_channels(), 120);
        assert_eq!(ModelConfig::preset(Variant::HfPlus).expansions(), vec![4, 5, 2]);
        assert_eq!(ModelConfig::preset(Variant::HfPlusPlus).expansions(), vec![10, 4, 4]);
        assert_eq!(ModelConfig::preset(Variant::HfDagger).output_channels(), 1920);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("HFdagger".parse::<Variant>().unwrap(), Variant::HfDagger);
        assert!("HF+++".parse::<Variant>().is_err());
    }

    #[test]
    fn config_rejects_broken_chains() {
        assert!(ModelConfig::from_expansions("bad", 3, &[1], &[8]).is_err());
        let mut c = ModelConfig::preset(Variant::Hf);
        c.blocks[1].input_channels = 31;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn worked_coupling_example() {
        let x = map(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut a = vec![0.5; 4];
        a.extend([1.0; 4]);
        let affine = map(2, 2, 2, &a);
        let (y, entry) = couple_forward(&x, &affine, 2).unwrap();
        assert_eq!(y.data(), &[0.5, 1.5, 2.5, 3.5, -0.5, 0.5, 1.5, 2.5]);

        let back = couple_reverse(&y, entry, None, &[0.5]).unwrap();
        assert_eq!(back.data(), &[0.75, 1.75, 2.75, 3.75]);
    }

    #[test]
    fn zero_affine_replicates_input() {
        let x = map(1, 1, 3, &[0.1, 0.2, 0.3]);
        let affine = FeatureMap::zeros(3, 1, 3);
        let (y, _) = couple_forward(&x, &affine, 3).unwrap();
        for i in 0..3 {
            assert_eq!(y.channel(i), x.channel(0));
        }
    }

    #[test]
    fn coupling_rejects_negative_or_misshaped_affine() {
        let x = map(1, 1, 2, &[0.1, 0.2]);
        let neg = map(2, 1, 2, &[0.1, -0.2, 0.0, 0.0]);
        assert!(matches!(couple_forward(&x, &neg, 2), Err(Error::Contract(_))));
        let wrong = FeatureMap::zeros(3, 1, 2);
        assert!(matches!(couple_forward(&x, &wrong, 2), Err(Error::Config(_))));
    }

    #[test]
    fn reverse_rejects_mismatched_cache() {
        let x = map(1, 1, 2, &[0.1, 0.2]);
        let (_, entry) = couple_forward(&x, &FeatureMap::zeros(2, 1, 2), 2).unwrap();
        let y_wrong = FeatureMap::zeros(3, 1, 2);
        assert!(matches!(
            couple_reverse(&y_wrong, entry, None, &[0.5]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adain_examples() {
        let x = map(1, 1, 2, &[0.0, 2.0]);
        let out = adain(&x, &[5.0], &[3.0]).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-4);
        assert!((out.data()[1] - 8.0).abs() < 1e-4);

        let flat = map(1, 2, 2, &[0.7; 4]);
        let out = adain(&flat, &[-2.0], &[4.0]).unwrap();
        assert!(out.data().iter().all(|v| (*v + 2.0).abs() < 1e-12));

        assert!(adain(&x, &[1.0, 2.0], &[1.0]).is_err());
        assert!(adain(&x, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn adain_identity_when_targets_are_own_stats() {
        let x = map(2, 2, 2, &[0.0, 1.5, 3.0, 4.5, 1.0, -1.0, 2.0, 0.5]);
        let (mu, sigma): (Vec<f64>, Vec<f64>) = x.channel_stats().into_iter().unzip();
        let out = adain(&x, &mu, &sigma).unwrap();
        assert!(out.max_abs_diff(&x) <= 1e-5);
    }

    #[test]
    fn hf_reverse_chain_and_identity() {
        let config = ModelConfig::preset(Variant::Hf);
        let params = init_params(&config, 1).cast::<f64>();
        let x = FeatureMap::from_fn(3, 4, 4, |c, y, xx| ((c * 16 + y * 4 + xx) as f64) / 48.0);
        let (y, cache) = model_forward(&x, &config, &params).unwrap();
        assert_eq!(y.channels(), 120);
        assert_eq!(cache.entries()[1].splits().len(), 4);
        assert_eq!(cache.entries()[0].splits()[0].channels(), 3);
        let back = model_reverse(&y, cache, Styling::Bypass, &config, &params, Fusion::ForceOne).unwrap();
        assert_eq!(back.dims(), (3, 4, 4));
        assert!(back.max_abs_diff(&x) <= 1e-10);
    }

    #[test]
    fn model_forward_checks_input() {
        let config = ModelConfig::preset(Variant::Hf);
        let params = init_params(&config, 1);
        let bad = FeatureMap::<f32>::filled(3, 2, 2, 1.5);
        assert!(matches!(model_forward(&bad, &config, &params), Err(Error::Contract(_))));
        let bad = FeatureMap::<f32>::filled(4, 2, 2, 0.5);
        assert!(matches!(model_forward(&bad, &config, &params), Err(Error::Contract(_))));
    }

    #[test]
    fn squeeze_worked_example_and_round_trip() {
        let x = map(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s = squeeze(&x).unwrap();
        assert_eq!(s.dims(), (4, 1, 1));
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unsqueeze(&s).unwrap(), x);
        assert!(squeeze(&map(1, 1, 2, &[1.0, 2.0])).is_err());
    }

    #[test]
    fn squeeze_shape_law() {
        let x = FeatureMap::<f32>::zeros(3, 256, 256);
        assert_eq!(squeeze(&x).unwrap().dims(), (12, 128, 128));
    }
}
