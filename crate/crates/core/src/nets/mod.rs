//! Learnable sub-networks: the per-block Affine-Net, the shared Style-Net,
//! seeded initialization and the named parameter registry.
//!
//! Parameter containers are generic over their leaf type so the same tree
//! describes stored tensors (`ModelParams<Tensor<T>>`) and their handles on
//! an autodiff graph (`ModelParams<Var>`).

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flow::{BlockSpec, ModelConfig, NORM_EPS};
use crate::tensor::{Element, FeatureMap, Tensor};

/// Offset added after the softplus that produces Style-Net scales.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

/// Conv-IN-ReLU-Conv-IN-ReLU-Conv-ReLU, channels `C -> 2C -> 4C -> nC`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineNet<P> {
    pub convs: [Conv<P>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P> {
    pub affine: AffineNet<P>,
    /// Unconstrained fusion pre-activations; `alpha_i = logistic(theta_i)`.
    pub fusion_logits: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleHead<P> {
    pub mu: Linear<P>,
    pub sigma: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleNet<P> {
    pub trunk: Vec<Conv<P>>,
    pub heads: Vec<StyleHead<P>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub blocks: Vec<BlockParams<P>>,
    pub style: StyleNet<P>,
}

pub type Params<T> = ModelParams<Tensor<T>>;

impl<P> Conv<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> Linear<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> ModelParams<P> {
    /// Rebuilds the tree with `f` applied to every leaf in registry order.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(b, block)| {
                let [c0, c1, c2] = &block.affine.convs;
                BlockParams {
                    affine: AffineNet {
                        convs: [
                            c0.map(&format!("block{b}.affine.conv0"), &mut f),
                            c1.map(&format!("block{b}.affine.conv1"), &mut f),
                            c2.map(&format!("block{b}.affine.conv2"), &mut f),
                        ],
                    },
                    fusion_logits: f(&format!("block{b}.fusion_logits"), &block.fusion_logits),
                }
            })
            .collect();
        let trunk = self
            .style
            .trunk
            .iter()
            .enumerate()
            .map(|(i, c)| c.map(&format!("style.trunk{i}"), &mut f))
            .collect();
        let heads = self
            .style
            .heads
            .iter()
            .enumerate()
            .map(|(b, h)| StyleHead {
                mu: h.mu.map(&format!("style.head{b}.mu"), &mut f),
                sigma: h.sigma.map(&format!("style.head{b}.sigma"), &mut f),
            })
            .collect();
        ModelParams {
            blocks,
            style: StyleNet { trunk, heads },
        }
    }

    /// Visits every leaf in registry order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a P)) {
        for (b, block) in self.blocks.iter().enumerate() {
            for (i, c) in block.affine.convs.iter().enumerate() {
                f(&format!("block{b}.affine.conv{i}.weight"), &c.weight);
                f(&format!("block{b}.affine.conv{i}.bias"), &c.bias);
            }
            f(&format!("block{b}.fusion_logits"), &block.fusion_logits);
        }
        for (i, c) in self.style.trunk.iter().enumerate() {
            f(&format!("style.trunk{i}.weight"), &c.weight);
            f(&format!("style.trunk{i}.bias"), &c.bias);
        }
        for (b, h) in self.style.heads.iter().enumerate() {
            f(&format!("style.head{b}.mu.weight"), &h.mu.weight);
            f(&format!("style.head{b}.mu.bias"), &h.mu.bias);
            f(&format!("style.head{b}.sigma.weight"), &h.sigma.weight);
            f(&format!("style.head{b}.sigma.bias"), &h.sigma.bias);
        }
    }

    /// Registry-ordered `(name, leaf)` pairs.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit(|name, p| out.push((name.to_string(), p)));
        out
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (i, c) in block.affine.convs.iter_mut().enumerate() {
                c.visit_mut(&format!("block{b}.affine.conv{i}"), &mut f);
            }
            f(&format!("block{b}.fusion_logits"), &mut block.fusion_logits);
        }
        for (i, c) in self.style.trunk.iter_mut().enumerate() {
            c.visit_mut(&format!("style.trunk{i}"), &mut f);
        }
        for (b, h) in self.style.heads.iter_mut().enumerate() {
            h.mu.visit_mut(&format!("style.head{b}.mu"), &mut f);
            h.sigma.visit_mut(&format!("style.head{b}.sigma"), &mut f);
        }
    }

    /// Parameter names in registry order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _| names.push(n.to_string()));
        names
    }
}

impl<T: Element> ModelParams<Tensor<T>> {
    pub fn count(&self) -> usize {
        let mut total = 0;
        self.visit(|_, t| total += t.len());
        total
    }

    pub fn cast<U: Element>(&self) -> ModelParams<Tensor<U>> {
        self.map(|_, t| t.cast())
    }

    /// Binds every tensor to `g`: as a trainable leaf when `trainable`, as
    /// a constant otherwise.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> ModelParams<Var> {
        self.map(|_, t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Checks every tensor shape against what `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = shapes_for(config);
        let mut problems = Vec::new();
        let mut actual = Vec::new();
        self.visit(|name, t| actual.push((name.to_string(), t.shape().to_vec())));
        if actual.len() != expected.len() {
            return Err(Error::config(format!(
                "parameter registry has {} tensors, config {} expects {}",
                actual.len(),
                config.variant,
                expected.len()
            )));
        }
        for ((name, shape), (ename, eshape)) in actual.iter().zip(&expected) {
            if name != ename || shape != eshape {
                problems.push(format!("{name} {shape:?} (expected {ename} {eshape:?})"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "parameter shapes do not match config {}: {}",
                config.variant,
                problems.join(", ")
            )))
        }
    }
}

fn conv_shape(out: usize, inp: usize) -> Conv<Vec<usize>> {
    Conv {
        weight: vec![out, inp, 3, 3],
        bias: vec![out],
    }
}

fn linear_shape(out: usize, inp: usize) -> Linear<Vec<usize>> {
    Linear {
        weight: vec![out, inp],
        bias: vec![out],
    }
}

/// Shape tree implied by a config.
pub fn shape_tree(config: &ModelConfig) -> ModelParams<Vec<usize>> {
    let blocks = config
        .blocks
        .iter()
        .map(|spec| {
            let c = spec.input_channels;
            BlockParams {
                affine: AffineNet {
                    convs: [
                        conv_shape(2 * c, c),
                        conv_shape(4 * c, 2 * c),
                        conv_shape(spec.output_channels(), 4 * c),
                    ],
                },
                fusion_logits: vec![spec.fusion_steps()],
            }
        })
        .collect();
    let mut trunk = Vec::new();
    let mut width = config.image_channels;
    for &w in &config.style_widths {
        trunk.push(conv_shape(w, width));
        width = w;
    }
    let heads = config
        .blocks
        .iter()
        .map(|spec| StyleHead {
            mu: linear_shape(spec.output_channels(), width),
            sigma: linear_shape(spec.output_channels(), width),
        })
        .collect();
    ModelParams {
        blocks,
        style: StyleNet { trunk, heads },
    }
}

fn shapes_for(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    shape_tree(config).visit(|n, s| out.push((n.to_string(), s.clone())));
    out
}

/// Seeded initialization: He-uniform weights (`U(-b, b)`, `b = sqrt(6 /
/// fan_in)`), zero biases, zero fusion logits (every `alpha = 0.5`).
/// Values are drawn in registry order from a ChaCha8 stream, so the result
/// depends only on `(config, seed)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Params<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shape_tree(config).map(|name, shape| {
        let len: usize = shape.iter().product();
        if name.ends_with(".weight") {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..len)
                .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32)
                .collect();
            Tensor::from_parts(shape.clone(), data)
        } else {
            Tensor::zeros(shape.clone())
        }
    })
}

impl<T: Element> BlockParams<Tensor<T>> {
    pub fn cast<U: Element>(&self) -> BlockParams<Tensor<U>> {
        BlockParams {
            affine: AffineNet {
                convs: self.affine.convs.clone().map(|c| Conv {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                }),
            },
            fusion_logits: self.fusion_logits.cast(),
        }
    }
}

/// Seeded parameters for a single block with any input width, initialized
/// like [`init_params`].
pub fn init_block(spec: &BlockSpec, seed: u64) -> BlockParams<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.input_channels;
    let mut conv = |out: usize, inp: usize| {
        let bound = (6.0 / (inp * 9) as f64).sqrt();
        let data = (0..out * inp * 9)
            .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32)
            .collect();
        Conv {
            weight: Tensor::from_parts(vec![out, inp, 3, 3], data),
            bias: Tensor::zeros(vec![out]),
        }
    };
    BlockParams {
        affine: AffineNet {
            convs: [conv(2 * c, c), conv(4 * c, 2 * c), conv(spec.output_channels(), 4 * c)],
        },
        fusion_logits: Tensor::zeros(vec![spec.fusion_steps()]),
    }
}

/// Per-block style statistics emitted by the Style-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleParams<T = f32> {
    pub blocks: Vec<BlockStyle<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockStyle<T = f32> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Element> StyleParams<T> {
    /// Checks lengths against the channel chain and `sigma > 0`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.blocks.len() != config.blocks.len() {
            return Err(Error::contract(format!(
                "style params cover {} blocks, model has {}",
                self.blocks.len(),
                config.blocks.len()
            )));
        }
        for (b, (style, spec)) in self.blocks.iter().zip(&config.blocks).enumerate() {
            let c = spec.output_channels();
            if style.mu.len() != c || style.sigma.len() != c {
                return Err(Error::contract(format!(
                    "block {b} style vectors have lengths ({}, {}), expected {c}",
                    style.mu.len(),
                    style.sigma.len()
                )));
            }
            if style.sigma.iter().any(|s| !(*s > T::zero())) {
                return Err(Error::contract(format!("block {b} sigma must be positive")));
            }
        }
        Ok(())
    }
}

/// Graph-level Affine-Net.
pub fn affine_net_var<T: Element>(g: &Graph<T>, x: Var, net: &AffineNet<Var>) -> Var {
    let eps = T::of(NORM_EPS);
    let [c0, c1, c2] = &net.convs;
    let h = g.conv2d(x, c0.weight, c0.bias, 1, 1);
    let h = g.instance_norm(h, eps);
    let h = g.relu(h);
    let h = g.conv2d(h, c1.weight, c1.bias, 1, 1);
    let h = g.instance_norm(h, eps);
    let h = g.relu(h);
    let h = g.conv2d(h, c2.weight, c2.bias, 1, 1);
    g.relu(h)
}

/// Applies one block's Affine-Net to `x`, producing the non-negative
/// `n·C`-channel affine tensor.
pub fn affine_net_apply<T: Element>(x: &FeatureMap<T>, net: &AffineNet<Tensor<T>>) -> Result<FeatureMap<T>> {
    let expected = net.convs[0].weight.shape()[1];
    if x.channels() != expected {
        return Err(Error::config(format!(
            "Affine-Net expects {expected} input channels, got {}",
            x.channels()
        )));
    }
    let g = Graph::inference();
    let bound = AffineNet {
        convs: net.convs.clone().map(|c| Conv {
            weight: g.constant(c.weight),
            bias: g.constant(c.bias),
        }),
    };
    let xv = g.constant(x.to_tensor());
    let out = affine_net_var(&g, xv, &bound);
    FeatureMap::from_tensor((*g.value(out)).clone())
}

/// Smallest spatial side the Style-Net accepts: each stride-2 layer halves
/// the map.
pub fn style_min_side(config: &ModelConfig) -> usize {
    1 << config.style_widths.len()
}

/// Graph-level Style-Net. Returns per-block `(mu, sigma)` handles.
pub fn style_net_var<T: Element>(g: &Graph<T>, image: Var, net: &StyleNet<Var>) -> Vec<(Var, Var)> {
    let mut h = image;
    for conv in &net.trunk {
        h = g.conv2d(h, conv.weight, conv.bias, 2, 1);
        h = g.relu(h);
    }
    let pooled = g.channel_mean(h);
    net.heads
        .iter()
        .map(|head| {
            let mu = g.linear(pooled, head.mu.weight, head.mu.bias);
            let pre = g.linear(pooled, head.sigma.weight, head.sigma.bias);
            let sigma = g.softplus(pre);
            let sigma = g.affine_const(sigma, T::one(), T::of(SIGMA_FLOOR));
            (mu, sigma)
        })
        .collect()
}

pub(crate) fn check_style_input(image_dims: (usize, usize, usize), config: &ModelConfig) -> Result<()> {
    let (c, h, w) = image_dims;
    if c != config.image_channels {
        return Err(Error::contract(format!(
            "style image must have {} channels, got {c}",
            config.image_channels
        )));
    }
    let min = style_min_side(config);
    if h < min || w < min {
        return Err(Error::contract(format!(
            "style image {h}x{w} is smaller than the {min}x{min} minimum"
        )));
    }
    Ok(())
}

/// Runs the Style-Net on a target-domain image.
pub fn style_net_apply<T: Element>(
    target: &FeatureMap<T>,
    params: &Params<T>,
    config: &ModelConfig,
) -> Result<StyleParams<T>> {
    check_style_input(target.dims(), config)?;
    let g = Graph::inference();
    let bound = params.bind(&g, false);
    let image = g.constant(target.to_tensor());
    let heads = style_net_var(&g, image, &bound.style);
    let blocks = heads
        .into_iter()
        .map(|(mu, sigma)| BlockStyle {
            mu: g.value(mu).data().to_vec(),
            sigma: g.value(sigma).data().to_vec(),
        })
        .collect();
    Ok(StyleParams { blocks })
}

/// Parameter totals grouped for reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
}

pub fn param_breakdown(config: &ModelConfig) -> ParamBreakdown {
    let tree = shape_tree(config);
    let size = |s: &Vec<usize>| s.iter().product::<usize>();
    let mut rows = Vec::new();
    for (b, block) in tree.blocks.iter().enumerate() {
        let affine: usize = block
            .affine
            .convs
            .iter()
            .map(|c| size(&c.weight) + size(&c.bias))
            .sum();
        rows.push((format!("block{b}.affine"), affine));
        rows.push((format!("block{b}.fusion"), size(&block.fusion_logits)));
    }
    let trunk: usize = tree
        .style
        .trunk
        .iter()
        .map(|c| size(&c.weight) + size(&c.bias))
        .sum();
    rows.push(("style.trunk".into(), trunk));
    let heads: usize = tree
        .style
        .heads
        .iter()
        .map(|h| size(&h.mu.weight) + size(&h.mu.bias) + size(&h.sigma.weight) + size(&h.sigma.bias))
        .sum();
    rows.push(("style.heads".into(), heads));
    let total = rows.iter().map(|(_, n)| n).sum();
    ParamBreakdown { rows, total }
}
