//! The differentiable training objective and a single optimization step.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::flow::{model_forward_var, model_reverse_var, Fusion, ModelConfig};
use crate::nets::{check_style_input, style_net_var, Params};
use crate::perceptual::{total_loss_var, LossConfig, LossParts, LossTargets, Vgg19};
use crate::tensor::{Element, FeatureMap, Tensor};
use crate::training::optim::Adam;

/// Which gradients [`objective`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Loss values only; nothing is recorded for backward.
    None,
    Params,
    /// Parameters and the source pixels fed to the model. Loss targets are
    /// held fixed.
    ParamsAndSource,
}

#[derive(Debug, Clone)]
pub struct Objective<T> {
    pub losses: LossParts,
    pub grads: Option<Params<T>>,
    pub source_grad: Option<FeatureMap<T>>,
}

/// Translates `source` with the style of `target` and scores the result:
/// `x̂ = reverse(forward(source), style(target))`, then the total loss of
/// `x̂` against precomputed `targets`.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Element>(
    model: &ModelConfig,
    params: &Params<T>,
    source: &FeatureMap<T>,
    target: &FeatureMap<T>,
    targets: &LossTargets<T>,
    loss: &LossConfig,
    vgg: &Vgg19<T>,
    mode: GradMode,
) -> Result<Objective<T>> {
    if source.channels() != model.image_channels {
        return Err(Error::contract(format!(
            "source must have {} channels, got {}",
            model.image_channels,
            source.channels()
        )));
    }
    check_style_input(target.dims(), model)?;
    let g = if mode == GradMode::None {
        Graph::inference()
    } else {
        Graph::new()
    };
    let bound = params.bind(&g, mode != GradMode::None);
    let x = if mode == GradMode::ParamsAndSource {
        g.param(source.to_tensor())
    } else {
        g.constant(source.to_tensor())
    };
    let t = g.constant(target.to_tensor());
    let (y, cache) = model_forward_var(&g, x, model, &bound);
    let style = style_net_var(&g, t, &bound.style);
    let out = model_reverse_var(&g, y, &cache, Some(&style), model, &bound, Fusion::Learned);
    let vars = total_loss_var(&g, out, targets, loss, vgg)?;
    let losses = LossParts {
        total: g.scalar(vars.total).as_f64(),
        content: g.scalar(vars.content).as_f64(),
        style: g.scalar(vars.style).as_f64(),
    };
    if mode == GradMode::None || !losses.total.is_finite() {
        return Ok(Objective {
            losses,
            grads: None,
            source_grad: None,
        });
    }
    let mut grads = g.backward(vars.total);
    let param_grads = bound.map(|_, v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(g.shape(*v))));
    let source_grad = if mode == GradMode::ParamsAndSource {
        let d = grads.take(x).unwrap_or_else(|| Tensor::zeros(g.shape(x)));
        Some(FeatureMap::from_tensor(d)?)
    } else {
        None
    };
    Ok(Objective {
        losses,
        grads: Some(param_grads),
        source_grad,
    })
}

/// Names of parameters whose gradient is exactly zero everywhere.
pub fn zero_gradient_params<T: Element>(grads: &Params<T>) -> Vec<String> {
    grads
        .named()
        .into_iter()
        .filter(|(_, g)| g.data().iter().all(|v| *v == T::zero()))
        .map(|(n, _)| n)
        .collect()
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub losses: LossParts,
    /// Parameters that received no gradient this step.
    pub zero_grad: Vec<String>,
}

/// One Adam update on the objective for a single `(source, target)` pair.
/// `iteration` is only used to label errors.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &ModelConfig,
    params: &mut Params<f32>,
    adam: &mut Adam,
    source: &FeatureMap<f32>,
    target: &FeatureMap<f32>,
    targets: &LossTargets<f32>,
    loss: &LossConfig,
    vgg: &Vgg19<f32>,
    lr: f64,
    iteration: u64,
) -> Result<StepOutput> {
    let obj = objective(model, params, source, target, targets, loss, vgg, GradMode::Params)?;
    if !obj.losses.total.is_finite() || !obj.losses.content.is_finite() || !obj.losses.style.is_finite() {
        return Err(Error::non_finite(format!("loss at iteration {iteration}")));
    }
    let grads = obj.grads.expect("gradients were requested");
    adam.update(params, &grads, lr)
        .map_err(|e| match e {
            Error::NonFinite { context } => Error::non_finite(format!("{context} at iteration {iteration}")),
            other => other,
        })?;
    Ok(StepOutput {
        losses: obj.losses,
        zero_grad: zero_gradient_params(&grads),
    })
}
