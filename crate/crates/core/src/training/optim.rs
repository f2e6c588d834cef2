//! Cosine learning-rate schedule and the Adam optimizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Params;
use crate::tensor::{Element, Tensor};

/// `lr0 * (1 + cos(pi * t / total)) / 2`, defined for `0 <= t <= total`.
pub fn cosine_lr(t: u64, total: u64, lr0: f64) -> Result<f64> {
    if t > total {
        return Err(Error::contract(format!(
            "schedule position {t} is past the {total}-iteration horizon"
        )));
    }
    if total == 0 {
        return Ok(lr0);
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr0 * 0.5 * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter. `step` is the
/// 1-based index of this update.
pub fn adam_update<T: Element>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    hp: &AdamConfig,
) {
    assert!(step >= 1, "Adam steps are 1-based");
    assert!(theta.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i].as_f64();
        let mi = hp.beta1 * m[i].as_f64() + (1.0 - hp.beta1) * g;
        let vi = hp.beta2 * v[i].as_f64() + (1.0 - hp.beta2) * g * g;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        // Bias correction uses the stored (rounded) moments so that a
        // resumed run sees exactly the same values.
        let m_hat = m[i].as_f64() / c1;
        let v_hat = v[i].as_f64() / c2;
        theta[i] = T::of(theta[i].as_f64() - lr * m_hat / (v_hat.sqrt() + hp.eps));
    }
}

/// Adam state over a whole parameter tree, moments kept in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    names: Vec<String>,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

pub const MOMENT_M: &str = "adam.m.";
pub const MOMENT_V: &str = "adam.v.";

impl Adam {
    pub fn new(params: &Params<f32>) -> Self {
        let named = params.named();
        let zeros: Vec<Tensor<f32>> = named.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            config: AdamConfig::default(),
            step: 0,
            names: named.into_iter().map(|(n, _)| n).collect(),
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuilds optimizer state from named moment records, which must cover
    /// the parameter registry exactly.
    pub fn from_moments(params: &Params<f32>, step: u64, moments: &[(String, Tensor<f32>)]) -> Result<Self> {
        let mut by_name: HashMap<&str, &Tensor<f32>> = HashMap::new();
        for (name, t) in moments {
            if by_name.insert(name.as_str(), t).is_some() {
                return Err(Error::checkpoint(name.as_str(), "duplicate optimizer moment"));
            }
        }
        let mut adam = Adam::new(params);
        adam.step = step;
        for (i, (name, t)) in params.named().into_iter().enumerate() {
            for (prefix, slot) in [(MOMENT_M, &mut adam.m[i]), (MOMENT_V, &mut adam.v[i])] {
                let key = format!("{prefix}{name}");
                let found = by_name
                    .remove(key.as_str())
                    .ok_or_else(|| Error::checkpoint(key.as_str(), "missing optimizer moment"))?;
                if found.shape() != t.shape() {
                    return Err(Error::checkpoint(
                        key.as_str(),
                        format!("shape {:?}, expected {:?}", found.shape(), t.shape()),
                    ));
                }
                *slot = found.clone();
            }
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::checkpoint(*extra, "moment for an unknown parameter"));
        }
        Ok(adam)
    }

    pub fn moments(&self) -> Vec<(String, Tensor<f32>)> {
        let m = self.names.iter().zip(&self.m).map(|(n, t)| (format!("{MOMENT_M}{n}"), t.clone()));
        let v = self.names.iter().zip(&self.v).map(|(n, t)| (format!("{MOMENT_V}{n}"), t.clone()));
        m.chain(v).collect()
    }

    /// Parameter names tracked by the optimizer.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Applies one update. Nothing is modified when any gradient is
    /// non-finite; the error names the first offending parameter.
    pub fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64) -> Result<()> {
        let grads = grads.named();
        if grads.len() != self.names.len() {
            return Err(Error::contract("gradient tree does not match optimizer state"));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::non_finite(format!("gradient of {name}")));
        }
        let step = self.step + 1;
        let config = self.config;
        let mut i = 0;
        params.visit_mut(|name, theta| {
            assert_eq!(name, self.names[i], "parameter order changed");
            let g = grads[i].1;
            assert_eq!(g.shape(), theta.shape(), "gradient shape mismatch for {name}");
            adam_update(
                theta.data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                step,
                lr,
                &config,
            );
            i += 1;
        });
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-5).unwrap(), 1e-5);
        assert!(cosine_lr(100, 100, 1e-5).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-5).unwrap() - 5e-6).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 1e-5).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let hp = AdamConfig::default();
        let (mut theta, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adam_update(&mut theta, &[1.0], &mut m, &mut v, 1, 1e-3, &hp);
        assert!((theta[0] + 1e-3).abs() < 1e-10);
        let mut still = [0.5f64];
        adam_update(&mut still, &[0.0], &mut [0.0], &mut [0.0], 1, 1e-3, &hp);
        assert_eq!(still[0], 0.5);
    }
}
