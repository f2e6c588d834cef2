//! End-to-end translation: encode the source, restyle, decode.

use crate::error::{Error, Result};
use crate::flow::{model_forward, model_reverse, Fusion, ModelConfig, Styling};
use crate::nets::{style_net_apply, Params};
use crate::tensor::{Element, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TranslateOptions {
    /// Skip AdaIN; the target image is then ignored.
    pub adain_bypass: bool,
    pub fusion: Fusion,
}

/// Translates `source` towards the style of `target`. The result is not
/// clamped; callers encoding images clamp on output.
pub fn translate<T: Element>(
    source: &FeatureMap<T>,
    target: Option<&FeatureMap<T>>,
    config: &ModelConfig,
    params: &Params<T>,
    options: TranslateOptions,
) -> Result<FeatureMap<T>> {
    let (y, cache) = model_forward(source, config, params)?;
    if options.adain_bypass {
        return model_reverse(&y, cache, Styling::Bypass, config, params, options.fusion);
    }
    let target = target.ok_or_else(|| Error::contract("translation with AdaIN needs a target image"))?;
    let style = style_net_apply(target, params, config)?;
    model_reverse(&y, cache, Styling::Adain(&style), config, params, options.fusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_params;

    #[test]
    fn bypass_with_unit_fusion_reconstructs() {
        let config = ModelConfig::mini();
        let params = init_params(&config, 2).cast::<f64>();
        let x = FeatureMap::from_fn(3, 6, 10, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f64 / 10.0);
        let options = TranslateOptions {
            adain_bypass: true,
            fusion: Fusion::ForceOne,
        };
        let out = translate(&x, None, &config, &params, options).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-12);
        assert!(translate(&x, None, &config, &params, TranslateOptions::default()).is_err());
    }
}
