// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens: each layer's final-position residual read through the final
//! norm (fresh statistics) and the unembedding.

use crate::error::Result;
use crate::model::{forward_with_cache, ops::probs_of, unembed_residual, ActivationCache, WeightBundle};
use crate::stats::{accuracy_bit, LensPoint};

use super::patching::check_pair_tokens;

/// Trajectory of `n_layers + 1` points; index 0 is the embedding.
pub fn logit_lens(weights: &WeightBundle, tokens: &[u32], target: u32, foil: u32) -> Result<Vec<LensPoint>> {
    check_pair_tokens(weights, target, foil)?;
    let (_, cache) = forward_with_cache(weights, tokens, &[])?;
    Ok(lens_from_cache(weights, &cache, target, foil))
}

/// Lens over the per-layer residuals already stored in `cache`.
pub fn lens_from_cache(weights: &WeightBundle, cache: &ActivationCache, target: u32, foil: u32) -> Vec<LensPoint> {
    (0..cache.n_layer_residuals())
        .map(|layer| {
            let (logits, _) = unembed_residual(weights, cache.layer_residual(layer));
            let p = probs_of(&logits, &[target, foil]);
            LensPoint {
                layer,
                p_target: p[0],
                p_foil: p[1],
                correct: accuracy_bit(p[0], &[p[1]]),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, ModelConfig};

    #[test]
    fn final_point_matches_model() {
        let w = WeightBundle::random(ModelConfig::toy(40), 2).unwrap();
        let t = [5, 9, 1, 33, 2];
        let lens = logit_lens(&w, &t, 3, 4).unwrap();
        assert_eq!(lens.len(), 5);
        let p = probs_of(&forward_logits(&w, &t).unwrap(), &[3, 4]);
        assert_eq!(lens[4].p_target, p[0]);
        assert_eq!(lens[4].p_foil, p[1]);
        assert!(logit_lens(&w, &t, 3, 3).is_err());
    }
}
