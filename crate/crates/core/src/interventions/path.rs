// SPDX-License-Identifier: MIT OR Apache-2.0

//! Path patching from a sender head into one receiver head.
//!
//! Three passes at the final position:
//! 1. GP and control runs record the sender's output; the GP run also
//!    records the receiver layer's input residual.
//! 2. The GP run is repeated with the receiver layer's input shifted by the
//!    sender's control-minus-GP output, and the receiver's output is recorded.
//!    Only the receiver's output from this pass is kept, so every other path
//!    stays at its GP value.
//! 3. The GP run is repeated with just the receiver's output replaced.

use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};
use crate::model::{Capture, HookSite, PatchSpec, PrefixState, WeightBundle};

use super::patching::{check_pair_tokens, prob, PairInput};
use super::recovery::RecoveryResult;

/// A `(layer, head)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Head {
    pub layer: usize,
    pub head: usize,
}

impl Head {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn site(self) -> HookSite {
        HookSite::head_out(self.layer, self.head)
    }
}

/// Recovery attributable to the sender → receiver path. `recovery` of the
/// result is the mediation fraction.
pub fn path_patch(
    weights: &WeightBundle,
    pair: &PairInput,
    sender: Head,
    receiver: Head,
    target: u32,
    foil: u32,
) -> Result<RecoveryResult> {
    check_pair_tokens(weights, target, foil)?;
    sender.site().validate(&weights.config)?;
    receiver.site().validate(&weights.config)?;
    if sender.layer >= receiver.layer {
        return Err(FixlabError::Intervention(format!(
            "sender layer {} must precede receiver layer {}",
            sender.layer, receiver.layer
        )));
    }
    pair.check_suffix()?;
    let resid_site = HookSite::resid_pre(receiver.layer);

    // pass 1
    let gp = PrefixState::new(weights, &pair.gp_tokens)?;
    let (_, gp_cache) = gp.patched_run(
        weights,
        &PatchSpec::new(),
        Some(&Capture::last_position([sender.site(), resid_site])),
    )?;
    let ctrl = PrefixState::new(weights, &pair.ctrl_tokens)?;
    let (_, ctrl_cache) = ctrl.patched_run(
        weights,
        &PatchSpec::new(),
        Some(&Capture::last_position([sender.site()])),
    )?;
    let gp_send = gp_cache.last(sender.site())?;
    let ctrl_send = ctrl_cache.last(sender.site())?;
    let shifted: Vec<f32> = gp_cache
        .last(resid_site)?
        .iter()
        .zip(gp_send.iter().zip(ctrl_send))
        .map(|(r, (g, c))| r + (c - g))
        .collect();

    // pass 2
    let last = pair.gp_tokens.len() - 1;
    let (_, recv_cache) = gp.patched_run(
        weights,
        &PatchSpec::new().with(resid_site, last, shifted)?,
        Some(&Capture::last_position([receiver.site()])),
    )?;

    // pass 3
    let spec = PatchSpec::new().with(receiver.site(), last, recv_cache.last(receiver.site())?.to_vec())?;
    let patched = gp.patched_logits(weights, &spec)?;
    Ok(RecoveryResult::new(
        prob(gp.logits(), target),
        prob(ctrl.logits(), target),
        prob(&patched, target),
    ))
}
