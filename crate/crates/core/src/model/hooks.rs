// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook sites, captured activations and patch specifications.
//!
//! Every site carries a `d_model` vector per position, i.e. a contribution
//! expressed in residual-stream coordinates:
//!
//! - `resid_pre(L)`: residual entering block `L`
//! - `attn_out(L)`: attention block output added to the residual
//! - `mlp_out(L)`: MLP output added to the residual
//! - `head_out(L, h)`: head `h`'s value-weighted output already projected
//!   through its slice of the output matrix, plus `1/n_heads` of the output
//!   bias, so that heads sum exactly to `attn_out(L)`

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::ops::NormStats;
use crate::error::{FixlabError, Result};

/// Kind of activation a hook site exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    ResidPre,
    AttnOut,
    MlpOut,
    HeadOut,
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ResidPre => "resid_pre",
            Self::AttnOut => "attn_out",
            Self::MlpOut => "mlp_out",
            Self::HeadOut => "head_out",
        })
    }
}

impl FromStr for SiteKind {
    type Err = FixlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resid_pre" => Ok(Self::ResidPre),
            "attn_out" | "attn" => Ok(Self::AttnOut),
            "mlp_out" | "mlp" => Ok(Self::MlpOut),
            "head_out" | "head" => Ok(Self::HeadOut),
            other => Err(FixlabError::Site(format!("unknown site kind `{other}`"))),
        }
    }
}

/// A named location in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookSite {
    pub kind: SiteKind,
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
}

impl HookSite {
    pub const fn resid_pre(layer: usize) -> Self {
        Self {
            kind: SiteKind::ResidPre,
            layer,
            head: None,
        }
    }

    pub const fn attn_out(layer: usize) -> Self {
        Self {
            kind: SiteKind::AttnOut,
            layer,
            head: None,
        }
    }

    pub const fn mlp_out(layer: usize) -> Self {
        Self {
            kind: SiteKind::MlpOut,
            layer,
            head: None,
        }
    }

    pub const fn head_out(layer: usize, head: usize) -> Self {
        Self {
            kind: SiteKind::HeadOut,
            layer,
            head: Some(head),
        }
    }

    /// Site of `kind` at `layer`; `head` must be given iff `kind` is `head_out`.
    pub fn new(kind: SiteKind, layer: usize, head: Option<usize>) -> Result<Self> {
        let site = Self { kind, layer, head };
        match (kind, head) {
            (SiteKind::HeadOut, None) => Err(FixlabError::Site("head_out requires a head".into())),
            (SiteKind::HeadOut, Some(_)) | (_, None) => Ok(site),
            (_, Some(_)) => Err(FixlabError::Site(format!("{kind} takes no head index"))),
        }
    }

    /// Check indices against a config.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(FixlabError::Site(format!(
                "layer {} >= n_layers {}",
                self.layer, config.n_layers
            )));
        }
        match (self.kind, self.head) {
            (SiteKind::HeadOut, Some(h)) if h < config.n_heads => Ok(()),
            (SiteKind::HeadOut, Some(h)) => Err(FixlabError::Site(format!("head {h} >= n_heads {}", config.n_heads))),
            (SiteKind::HeadOut, None) => Err(FixlabError::Site("head_out requires a head".into())),
            (_, Some(_)) => Err(FixlabError::Site(format!("{} takes no head index", self.kind))),
            (_, None) => Ok(()),
        }
    }

    /// Every site of `kind` in the model (all heads for `head_out`).
    pub fn all_of_kind(config: &ModelConfig, kind: SiteKind) -> Vec<Self> {
        (0..config.n_layers)
            .flat_map(|l| -> Vec<Self> {
                if kind == SiteKind::HeadOut {
                    (0..config.n_heads).map(|h| Self::head_out(l, h)).collect()
                } else {
                    vec![Self {
                        kind,
                        layer: l,
                        head: None,
                    }]
                }
            })
            .collect()
    }
}

/// `L7.attn_out`, `L10H5.head_out`, ...
impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.head {
            Some(h) => write!(f, "L{}H{}.{}", self.layer, h, self.kind),
            None => write!(f, "L{}.{}", self.layer, self.kind),
        }
    }
}

impl FromStr for HookSite {
    type Err = FixlabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || FixlabError::Site(format!("cannot parse site `{s}`"));
        let (loc, kind) = s.split_once('.').ok_or_else(bad)?;
        let kind: SiteKind = kind.parse()?;
        let loc = loc.strip_prefix('L').ok_or_else(bad)?;
        let (layer, head) = match loc.split_once('H') {
            Some((l, h)) => (l, Some(h.parse::<usize>().map_err(|_| bad())?)),
            None => (loc, None),
        };
        let layer = layer.parse::<usize>().map_err(|_| bad())?;
        Self::new(kind, layer, head)
    }
}

/// Activations captured during one forward pass. Immutable once built.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub(crate) seq_len: usize,
    pub(crate) entries: HashMap<(HookSite, usize), Vec<f32>>,
    /// Last-position residual after `l` blocks, `l = 0..=n_layers`.
    pub(crate) layer_resid: Vec<Vec<f32>>,
    /// Final-norm statistics at the last position.
    pub(crate) final_norm: NormStats,
}

impl ActivationCache {
    /// Vector at `(site, position)`, if captured.
    pub fn get(&self, site: HookSite, position: usize) -> Option<&[f32]> {
        self.entries.get(&(site, position)).map(Vec::as_slice)
    }

    /// Like [`get`](Self::get) but with a descriptive error.
    pub fn require(&self, site: HookSite, position: usize) -> Result<&[f32]> {
        self.get(site, position)
            .ok_or_else(|| FixlabError::IncompleteCache(format!("{site} at position {position}")))
    }

    /// Vector at the final position.
    pub fn last(&self, site: HookSite) -> Result<&[f32]> {
        self.require(site, self.seq_len - 1)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Number of captured `(site, position)` entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of captured entries of one kind.
    pub fn count_kind(&self, kind: SiteKind) -> usize {
        self.entries.keys().filter(|(s, _)| s.kind == kind).count()
    }

    /// Last-position residual stream after `layers` blocks (0 = embeddings).
    pub fn layer_residual(&self, layers: usize) -> &[f32] {
        &self.layer_resid[layers]
    }

    pub fn n_layer_residuals(&self) -> usize {
        self.layer_resid.len()
    }

    /// Final-norm statistics at the last position, for frozen-norm attribution.
    pub fn final_norm_stats(&self) -> NormStats {
        self.final_norm
    }
}

/// One activation injection.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEntry {
    pub site: HookSite,
    pub position: usize,
    pub value: Vec<f32>,
}

/// A validated set of injections with no duplicate `(site, position)` targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSpec {
    entries: BTreeMap<(HookSite, usize), Vec<f32>>,
}

impl PatchSpec {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one target; duplicates are an error.
    pub fn insert(&mut self, site: HookSite, position: usize, value: Vec<f32>) -> Result<()> {
        if self.entries.contains_key(&(site, position)) {
            return Err(FixlabError::Patch(format!(
                "duplicate target {site} at position {position}"
            )));
        }
        self.entries.insert((site, position), value);
        Ok(())
    }

    /// Builder-style [`insert`](Self::insert).
    pub fn with(mut self, site: HookSite, position: usize, value: Vec<f32>) -> Result<Self> {
        self.insert(site, position, value)?;
        Ok(self)
    }

    /// Build from a list, rejecting duplicates.
    pub fn from_entries(entries: impl IntoIterator<Item = PatchEntry>) -> Result<Self> {
        let mut spec = Self::new();
        for e in entries {
            spec.insert(e.site, e.position, e.value)?;
        }
        Ok(spec)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, site: HookSite, position: usize) -> Option<&[f32]> {
        self.entries.get(&(site, position)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(HookSite, usize), &Vec<f32>)> {
        self.entries.iter()
    }

    /// Earliest layer touched by any patch.
    pub fn min_layer(&self) -> Option<usize> {
        self.entries.keys().map(|(s, _)| s.layer).min()
    }

    /// True when all patches sit at `position`.
    pub fn only_at(&self, position: usize) -> bool {
        self.entries.keys().all(|(_, p)| *p == position)
    }

    /// Check sites, positions and widths against a model and sequence length.
    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        for ((site, pos), v) in &self.entries {
            site.validate(config)?;
            if *pos >= seq_len {
                return Err(FixlabError::Patch(format!(
                    "position {pos} out of range for sequence of length {seq_len}"
                )));
            }
            if v.len() != config.d_model {
                return Err(FixlabError::Patch(format!(
                    "{site} value has width {}, expected d_model {}",
                    v.len(),
                    config.d_model
                )));
            }
        }
        Ok(())
    }
}
