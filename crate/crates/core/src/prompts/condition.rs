// SPDX-License-Identifier: MIT OR Apache-2.0

//! Demonstration conditions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};

/// The nonsense label inventory used by the set-level conditions.
pub const NONSENSE: [&str; 5] = ["foo", "bar", "vex", "nit", "orb"];

/// Which demonstration set to build.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionKind {
    /// Every demo carries the label opposite the query's class.
    Gp,
    CtrlBalanced,
    Random,
    HomogNonsense,
    VariedNonsense,
    /// `k` demos carry the misleading label, the rest the query's label.
    ThresholdK(usize),
    /// The mirrored direction: query from the usual GP class.
    ReverseGp,
    Alternating,
    /// GP with one corrective demo at this 1-based position.
    Recency(usize),
    GpMulticlass(String),
    DogHeavy,
    ExcludeLabel(String),
    /// Multi-token verbalizer GP toward one polarity.
    GpMultitoken(String),
    /// Single-token verbalizer demos with the multi-token probe.
    GpSingleTokenControl,
    /// Balanced single-token demos with the multi-token probe.
    CtrlSingleToken,
    FormatVariant(u8),
    ZeroShot,
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gp => f.write_str("gp"),
            Self::CtrlBalanced => f.write_str("ctrl_balanced"),
            Self::Random => f.write_str("random"),
            Self::HomogNonsense => f.write_str("homog_nonsense"),
            Self::VariedNonsense => f.write_str("varied_nonsense"),
            Self::ThresholdK(k) => write!(f, "threshold_k={k}"),
            Self::ReverseGp => f.write_str("reverse_gp"),
            Self::Alternating => f.write_str("alternating"),
            Self::Recency(p) => write!(f, "recency={p}"),
            Self::GpMulticlass(l) => write!(f, "gp_multiclass={l}"),
            Self::DogHeavy => f.write_str("dog_heavy"),
            Self::ExcludeLabel(l) => write!(f, "exclude_label={l}"),
            Self::GpMultitoken(p) => write!(f, "gp_multitoken={p}"),
            Self::GpSingleTokenControl => f.write_str("gp_single_token_control"),
            Self::CtrlSingleToken => f.write_str("ctrl_single_token"),
            Self::FormatVariant(v) => write!(f, "format_variant={v}"),
            Self::ZeroShot => f.write_str("zero_shot"),
        }
    }
}

impl FromStr for ConditionKind {
    type Err = FixlabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || FixlabError::Prompt(format!("unknown condition `{s}`"));
        let (name, arg) = match s.split_once('=') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<usize> { a.and_then(|a| a.parse().ok()).ok_or_else(bad) };
        let text =
            |a: Option<&str>| -> Result<String> { a.filter(|a| !a.is_empty()).map(str::to_string).ok_or_else(bad) };
        let kind = match name {
            "gp" => Self::Gp,
            "ctrl_balanced" | "ctrl" => Self::CtrlBalanced,
            "random" => Self::Random,
            "homog_nonsense" => Self::HomogNonsense,
            "varied_nonsense" => Self::VariedNonsense,
            "threshold_k" => Self::ThresholdK(num(arg)?),
            "reverse_gp" => Self::ReverseGp,
            "alternating" => Self::Alternating,
            "recency" => Self::Recency(num(arg)?),
            "gp_multiclass" => Self::GpMulticlass(text(arg)?),
            "dog_heavy" => Self::DogHeavy,
            "exclude_label" => Self::ExcludeLabel(text(arg)?),
            "gp_multitoken" => Self::GpMultitoken(text(arg)?),
            "gp_single_token_control" => Self::GpSingleTokenControl,
            "ctrl_single_token" => Self::CtrlSingleToken,
            "format_variant" => {
                let v = num(arg)?;
                Self::FormatVariant(u8::try_from(v).map_err(|_| bad())?)
            }
            "zero_shot" => Self::ZeroShot,
            _ => return Err(bad()),
        };
        if arg.is_some()
            && matches!(
                kind,
                Self::Gp
                    | Self::CtrlBalanced
                    | Self::Random
                    | Self::HomogNonsense
                    | Self::VariedNonsense
                    | Self::ReverseGp
                    | Self::Alternating
                    | Self::DogHeavy
                    | Self::GpSingleTokenControl
                    | Self::CtrlSingleToken
                    | Self::ZeroShot
            )
        {
            return Err(bad());
        }
        Ok(kind)
    }
}

impl Serialize for ConditionKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConditionKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A condition together with its shot count and seed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub kind: ConditionKind,
    pub shots: usize,
    pub seed: u64,
}

impl ConditionSpec {
    pub fn new(kind: ConditionKind, shots: usize, seed: u64) -> Result<Self> {
        let spec = Self { kind, shots, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Eight shots.
    pub fn eight(kind: ConditionKind, seed: u64) -> Self {
        Self::new(kind, 8, seed).expect("eight shots satisfy every condition")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(FixlabError::Prompt(m));
        match &self.kind {
            ConditionKind::ZeroShot => return Ok(()),
            _ if self.shots == 0 => return err("shots must be at least 1".into()),
            ConditionKind::ThresholdK(k) if *k > self.shots => {
                return err(format!("threshold k={k} exceeds shots={}", self.shots))
            }
            ConditionKind::Recency(p) if *p == 0 || *p > self.shots => {
                return err(format!("recency position {p} outside 1..={}", self.shots))
            }
            ConditionKind::FormatVariant(v) if !(1..=5).contains(v) => {
                return err(format!("format variant {v} outside 1..=5"))
            }
            ConditionKind::VariedNonsense if self.shots < NONSENSE.len() => {
                return err(format!("varied nonsense needs at least {} shots", NONSENSE.len()))
            }
            _ => {}
        }
        Ok(())
    }
}

impl fmt::Display for ConditionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)
    }
}
