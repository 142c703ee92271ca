// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named, shape-checked parameter tensors for one model.
//!
//! Projection matrices are stored input-major (`[in, out]`) so a row vector
//! multiplies them directly. The output projection of attention has
//! `n_heads · d_head` rows; rows `h·d_head .. (h+1)·d_head` are head `h`'s
//! slice, so the per-head slices partition the attention output exactly.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{MlpKind, ModelConfig, NormKind, Positional};
use crate::error::{FixlabError, Result};

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_w: Tensor,
    pub ln1_b: Option<Tensor>,
    pub ln2_w: Tensor,
    pub ln2_b: Option<Tensor>,
    pub q_w: Tensor,
    pub q_b: Option<Tensor>,
    pub k_w: Tensor,
    pub k_b: Option<Tensor>,
    pub v_w: Tensor,
    pub v_b: Option<Tensor>,
    pub o_w: Tensor,
    pub o_b: Option<Tensor>,
    pub mlp_in_w: Tensor,
    pub mlp_in_b: Option<Tensor>,
    /// Gate projection, present iff the MLP is SwiGLU.
    pub mlp_gate_w: Option<Tensor>,
    pub mlp_out_w: Tensor,
    pub mlp_out_b: Option<Tensor>,
}

/// A complete, validated set of model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub config: ModelConfig,
    pub embed: Tensor,
    /// Learned absolute positions, present iff `positional = learned`.
    pub pos_embed: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_norm_w: Tensor,
    pub final_norm_b: Option<Tensor>,
    pub unembed: Tensor,
}

/// Expected shape and optionality of every named tensor for `config`.
pub(crate) fn tensor_schema(config: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let d = config.d_model;
    let qd = config.n_heads * config.d_head;
    let kv = config.kv_dim();
    let ln_bias = config.norm_kind == NormKind::Layernorm;
    let mut out = vec![("embed".to_string(), vec![config.vocab_size, d], true)];
    if config.positional == Positional::Learned {
        out.push(("pos_embed".into(), vec![config.max_seq, d], true));
    }
    for i in 0..config.n_layers {
        let p = format!("blocks.{i}");
        out.push((format!("{p}.ln1.weight"), vec![d], true));
        if ln_bias {
            out.push((format!("{p}.ln1.bias"), vec![d], false));
        }
        out.push((format!("{p}.ln2.weight"), vec![d], true));
        if ln_bias {
            out.push((format!("{p}.ln2.bias"), vec![d], false));
        }
        out.push((format!("{p}.attn.q.weight"), vec![d, qd], true));
        out.push((format!("{p}.attn.q.bias"), vec![qd], false));
        out.push((format!("{p}.attn.k.weight"), vec![d, kv], true));
        out.push((format!("{p}.attn.k.bias"), vec![kv], false));
        out.push((format!("{p}.attn.v.weight"), vec![d, kv], true));
        out.push((format!("{p}.attn.v.bias"), vec![kv], false));
        out.push((format!("{p}.attn.o.weight"), vec![qd, d], true));
        out.push((format!("{p}.attn.o.bias"), vec![d], false));
        out.push((format!("{p}.mlp.in.weight"), vec![d, config.d_mlp], true));
        out.push((format!("{p}.mlp.in.bias"), vec![config.d_mlp], false));
        if config.mlp_kind == MlpKind::Swiglu {
            out.push((format!("{p}.mlp.gate.weight"), vec![d, config.d_mlp], true));
        }
        out.push((format!("{p}.mlp.out.weight"), vec![config.d_mlp, d], true));
        out.push((format!("{p}.mlp.out.bias"), vec![d], false));
    }
    out.push(("final_norm.weight".into(), vec![d], true));
    if ln_bias {
        out.push(("final_norm.bias".into(), vec![d], false));
    }
    out.push(("unembed".into(), vec![d, config.vocab_size], true));
    out
}

impl WeightBundle {
    /// Assemble a bundle from named tensors, checking shapes and finiteness.
    ///
    /// Unknown names are rejected so a converter bug cannot silently drop data.
    pub fn from_named(config: ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let schema = tensor_schema(&config);
        for (name, shape, required) in &schema {
            match named.get(name) {
                Some(t) => {
                    if &t.shape != shape {
                        return Err(FixlabError::Shape {
                            name: name.clone(),
                            expected: shape.clone(),
                            found: t.shape.clone(),
                        });
                    }
                    if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
                        return Err(FixlabError::NonFinite {
                            name: name.clone(),
                            index,
                        });
                    }
                }
                None if *required => return Err(FixlabError::MissingTensor(name.clone())),
                None => {}
            }
        }
        if let Some(extra) = named.keys().find(|k| !schema.iter().any(|(n, _, _)| n == *k)) {
            return Err(FixlabError::Header(format!("unexpected tensor `{extra}`")));
        }

        let embed = named.remove("embed").expect("checked above");
        let pos_embed = named.remove("pos_embed");
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("blocks.{i}");
            let mut take = |s: &str| named.remove(&format!("{p}.{s}"));
            layers.push(LayerWeights {
                ln1_w: take("ln1.weight").expect("checked"),
                ln1_b: take("ln1.bias"),
                ln2_w: take("ln2.weight").expect("checked"),
                ln2_b: take("ln2.bias"),
                q_w: take("attn.q.weight").expect("checked"),
                q_b: take("attn.q.bias"),
                k_w: take("attn.k.weight").expect("checked"),
                k_b: take("attn.k.bias"),
                v_w: take("attn.v.weight").expect("checked"),
                v_b: take("attn.v.bias"),
                o_w: take("attn.o.weight").expect("checked"),
                o_b: take("attn.o.bias"),
                mlp_in_w: take("mlp.in.weight").expect("checked"),
                mlp_in_b: take("mlp.in.bias"),
                mlp_gate_w: take("mlp.gate.weight"),
                mlp_out_w: take("mlp.out.weight").expect("checked"),
                mlp_out_b: take("mlp.out.bias"),
            });
        }
        let final_norm_w = named.remove("final_norm.weight").expect("checked");
        let final_norm_b = named.remove("final_norm.bias");
        let unembed = named.remove("unembed").expect("checked");
        Ok(Self {
            config,
            embed,
            pos_embed,
            layers,
            final_norm_w,
            final_norm_b,
            unembed,
        })
    }

    /// Named tensors in canonical directory order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embed".into(), &self.embed)];
        if let Some(t) = &self.pos_embed {
            out.push(("pos_embed".into(), t));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.ln1.weight"), &l.ln1_w));
            let opt = [
                ("ln1.bias", &l.ln1_b),
                ("ln2.bias", &l.ln2_b),
                ("attn.q.bias", &l.q_b),
                ("attn.k.bias", &l.k_b),
                ("attn.v.bias", &l.v_b),
                ("attn.o.bias", &l.o_b),
                ("mlp.in.bias", &l.mlp_in_b),
                ("mlp.gate.weight", &l.mlp_gate_w),
                ("mlp.out.bias", &l.mlp_out_b),
            ];
            let req = [
                ("ln2.weight", &l.ln2_w),
                ("attn.q.weight", &l.q_w),
                ("attn.k.weight", &l.k_w),
                ("attn.v.weight", &l.v_w),
                ("attn.o.weight", &l.o_w),
                ("mlp.in.weight", &l.mlp_in_w),
                ("mlp.out.weight", &l.mlp_out_w),
            ];
            for (s, t) in req {
                out.push((format!("{p}.{s}"), t));
            }
            for (s, t) in opt {
                if let Some(t) = t {
                    out.push((format!("{p}.{s}"), t));
                }
            }
        }
        out.push(("final_norm.weight".into(), &self.final_norm_w));
        if let Some(t) = &self.final_norm_b {
            out.push(("final_norm.bias".into(), t));
        }
        out.push(("unembed".into(), &self.unembed));
        // directory order follows the schema so files are reproducible
        let order: Vec<String> = tensor_schema(&self.config).into_iter().map(|(n, _, _)| n).collect();
        out.sort_by_key(|(n, _)| order.iter().position(|o| o == n).unwrap_or(usize::MAX));
        out
    }

    /// Bundle with every parameter zero (norm scales included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let named = tensor_schema(&config)
            .into_iter()
            .filter(|(_, _, required)| *required)
            .map(|(n, s, _)| (n, Tensor::zeros(s)))
            .collect();
        Self::from_named(config, named)
    }

    /// Randomly initialised bundle, deterministic in `seed`.
    ///
    /// Matrices are uniform with variance `1/fan_in`, norm scales are near
    /// one and biases are small, so activations stay O(1) through depth.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut named = BTreeMap::new();
        for (name, shape, _) in tensor_schema(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> =
                if name.ends_with("norm.weight") || name.ends_with("ln1.weight") || name.ends_with("ln2.weight") {
                    let u = Uniform::new(0.8f32, 1.2);
                    (0..n).map(|_| u.sample(&mut rng)).collect()
                } else if name.ends_with("bias") {
                    let u = Uniform::new(-0.05f32, 0.05);
                    (0..n).map(|_| u.sample(&mut rng)).collect()
                } else if name == "embed" || name == "pos_embed" {
                    let u = Uniform::new(-1.0f32, 1.0);
                    (0..n).map(|_| u.sample(&mut rng)).collect()
                } else {
                    let a = (3.0 / shape[0] as f32).sqrt();
                    let u = Uniform::new(-a, a);
                    (0..n).map(|_| u.sample(&mut rng)).collect()
                };
            named.insert(name, Tensor::new(shape, data));
        }
        Self::from_named(config, named)
    }

    /// Re-run all structural checks (useful after hand edits in tests).
    pub fn validate(&self) -> Result<()> {
        let named = self.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        Self::from_named(self.config.clone(), named).map(|_| ())
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
