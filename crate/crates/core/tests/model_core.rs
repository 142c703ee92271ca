// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::time::Instant;

use common::{max_abs_diff, random_prompts, reference_logits, toy_learned};
use fixlab_core::model::{
    forward_logits, forward_patched_with_capture, forward_with_cache, forward_with_patches, load_weights, save_weights,
    Capture, DType, HookSite, ModelConfig, PatchSpec, PrefixState, SiteKind, Tensor, WeightBundle,
};
use fixlab_core::{Exec, FixlabError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn configs() -> Vec<(&'static str, ModelConfig)> {
    vec![
        ("neox", ModelConfig::toy(97)),
        ("llama", ModelConfig::toy_llama(97)),
        ("learned", toy_learned(97)),
    ]
}

#[test]
fn forward_matches_naive_reference() {
    for (name, cfg) in configs() {
        let w = WeightBundle::random(cfg, 11).unwrap();
        for t in random_prompts(8, 97, 1, 24, 5) {
            let got = forward_logits(&w, &t).unwrap();
            let want = reference_logits(&w, &t);
            let diff = max_abs_diff(&got, &want);
            assert!(diff < 1e-4, "{name}: max diff {diff} on {t:?}");
        }
    }
}

#[test]
fn capture_is_neutral() {
    let w = WeightBundle::random(ModelConfig::toy_llama(50), 2).unwrap();
    let sites: Vec<HookSite> = [
        SiteKind::ResidPre,
        SiteKind::AttnOut,
        SiteKind::MlpOut,
        SiteKind::HeadOut,
    ]
    .iter()
    .flat_map(|&k| HookSite::all_of_kind(&w.config, k))
    .collect();
    for t in random_prompts(10, 50, 1, 30, 3) {
        let plain = forward_logits(&w, &t).unwrap();
        let (cached, cache) = forward_with_cache(&w, &t, &sites).unwrap();
        assert_eq!(plain, cached);
        assert_eq!(cache.len(), sites.len() * t.len());
    }
}

/// Expand a grouped-query bundle into an equivalent multi-head bundle.
fn duplicate_kv(w: &WeightBundle) -> WeightBundle {
    let c = &w.config;
    let (d, dh, group) = (c.d_model, c.d_head, c.group_size());
    let mut m = w.clone();
    m.config.n_kv_heads = c.n_heads;
    let widen = |t: &Tensor| {
        let kv = t.shape[1];
        let mut out = Vec::with_capacity(d * c.n_heads * dh);
        for r in 0..d {
            for h in 0..c.n_heads {
                let g = h / group;
                out.extend_from_slice(&t.data[r * kv + g * dh..r * kv + (g + 1) * dh]);
            }
        }
        Tensor::new(vec![d, c.n_heads * dh], out)
    };
    let widen_b = |t: &Tensor| {
        let data = (0..c.n_heads)
            .flat_map(|h| t.data[(h / group) * dh..(h / group + 1) * dh].to_vec())
            .collect();
        Tensor::new(vec![c.n_heads * dh], data)
    };
    for lw in &mut m.layers {
        lw.k_w = widen(&lw.k_w);
        lw.v_w = widen(&lw.v_w);
        lw.k_b = lw.k_b.as_ref().map(widen_b);
        lw.v_b = lw.v_b.as_ref().map(widen_b);
    }
    m.validate().unwrap();
    m
}

#[test]
fn grouped_query_equals_duplicated_heads() {
    for kv in [1, 2] {
        let mut cfg = ModelConfig::toy_llama(60);
        cfg.n_kv_heads = kv;
        let gqa = WeightBundle::random(cfg, 7).unwrap();
        let mha = duplicate_kv(&gqa);
        for t in random_prompts(10, 60, 1, 20, 9) {
            let a = forward_logits(&gqa, &t).unwrap();
            let b = forward_logits(&mha, &t).unwrap();
            let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(diff < 1e-6, "kv={kv}: {diff}");
        }
    }
}

#[test]
fn last_position_fast_path_is_bit_identical() {
    let w = WeightBundle::random(ModelConfig::toy(70), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in random_prompts(10, 70, 2, 25, 8) {
        let last = t.len() - 1;
        let state = PrefixState::new(&w, &t).unwrap();
        assert_eq!(state.logits(), forward_logits(&w, &t).unwrap().as_slice());
        let mut spec = PatchSpec::new();
        let layer = rng.gen_range(0..4);
        let v: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        spec.insert(HookSite::attn_out(layer), last, v).unwrap();
        let fast = state.patched_logits(&w, &spec).unwrap();
        let full = forward_with_patches(&w, &t, &spec).unwrap();
        assert_eq!(fast, full);
    }
}

fn all_sites(c: &ModelConfig) -> Vec<HookSite> {
    [
        SiteKind::ResidPre,
        SiteKind::AttnOut,
        SiteKind::MlpOut,
        SiteKind::HeadOut,
    ]
    .iter()
    .flat_map(|&k| HookSite::all_of_kind(c, k))
    .collect()
}

#[test]
fn self_patch_identity() {
    let start = Instant::now();
    let w = WeightBundle::random(ModelConfig::toy(80), 21).unwrap();
    let sites = all_sites(&w.config);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let prompts = random_prompts(50, 80, 2, 20, 13);
    let mut worst = 0.0f32;
    for t in &prompts {
        let (base, cache) = forward_with_cache(&w, t, &sites).unwrap();
        for _ in 0..20 {
            let k = rng.gen_range(1..=6);
            let chosen: Vec<HookSite> = sites.choose_multiple(&mut rng, k).copied().collect();
            let all_pos = rng.gen_bool(0.5);
            let mut spec = PatchSpec::new();
            for &s in &chosen {
                let positions: Vec<usize> = if all_pos {
                    (0..t.len()).collect()
                } else {
                    vec![t.len() - 1]
                };
                for p in positions {
                    spec.insert(s, p, cache.require(s, p).unwrap().to_vec()).unwrap();
                }
            }
            let patched = forward_with_patches(&w, t, &spec).unwrap();
            for (a, b) in patched.iter().zip(&base) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-5, "max deviation {worst}");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn heads_sum_to_attention_output() {
    for cfg in [ModelConfig::toy(90), ModelConfig::toy_llama(90)] {
        let w = WeightBundle::random(cfg, 6).unwrap();
        let sites: Vec<HookSite> = [SiteKind::AttnOut, SiteKind::HeadOut]
            .iter()
            .flat_map(|&k| HookSite::all_of_kind(&w.config, k))
            .collect();
        for t in random_prompts(100, 90, 1, 12, 31) {
            let (_, cache) = forward_with_cache(&w, &t, &sites).unwrap();
            for l in 0..w.config.n_layers {
                for p in 0..t.len() {
                    let attn = cache.require(HookSite::attn_out(l), p).unwrap();
                    let mut sum = vec![0.0f32; attn.len()];
                    for h in 0..w.config.n_heads {
                        for (s, v) in sum.iter_mut().zip(cache.require(HookSite::head_out(l, h), p).unwrap()) {
                            *s += v;
                        }
                    }
                    let diff = sum.iter().zip(attn).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
                    assert!(diff < 1e-5, "L{l} pos {p}: {diff}");
                }
            }
        }
    }
}

#[test]
fn patched_captures_record_injected_values() {
    let w = WeightBundle::random(ModelConfig::toy(40), 1).unwrap();
    let t = [3, 1, 4, 1, 5];
    let v = vec![0.25f32; 64];
    let spec = PatchSpec::new().with(HookSite::mlp_out(2), 4, v.clone()).unwrap();
    let (_, cache) =
        forward_patched_with_capture(&w, &t, &spec, &Capture::all_positions([HookSite::mlp_out(2)])).unwrap();
    assert_eq!(cache.require(HookSite::mlp_out(2), 4).unwrap(), v.as_slice());
    assert_ne!(cache.require(HookSite::mlp_out(2), 3).unwrap(), v.as_slice());
}

#[test]
fn batch_results_do_not_depend_on_parallelism() {
    let w = WeightBundle::random(ModelConfig::toy_llama(64), 3).unwrap();
    let prompts = random_prompts(24, 64, 1, 30, 2);
    let seq = Exec::Sequential.map(&prompts, |t| forward_logits(&w, t).unwrap());
    let par = Exec::default().map(&prompts, |t| forward_logits(&w, t).unwrap());
    assert_eq!(seq, par);
}

#[test]
fn invalid_inputs_are_reported() {
    let w = WeightBundle::random(ModelConfig::toy(20), 1).unwrap();
    assert!(matches!(
        forward_logits(&w, &[]),
        Err(FixlabError::SequenceLength { .. })
    ));
    assert!(matches!(
        forward_logits(&w, &[1, 20]),
        Err(FixlabError::TokenOutOfRange {
            id: 20,
            position: 1,
            ..
        })
    ));
    let long = vec![1u32; 513];
    assert!(forward_logits(&w, &long).is_err());
    let bad = PatchSpec::new().with(HookSite::attn_out(9), 0, vec![0.0; 64]);
    assert!(bad.is_err() || forward_with_patches(&w, &[1, 2], &bad.unwrap()).is_err());
    let short = PatchSpec::new().with(HookSite::attn_out(0), 0, vec![0.0; 3]);
    assert!(short.is_err() || forward_with_patches(&w, &[1, 2], &short.unwrap()).is_err());
}

#[test]
fn weight_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for (name, cfg) in configs() {
        let w = WeightBundle::random(cfg, 5).unwrap();
        let path = dir.path().join(format!("{name}.fxb"));
        save_weights(&w, &path, DType::F32).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, w);
        save_weights(&w, &path, DType::F16).unwrap();
        let half = load_weights(&path).unwrap();
        let t = [1, 2, 3, 4];
        let a = forward_logits(&w, &t).unwrap();
        let b = forward_logits(&half, &t).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff < 5e-2, "{name}: f16 drift {diff}");
    }
}
