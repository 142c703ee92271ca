// SPDX-License-Identifier: MIT OR Apache-2.0

//! Files produced by the external converter: FXB1 bundles and portable
//! tokenizer documents, assembled here byte by byte without the crate's writer.

use fixlab_core::model::{forward_logits, read_weights, ModelConfig, WeightBundle};
use fixlab_core::prompts::Tokenizer;
use fixlab_core::FixlabError;
use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use unicode_normalization::UnicodeNormalization;

/// FXB1 bytes for `w`, with f16 storage for the tensors named in `half_names`.
fn assemble(w: &WeightBundle, half_names: &[&str]) -> Vec<u8> {
    let named = w.named_tensors();
    let mut header = serde_json::to_value(&w.config).unwrap();
    let dir: Vec<Value> = named
        .iter()
        .map(|(n, t)| {
            let dtype = if half_names.contains(&n.as_str()) { "f16" } else { "f32" };
            json!({"name": n, "dtype": dtype, "shape": t.shape})
        })
        .collect();
    header["tensors"] = Value::Array(dir);
    let text = header.to_string();
    let mut out = b"FXB1".to_vec();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (n, t) in &named {
        while !out.len().is_multiple_of(64) {
            out.push(0);
        }
        for v in &t.data {
            if half_names.contains(&n.as_str()) {
                out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

#[test]
fn hand_assembled_bundle_loads() {
    for cfg in [ModelConfig::toy(33), ModelConfig::toy_llama(33)] {
        let w = WeightBundle::random(cfg, 8).unwrap();
        let bytes = assemble(&w, &[]);
        let back = read_weights(bytes.as_slice(), bytes.len()).unwrap();
        assert_eq!(back, w);
        assert_eq!(
            forward_logits(&back, &[1, 2, 3]).unwrap(),
            forward_logits(&w, &[1, 2, 3]).unwrap()
        );
    }
}

#[test]
fn mixed_dtypes_widen_on_load() {
    let w = WeightBundle::random(ModelConfig::toy(33), 9).unwrap();
    let bytes = assemble(&w, &["embed", "blocks.0.attn.q.weight"]);
    let back = read_weights(bytes.as_slice(), bytes.len()).unwrap();
    let want: Vec<f32> = w.embed.data.iter().map(|v| f16::from_f32(*v).to_f32()).collect();
    assert_eq!(back.embed.data, want);
    assert_eq!(back.unembed, w.unembed);
}

#[test]
fn defective_bundles_are_rejected() {
    let w = WeightBundle::random(ModelConfig::toy(33), 1).unwrap();
    let good = assemble(&w, &[]);

    let truncated = &good[..good.len() - 10];
    assert!(matches!(
        read_weights(truncated, truncated.len()),
        Err(FixlabError::Truncated { .. })
    ));

    // drop one required tensor from the directory
    let len = u32::from_le_bytes(good[4..8].try_into().unwrap()) as usize;
    let mut header: Value = serde_json::from_slice(&good[8..8 + len]).unwrap();
    header["tensors"]
        .as_array_mut()
        .unwrap()
        .retain(|e| e["name"] != "unembed");
    let text = header.to_string();
    let mut missing = b"FXB1".to_vec();
    missing.extend_from_slice(&(text.len() as u32).to_le_bytes());
    missing.extend_from_slice(text.as_bytes());
    missing.resize(good.len(), 0);
    assert!(read_weights(missing.as_slice(), missing.len()).is_err());

    // a shape that disagrees with the config
    let mut header: Value = serde_json::from_slice(&good[8..8 + len]).unwrap();
    header["tensors"][0]["shape"] = json!([34, 64]);
    let text = header.to_string();
    let mut wrong = b"FXB1".to_vec();
    wrong.extend_from_slice(&(text.len() as u32).to_le_bytes());
    wrong.extend_from_slice(text.as_bytes());
    wrong.resize(good.len() + 1024, 0);
    assert!(read_weights(wrong.as_slice(), wrong.len()).is_err());
}

fn tiny_tokenizer(merges: Option<Vec<&str>>) -> Tokenizer {
    // byte-level symbols: "Ġ" is the space byte
    let tokens = ["a", "b", "c", "Ġ", "ab", "Ġab", "abc", "<s>"];
    let doc = json!({
        "format": "fixlab-tokenizer-v1",
        "family": "tiny",
        "pretokenizer": "gpt2",
        "normalizer": null,
        "tokens": tokens,
        "added_tokens": [{"id": 7, "content": "<s>", "special": true}],
        "bos_token_id": 7,
        "bos_policy": "auto_prepend",
        "merges": merges,
    });
    Tokenizer::from_bytes(doc.to_string().as_bytes()).unwrap()
}

#[test]
fn portable_tokenizer_document_with_merges() {
    let t = tiny_tokenizer(Some(vec!["a b", "Ġ ab", "ab c"]));
    assert_eq!(t.vocab_size(), 8);
    assert_eq!(t.encode(" ab").unwrap(), vec![5]);
    assert_eq!(t.encode("abc").unwrap(), vec![6]);
    assert_eq!(t.encode("cab").unwrap(), vec![2, 4]);
    assert_eq!(t.encode_with_bos("ab").unwrap(), vec![7, 4]);
    assert_eq!(t.encode("<s>ab").unwrap(), vec![7, 4]);
    assert_eq!(t.decode(&[5, 2]).unwrap(), " abc");
    assert_eq!(t.single_token("ab").unwrap(), 5);
    assert!(matches!(t.single_token("abc"), Err(FixlabError::NotSingleToken { .. })));
}

#[test]
fn portable_tokenizer_document_ranked_by_id() {
    // without merges, priority is the merged token's id
    let t = tiny_tokenizer(None);
    assert_eq!(t.encode(" ab").unwrap(), vec![5]);
    assert_eq!(t.encode("abc").unwrap(), vec![6]);
}

#[test]
fn unknown_document_fields_are_rejected() {
    let doc = json!({
        "format": "something-else", "family": "x", "pretokenizer": "gpt2", "normalizer": null,
        "tokens": ["a"], "added_tokens": [], "bos_token_id": null, "bos_policy": "none", "merges": null
    });
    assert!(Tokenizer::from_bytes(doc.to_string().as_bytes()).is_err());
    let mut d2 = doc.clone();
    d2["format"] = json!("fixlab-tokenizer-v1");
    d2["pretokenizer"] = json!("sentencepiece");
    assert!(Tokenizer::from_bytes(d2.to_string().as_bytes()).is_err());
}

#[test]
fn vocabulary_strings_round_trip() {
    for (tok, seed) in [(Tokenizer::neox().unwrap(), 1u64), (Tokenizer::llama3().unwrap(), 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checked = 0;
        while checked < 1000 {
            let id = rng.gen_range(0..tok.vocab_size() as u32);
            let s = tok.decode(&[id]).unwrap();
            // skip byte fragments and strings normalization would alter
            if s.contains('\u{FFFD}') || s.is_empty() || s.nfc().collect::<String>() != s {
                continue;
            }
            let ids = tok.encode(&s).unwrap();
            assert_eq!(tok.decode(&ids).unwrap(), s, "{} id {id}", tok.family());
            checked += 1;
        }
    }
}
