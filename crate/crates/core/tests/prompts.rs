// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::sync::OnceLock;

use fixlab_core::exec::with_threads;
use fixlab_core::harness::single_token_gate;
use fixlab_core::prompts::{
    build_prompt, render_format_variant, verify_single_token, write_prompts_jsonl, ConditionKind, ConditionSpec, Item,
    PromptInstance, TaskSet, Tokenizer, NONSENSE,
};
use fixlab_core::{Exec, FixlabError};

const SEEDS: [u64; 10] = [42, 0, 1, 2, 3, 7, 13, 21, 55, 99];

fn render_all(ts: &TaskSet, tok: &Tokenizer, exec: Exec) -> Vec<u8> {
    let task = ts.get("category").unwrap();
    let kinds = [
        ConditionKind::Gp,
        ConditionKind::CtrlBalanced,
        ConditionKind::Random,
        ConditionKind::HomogNonsense,
        ConditionKind::VariedNonsense,
    ];
    let mut units: Vec<(ConditionSpec, &Item)> = Vec::new();
    for k in &kinds {
        for &seed in &SEEDS {
            for item in task.query_items(0, 20).unwrap() {
                units.push((ConditionSpec::eight(k.clone(), seed), item));
            }
        }
    }
    assert_eq!(units.len(), 1000);
    let prompts = exec.map(&units, |(spec, item)| build_prompt(task, spec, item, tok).unwrap());
    let mut out = Vec::new();
    write_prompts_jsonl(&prompts, &mut out).unwrap();
    out
}

#[test]
fn thousand_renders_are_byte_identical() {
    let ts = TaskSet::bundled().unwrap();
    let tok = Tokenizer::neox().unwrap();
    let a = with_threads(1, || render_all(&ts, &tok, Exec::default()));
    let b = with_threads(8, || render_all(&ts, &tok, Exec::default()));
    let c = render_all(&ts, &tok, Exec::Sequential);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 1000);
}

fn fixtures() -> &'static (TaskSet, Tokenizer) {
    static CELL: OnceLock<(TaskSet, Tokenizer)> = OnceLock::new();
    CELL.get_or_init(|| (TaskSet::bundled().unwrap(), Tokenizer::neox().unwrap()))
}

fn prompt(kind: ConditionKind, seed: u64, class: usize, idx: usize) -> PromptInstance {
    let (ts, tok) = fixtures();
    let task = ts.get("category").unwrap();
    build_prompt(task, &ConditionSpec::eight(kind, seed), &task.pools[class][idx], tok).unwrap()
}

#[test]
fn balanced_control_has_equal_label_counts() {
    for seed in SEEDS {
        for idx in [0, 5, 19] {
            let p = prompt(ConditionKind::CtrlBalanced, seed, 0, idx);
            let mut counts = BTreeMap::new();
            for l in &p.demo_labels {
                *counts.entry(l.as_str()).or_insert(0) += 1;
            }
            assert_eq!(counts, BTreeMap::from([("cat", 4), ("dog", 4)]));
        }
    }
}

#[test]
fn query_never_appears_among_demonstrations() {
    let kinds = [
        ConditionKind::Gp,
        ConditionKind::CtrlBalanced,
        ConditionKind::Random,
        ConditionKind::ThresholdK(3),
    ];
    for kind in kinds {
        for seed in SEEDS {
            for idx in 0..20 {
                let p = prompt(kind.clone(), seed, 0, idx);
                assert!(!p.demo_item_ids.contains(&p.query_item_id), "{kind} {seed} {idx}");
            }
        }
    }
}

#[test]
fn garden_path_directions_mirror() {
    for seed in SEEDS {
        let gp = prompt(ConditionKind::Gp, seed, 0, 3);
        let rev = prompt(ConditionKind::ReverseGp, seed, 1, 3);
        assert!(gp.demo_labels.iter().all(|l| l == "cat"));
        assert!(rev.demo_labels.iter().all(|l| l == "dog"));
        assert_eq!((gp.answer_label.as_str(), gp.foil_labels[0].as_str()), ("dog", "cat"));
        assert_eq!((rev.answer_label.as_str(), rev.foil_labels[0].as_str()), ("cat", "dog"));
        assert_eq!(gp.demo_labels.len(), rev.demo_labels.len());
        assert_eq!(gp.answer_token, rev.foil_tokens[0]);
        assert_eq!(rev.answer_token, gp.foil_tokens[0]);
        let (gp_demo, rev_demo) = (gp.demo_label_multiset.clone(), rev.demo_label_multiset.clone());
        assert_eq!(gp_demo, vec![vec![gp.foil_tokens[0]]; 8]);
        assert_eq!(rev_demo, vec![vec![rev.foil_tokens[0]]; 8]);
    }
}

#[test]
fn varied_nonsense_uses_every_token_with_three_doubled() {
    let ts = TaskSet::bundled().unwrap();
    let task = ts.get("category").unwrap();
    let tok = Tokenizer::neox().unwrap();
    for seed in 0..100 {
        let spec = ConditionSpec::eight(ConditionKind::VariedNonsense, seed);
        let p = build_prompt(task, &spec, &task.pools[0][seed as usize % 20], &tok).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &p.demo_labels {
            *counts.entry(l.as_str()).or_default() += 1;
        }
        assert_eq!(p.demo_labels.len(), 8);
        assert_eq!(counts.len(), 5, "seed {seed}: {counts:?}");
        assert!(NONSENSE.iter().all(|n| counts.contains_key(n)));
        assert_eq!(counts.values().filter(|&&c| c == 2).count(), 3);
        assert!(counts.values().all(|&c| c == 1 || c == 2));
    }
}

#[test]
fn format_variants_keep_demo_lines_comparable() {
    let ts = TaskSet::bundled().unwrap();
    let task = ts.get("category").unwrap();
    let tok = Tokenizer::neox().unwrap();
    for item in task.pools.iter().flatten() {
        let counts: Vec<usize> = (1..=5)
            .map(|v| {
                let t = render_format_variant(v).unwrap();
                let line = format!("{}{}", t.demo(&item.text, "cat"), t.separator);
                tok.encode(&line).unwrap().len()
            })
            .collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 4, "{}: {counts:?}", item.text);
    }
    assert!(render_format_variant(6).is_err());
}

#[test]
fn listed_token_ids_reproduce() {
    let neox = Tokenizer::neox().unwrap();
    let llama = Tokenizer::llama3().unwrap();
    let triples = [
        (&neox, "foo", 17374),
        (&neox, "bar", 2534),
        (&neox, "vex", 49322),
        (&neox, "nit", 12389),
        (&neox, "orb", 36391),
        (&llama, "foo", 15586),
        (&llama, "bar", 3703),
        (&llama, "vex", 84265),
        (&llama, "nit", 25719),
        (&llama, "orb", 37466),
    ];
    for (tok, label, id) in triples {
        assert_eq!(tok.single_token(label).unwrap(), id, "{} {label}", tok.family());
    }
    let labels = ["dog", "cat", "positive", "negative", "hot", "cold", "big", "small"];
    for tok in [&neox, &llama] {
        assert_eq!(verify_single_token(tok, &labels).unwrap().len(), 8);
    }
}

#[test]
fn gate_rejects_multi_token_labels() {
    let json = r#"{"version": 1, "tasks": [{
        "task": "odd",
        "classes": [
            {"label": "dog", "items": ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"]},
            {"label": "xylophonically", "items": ["k", "l", "m", "n", "o", "p", "q", "r", "s", "t"]}
        ],
        "template": {"item_prefix": "", "label_prefix": ":", "separator": "\n"}
    }]}"#;
    let ts = TaskSet::from_json(json).unwrap();
    let task = ts.get("odd").unwrap();
    for tok in [Tokenizer::neox().unwrap(), Tokenizer::llama3().unwrap()] {
        let err = single_token_gate(&tok, task, &[ConditionKind::Gp]).unwrap_err();
        assert!(matches!(err, FixlabError::NotSingleToken { .. }), "{err}");
    }
    let ts = TaskSet::bundled().unwrap();
    let cat = ts.get("category").unwrap();
    let ok = single_token_gate(&Tokenizer::neox().unwrap(), cat, &[ConditionKind::VariedNonsense]).unwrap();
    assert_eq!(ok.len(), 7);
}

#[test]
fn prompts_end_with_the_shared_query_line() {
    let gp = prompt(ConditionKind::Gp, 42, 0, 7);
    let ctrl = prompt(ConditionKind::CtrlBalanced, 42, 0, 7);
    assert_eq!(gp.query_suffix(), ctrl.query_suffix());
    assert!(gp.text.ends_with(':'));
    assert!(!gp.text.ends_with(": "));
}
