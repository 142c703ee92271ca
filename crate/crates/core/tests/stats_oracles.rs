// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{
    discrete_quantile, exhaustive_cluster_resamples, naive_spearman_rho, spearman_permutation_p, wilcoxon_enumerated,
};
use fixlab_core::stats::calibration::calibrate_item;
use fixlab_core::stats::{
    bonferroni, cluster_bootstrap_ci, cluster_bootstrap_groups, kfold_cv, kfold_cv_select, spearman,
    wilcoxon_signed_rank, Alternative, BootstrapOptions,
};
use fixlab_core::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn wilcoxon_matches_sign_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 5..=10 {
        for trial in 0..40 {
            // small integers produce ties and zeros
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    if trial % 2 == 0 {
                        f64::from(rng.gen_range(-4i32..=6))
                    } else {
                        rng.gen_range(-1.0..1.5)
                    }
                })
                .collect();
            if diffs.iter().filter(|d| **d != 0.0).count() < 5 {
                continue;
            }
            let got = wilcoxon_signed_rank(&diffs).unwrap();
            let (g, l, two) = wilcoxon_enumerated(&diffs);
            assert!(got.exact);
            assert!((got.p_greater - g).abs() < 1e-12, "{diffs:?}");
            assert!((got.p_less - l).abs() < 1e-12, "{diffs:?}");
            assert!((got.p_two_sided - two).abs() < 1e-12, "{diffs:?}");
        }
    }
}

#[test]
fn wilcoxon_all_positive_six() {
    let r = wilcoxon_signed_rank(&[1., 2., 3., 4., 5., 6.]).unwrap();
    assert_eq!(r.p_greater, 1.0 / 64.0);
    assert_eq!(r.w_plus, 21.0);
}

#[test]
fn spearman_matches_permutation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 5..=8 {
        for _ in 0..10 {
            let x: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6))).collect();
            let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-3.0..3.0)).collect();
            if x.iter().all(|v| *v == x[0]) {
                continue;
            }
            for (alt, sign) in [
                (Alternative::Positive, 1),
                (Alternative::Negative, -1),
                (Alternative::TwoSided, 0),
            ] {
                let got = spearman(&x, &y, alt, 5).unwrap();
                assert!((got.rho - naive_spearman_rho(&x, &y)).abs() < 1e-12);
                let want = spearman_permutation_p(&x, &y, sign);
                assert!((got.p - want).abs() < 0.01, "n={n} {alt:?}: {} vs {want}", got.p);
            }
        }
    }
}

#[test]
fn spearman_sampled_permutations_track_the_exact_oracle() {
    // n = 9 is sampled by the library but still enumerable here
    let x: Vec<f64> = (0..9).map(f64::from).collect();
    let y = [2.0, 1.0, 4.0, 3.0, 7.0, 5.0, 6.0, 9.0, 8.0];
    let want = spearman_permutation_p(&x, &y, 1);
    let got = spearman(&x, &y, Alternative::Positive, 17).unwrap();
    assert!((got.p - want).abs() < 0.01, "{} vs {want}", got.p);
    let y2 = [5.0, 1.0, 8.0, 3.0, 2.0, 9.0, 4.0, 6.0, 7.0];
    let want = spearman_permutation_p(&x, &y2, 0);
    let got = spearman(&x, &y2, Alternative::TwoSided, 17).unwrap();
    assert!((got.p - want).abs() < 0.01, "{} vs {want}", got.p);
}

#[test]
fn bootstrap_matches_exhaustive_resampling() {
    let cases = [
        vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![5.0, 4.0]],
        vec![vec![1.0, 1.0], vec![0.0, 2.0], vec![7.0, 3.0]],
        vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]],
    ];
    for (i, clusters) in cases.iter().enumerate() {
        let dist = exhaustive_cluster_resamples(clusters);
        assert_eq!(dist.len(), 27);
        let (lo, hi) = (discrete_quantile(&dist, 0.025), discrete_quantile(&dist, 0.975));
        for key in [1, 2, 99] {
            let ci = cluster_bootstrap_groups(clusters, BootstrapOptions::new(key)).unwrap();
            assert!((ci.lo - lo).abs() < 0.02, "case {i}: lo {} vs {lo}", ci.lo);
            assert!((ci.hi - hi).abs() < 0.02, "case {i}: hi {} vs {hi}", ci.hi);
        }
    }
}

#[test]
fn bootstrap_is_schedule_independent() {
    let obs: Vec<(u64, f64)> = (0..60).map(|i| (i % 7, ((i * 37) % 11) as f64 / 10.0)).collect();
    let mut seq = BootstrapOptions::new(123);
    seq.exec = Exec::Sequential;
    let par = BootstrapOptions::new(123);
    let a = cluster_bootstrap_ci(&obs, seq).unwrap();
    let b = cluster_bootstrap_ci(&obs, par).unwrap();
    assert_eq!(a, b);
    let c = cluster_bootstrap_ci(&obs, BootstrapOptions::new(124)).unwrap();
    assert_eq!(a.point, c.point);
}

#[test]
fn kfold_held_out_means_match_hand_computation() {
    // cluster c contributes values c and c + 0.5
    let obs: Vec<(u64, f64)> = (0..8u64).flat_map(|c| [(c, c as f64), (c, c as f64 + 0.5)]).collect();
    let folds = kfold_cv(&obs, 4, 42).unwrap();
    assert_eq!(folds.len(), 4);
    let mut seen = BTreeSet::new();
    for f in &folds {
        assert_eq!(f.clusters.len(), 2);
        seen.extend(f.clusters.iter().copied());
        let want = f.clusters.iter().map(|&c| c as f64 + 0.25).sum::<f64>() / 2.0;
        assert_eq!(f.n, 4);
        assert!((f.mean - want).abs() < 1e-12);
    }
    assert_eq!(seen, (0..8).collect());
    assert_eq!(kfold_cv(&obs, 4, 42).unwrap(), folds);
}

#[test]
fn kfold_selection_picks_the_training_winner() {
    let obs = |bias: f64| -> Vec<(u64, f64)> { (0..8u64).map(|c| (c, bias + c as f64 * 0.01)).collect() };
    let mut cands = BTreeMap::new();
    cands.insert("[L1,L2,L3]".to_string(), obs(0.2));
    cands.insert("[L7,L10,L11]".to_string(), obs(0.9));
    let folds = kfold_cv_select(&cands, 4, 7).unwrap();
    for f in folds {
        assert_eq!(f.selected.as_deref(), Some("[L7,L10,L11]"));
        let want = f.clusters.iter().map(|&c| 0.9 + c as f64 * 0.01).sum::<f64>() / f.clusters.len() as f64;
        assert!((f.mean - want).abs() < 1e-12);
    }
}

#[test]
fn constant_label_bias_is_removed_by_calibration() {
    // true preference for class 0 is small; a constant offset favours class 1
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut raw_hits = 0;
    for _ in 0..50 {
        let signal: f64 = rng.gen_range(0.01..0.05);
        let bias = [1.0, 20.0];
        let p = [(0.1 + signal) * bias[0], 0.1 * bias[1]];
        let p_hat = [0.1 * bias[0], 0.1 * bias[1]];
        let item = calibrate_item(&p, &p_hat, 0).unwrap();
        raw_hits += usize::from(item.raw_correct);
        assert!(item.calibrated_correct);
    }
    assert_eq!(raw_hits, 0);
}

#[test]
fn bonferroni_caps_at_one() {
    assert_eq!(
        bonferroni(&[0.01, 0.2, 0.6]).unwrap(),
        vec![0.03, 0.6000000000000001, 1.0]
    );
    assert!(bonferroni(&[]).is_err());
}
