// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cluster (seed-level) percentile bootstrap.

use std::collections::BTreeMap;
use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};
use crate::exec::Exec;

/// Default number of bootstrap draws.
pub const DEFAULT_DRAWS: usize = 5000;

/// Point estimate with a percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiResult {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_clusters: usize,
    pub n_draws: usize,
}

/// Key for the counter-based stats RNG.
pub fn stream_key(experiment_id: &str, stats_seed: u64) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(experiment_id.as_bytes());
    h.write_u64(stats_seed);
    h.finish()
}

/// Generator for draw `index` under `key`; independent of scheduling.
pub fn draw_rng(key: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bootstrap options.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapOptions {
    pub draws: usize,
    pub level: f64,
    pub key: u64,
    pub exec: Exec,
}

impl BootstrapOptions {
    pub fn new(key: u64) -> Self {
        Self {
            draws: DEFAULT_DRAWS,
            level: 0.95,
            key,
            exec: Exec::default(),
        }
    }
}

/// Group `(cluster, value)` observations by cluster in key order.
pub fn group_clusters(obs: &[(u64, f64)]) -> Vec<Vec<f64>> {
    let mut map: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for &(c, v) in obs {
        map.entry(c).or_default().push(v);
    }
    map.into_values().collect()
}

fn pooled_mean(clusters: &[Vec<f64>], picks: impl Iterator<Item = usize>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in picks {
        sum += clusters[i].iter().sum::<f64>();
        n += clusters[i].len();
    }
    sum / n as f64
}

/// Percentile CI of the record-level mean, resampling whole clusters.
pub fn cluster_bootstrap_ci(obs: &[(u64, f64)], opts: BootstrapOptions) -> Result<CiResult> {
    let clusters = group_clusters(obs);
    cluster_bootstrap_groups(&clusters, opts)
}

/// [`cluster_bootstrap_ci`] over pre-grouped clusters.
pub fn cluster_bootstrap_groups(clusters: &[Vec<f64>], opts: BootstrapOptions) -> Result<CiResult> {
    let nc = clusters.len();
    if nc < 2 {
        return Err(FixlabError::Stats(format!(
            "cluster bootstrap needs at least 2 clusters, got {nc}"
        )));
    }
    if clusters.iter().any(Vec::is_empty) {
        return Err(FixlabError::Stats("empty cluster".into()));
    }
    if opts.draws == 0 || !(0.0..1.0).contains(&opts.level) || opts.level <= 0.0 {
        return Err(FixlabError::Stats("draws must be positive and level in (0, 1)".into()));
    }
    let point = pooled_mean(clusters, 0..nc);
    let mut stats = opts.exec.map_range(opts.draws, |d| {
        let mut rng = draw_rng(opts.key, d as u64);
        let picks: Vec<usize> = (0..nc).map(|_| rng.gen_range(0..nc)).collect();
        pooled_mean(clusters, picks.into_iter())
    });
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - opts.level) / 2.0;
    Ok(CiResult {
        point,
        lo: quantile_sorted(&stats, alpha),
        hi: quantile_sorted(&stats, 1.0 - alpha),
        n_clusters: nc,
        n_draws: opts.draws,
    })
}
