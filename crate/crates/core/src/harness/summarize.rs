// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-experiment stats summaries, computed from records alone.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{FixlabError, Result};
use crate::exec::Exec;
use crate::stats::{
    cluster_bootstrap_ci, dose_response, stream_key, wilcoxon_signed_rank, BootstrapOptions, StatsSummary, TrialRecord,
};

fn opts(experiment_id: &str, statistic: &str, stats_seed: u64, exec: Exec) -> BootstrapOptions {
    let mut o = BootstrapOptions::new(stream_key(&format!("{experiment_id}/{statistic}"), stats_seed));
    o.exec = exec;
    o
}

/// Mean with a cluster CI when at least two seeds are present.
pub fn mean_summary(
    statistic: String,
    obs: &[(u64, f64)],
    n_excluded: usize,
    experiment_id: &str,
    stats_seed: u64,
    exec: Exec,
) -> Result<StatsSummary> {
    let n = obs.len();
    let clusters: BTreeSet<u64> = obs.iter().map(|o| o.0).collect();
    let mut s = if n == 0 {
        let mut s = StatsSummary::point(statistic, 0.0, 0);
        s.point = None;
        s
    } else if clusters.len() < 2 {
        StatsSummary::point(statistic, obs.iter().map(|o| o.1).sum::<f64>() / n as f64, n)
    } else {
        let ci = cluster_bootstrap_ci(obs, opts(experiment_id, &statistic, stats_seed, exec))?;
        let mut s = StatsSummary::point(statistic, ci.point, n);
        s.ci = Some([ci.lo, ci.hi]);
        s
    };
    s.n_excluded = n_excluded;
    Ok(s)
}

type Group<'a> = BTreeMap<(String, String, String), Vec<&'a TrialRecord>>;

/// Summaries for every (model, task, condition) group plus paired GP vs
/// control tests, dose-response and intervention recoveries.
pub fn summarize(
    records: &[TrialRecord],
    experiment_id: &str,
    stats_seed: u64,
    exec: Exec,
) -> Result<Vec<StatsSummary>> {
    let mut base: Group = BTreeMap::new();
    let mut patched: BTreeMap<(String, String, String, String), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        let g = (r.model.clone(), r.task.clone(), r.condition.clone());
        match &r.intervention {
            None => base.entry(g).or_default().push(r),
            Some(iv) => patched.entry((g.0, g.1, g.2, iv.label.clone())).or_default().push(r),
        }
    }
    let mut out = Vec::new();
    for ((m, t, c), rs) in &base {
        let tag = format!("{m}/{t}/{c}");
        let acc: Vec<(u64, f64)> = rs.iter().map(|r| (r.seed, f64::from(r.accuracy_bit))).collect();
        out.push(mean_summary(
            format!("accuracy[{tag}]"),
            &acc,
            0,
            experiment_id,
            stats_seed,
            exec,
        )?);
        let pt: Vec<(u64, f64)> = rs.iter().map(|r| (r.seed, r.p_target)).collect();
        out.push(mean_summary(
            format!("p_target[{tag}]"),
            &pt,
            0,
            experiment_id,
            stats_seed,
            exec,
        )?);
        let ps: Vec<(u64, f64)> = rs.iter().map(|r| (r.seed, r.p_demo_set)).collect();
        out.push(mean_summary(
            format!("p_demo_set[{tag}]"),
            &ps,
            0,
            experiment_id,
            stats_seed,
            exec,
        )?);
        let metric_names: BTreeSet<&String> = rs.iter().flat_map(|r| r.metrics.keys()).collect();
        for name in metric_names {
            let v: Vec<(u64, f64)> = rs
                .iter()
                .filter_map(|r| r.metrics.get(name).map(|&x| (r.seed, x)))
                .collect();
            out.push(mean_summary(
                format!("{name}[{tag}]"),
                &v,
                0,
                experiment_id,
                stats_seed,
                exec,
            )?);
        }
        if let Some(lens) = lens_accuracy(rs) {
            for (layer, v) in lens {
                out.push(mean_summary(
                    format!("lens_accuracy[{tag}][L{layer}]"),
                    &v,
                    0,
                    experiment_id,
                    stats_seed,
                    exec,
                )?);
            }
        }
    }
    for ((m, t, c, label), rs) in &patched {
        let obs: Vec<(u64, f64)> = rs
            .iter()
            .filter_map(|r| {
                r.intervention
                    .as_ref()
                    .and_then(|i| i.result.recovery)
                    .map(|v| (r.seed, v))
            })
            .collect();
        let excluded = rs.len() - obs.len();
        out.push(mean_summary(
            format!("recovery[{m}/{t}/{c}][{label}]"),
            &obs,
            excluded,
            experiment_id,
            stats_seed,
            exec,
        )?);
    }
    out.extend(paired_tests(&base)?);
    out.extend(dose_summaries(&base, experiment_id, stats_seed, exec)?);
    Ok(out)
}

fn lens_accuracy(rs: &[&TrialRecord]) -> Option<BTreeMap<usize, Vec<(u64, f64)>>> {
    let mut by_layer: BTreeMap<usize, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rs {
        for p in r.lens.as_ref()? {
            by_layer
                .entry(p.layer)
                .or_default()
                .push((r.seed, f64::from(p.correct)));
        }
    }
    (!by_layer.is_empty()).then_some(by_layer)
}

/// Wilcoxon on `p_target(ctrl) - p_target(cond)` paired by (seed, item)
/// for every non-control condition of a model/task with a balanced control.
fn paired_tests(base: &Group) -> Result<Vec<StatsSummary>> {
    let mut out = Vec::new();
    for ((m, t, c), rs) in base {
        if c == "ctrl_balanced" {
            continue;
        }
        let Some(ctrl) = base.get(&(m.clone(), t.clone(), "ctrl_balanced".to_string())) else {
            continue;
        };
        let ctrl_map: BTreeMap<(u64, &str), f64> = ctrl
            .iter()
            .map(|r| ((r.seed, r.item_id.as_str()), r.p_target))
            .collect();
        let diffs: Vec<f64> = rs
            .iter()
            .filter_map(|r| ctrl_map.get(&(r.seed, r.item_id.as_str())).map(|p| p - r.p_target))
            .collect();
        if diffs.is_empty() {
            continue;
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let mut s = StatsSummary::point(format!("p_target_gap[{m}/{t}/ctrl_balanced-{c}]"), mean, diffs.len());
        match wilcoxon_signed_rank(&diffs) {
            Ok(w) => {
                s.test = Some("wilcoxon_signed_rank".into());
                s.p_raw = Some(w.p_two_sided);
            }
            Err(FixlabError::Stats(_)) => {}
            Err(e) => return Err(e),
        }
        out.push(s);
    }
    let n = out.iter().filter(|s| s.p_raw.is_some()).count();
    for s in &mut out {
        s.p_adjusted = s.p_raw.map(|p| (p * n as f64).min(1.0));
    }
    Ok(out)
}

fn dose_summaries(base: &Group, experiment_id: &str, stats_seed: u64, exec: Exec) -> Result<Vec<StatsSummary>> {
    let mut by_mt: BTreeMap<(String, String), Vec<TrialRecord>> = BTreeMap::new();
    for ((m, t, _), rs) in base {
        for r in rs.iter().filter(|r| r.k.is_some()) {
            by_mt.entry((m.clone(), t.clone())).or_default().push((*r).clone());
        }
    }
    let mut out = Vec::new();
    for ((m, t), rs) in by_mt {
        let ks: BTreeSet<usize> = rs.iter().filter_map(|r| r.k).collect();
        let seeds: BTreeSet<u64> = rs.iter().map(|r| r.seed).collect();
        if ks.len() < 2 || seeds.len() < 2 || rs.len() < 5 {
            continue;
        }
        let statistic = format!("dose_spearman[{m}/{t}]");
        match dose_response(&rs, opts(experiment_id, &statistic, stats_seed, exec)) {
            Ok(d) => {
                let mut s = StatsSummary::point(statistic, d.spearman.rho, d.spearman.n);
                s.test = Some("spearman_one_sided_negative".into());
                s.p_raw = Some(d.spearman.p);
                s.p_adjusted = Some(d.spearman.p);
                out.push(s);
            }
            Err(FixlabError::Stats(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Write summaries as a pretty JSON array.
pub fn write_summaries(path: impl AsRef<Path>, summaries: &[StatsSummary]) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(&serde_json::to_value(summaries)?)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| FixlabError::io(path, e))
}
