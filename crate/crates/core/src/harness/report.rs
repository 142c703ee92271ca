// SPDX-License-Identifier: MIT OR Apache-2.0

//! Figure and table data files, recomputed from records alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{FixlabError, Result};
use crate::exec::Exec;
use crate::stats::{dose_response, stream_key, BootstrapOptions, TrialRecord};

use super::measure::{P_FORMAT, P_GIVEN_PREFIX};
use super::summarize::mean_summary;

/// Metric key holding the joint size of a cumulative head patch.
pub const CUMULATIVE_K: &str = "cumulative_k";

/// Report targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Figure {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
    Tab1,
    Tab2,
    Tab3,
    Tab4,
    Tab5,
}

impl Figure {
    pub const ALL: [Figure; 9] = [
        Self::Fig1,
        Self::Fig2,
        Self::Fig3,
        Self::Fig4,
        Self::Tab1,
        Self::Tab2,
        Self::Tab3,
        Self::Tab4,
        Self::Tab5,
    ];

    /// Column header of the emitted CSV (tab5 adds one column per verbalizer).
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Self::Fig1 => &[
                "model",
                "task",
                "k",
                "n",
                "accuracy",
                "ci_lo",
                "ci_hi",
                "spearman_rho",
                "spearman_p",
            ],
            Self::Fig2 => &[
                "model",
                "task",
                "condition",
                "intervention",
                "n_items",
                "n_excluded",
                "mean_recovery",
                "ci_lo",
                "ci_hi",
            ],
            Self::Fig3 => &[
                "model",
                "task",
                "condition",
                "layer",
                "n",
                "accuracy",
                "mean_p_target",
                "mean_p_foil",
            ],
            Self::Fig4 => &["model", "p_label_homog", "p_set_varied", "p_dog_varied"],
            Self::Tab1 => &[
                "model",
                "gp_accuracy",
                "ctrl_accuracy",
                "ctrl_seed_sd",
                "gap_pp",
                "dose_rho",
                "dose_p",
            ],
            Self::Tab2 => &["model", "task", "gp_accuracy", "ctrl_accuracy", "gap_pp"],
            Self::Tab3 => &[
                "model",
                "task",
                "k",
                "heads",
                "n_items",
                "n_excluded",
                "mean_recovery",
                "ci_lo",
                "ci_hi",
            ],
            Self::Tab4 => &["model", "condition", "n", "p_correct", "accuracy"],
            Self::Tab5 => &["model", "condition", "n", "p_format"],
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Fig1 => "fig1",
            Self::Fig2 => "fig2",
            Self::Fig3 => "fig3",
            Self::Fig4 => "fig4",
            Self::Tab1 => "tab1",
            Self::Tab2 => "tab2",
            Self::Tab3 => "tab3",
            Self::Tab4 => "tab4",
            Self::Tab5 => "tab5",
        };
        f.write_str(s)
    }
}

impl FromStr for Figure {
    type Err = FixlabError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| FixlabError::Harness(format!("unknown figure `{s}` (fig1..fig4, tab1..tab5)")))
    }
}

/// A rendered table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ReportTable {
    fn new(header: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    /// Cell by column name.
    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        let i = self.header.iter().position(|h| h == column)?;
        self.rows.get(row).map(|r| r[i].as_str())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| FixlabError::from(std::io::Error::other(e));
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| FixlabError::from(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| FixlabError::Harness(e.to_string()))
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn coverage(figure: Figure, missing: Vec<String>) -> FixlabError {
    FixlabError::Coverage {
        figure: figure.to_string(),
        missing,
    }
}

struct Ctx<'a> {
    records: &'a [TrialRecord],
    stats_seed: u64,
    exec: Exec,
    figure: Figure,
}

impl Ctx<'_> {
    fn base(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(|r| r.intervention.is_none())
    }

    fn models(&self) -> BTreeSet<&str> {
        self.base().map(|r| r.model.as_str()).collect()
    }

    fn select(&self, model: &str, task: Option<&str>, condition: &str) -> Vec<&TrialRecord> {
        self.base()
            .filter(|r| r.model == model && r.condition == condition && task.is_none_or(|t| r.task == t))
            .collect()
    }

    fn ci(&self, group: &str, obs: &[(u64, f64)], excluded: usize) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
        let s = mean_summary(
            group.to_string(),
            obs,
            excluded,
            &format!("report/{}", self.figure),
            self.stats_seed,
            self.exec,
        )?;
        let (lo, hi) = s.ci.map_or((None, None), |c| (Some(c[0]), Some(c[1])));
        Ok((s.point, lo, hi))
    }
}

fn acc_obs(rs: &[&TrialRecord]) -> Vec<(u64, f64)> {
    rs.iter().map(|r| (r.seed, f64::from(r.accuracy_bit))).collect()
}

fn fig1(c: &Ctx) -> Result<ReportTable> {
    let mut t = ReportTable::new(Figure::Fig1.columns().iter().copied());
    let mut groups: BTreeMap<(&str, &str), Vec<TrialRecord>> = BTreeMap::new();
    for r in c.base().filter(|r| r.k.is_some()) {
        groups.entry((&r.model, &r.task)).or_default().push(r.clone());
    }
    for ((m, task), rs) in &groups {
        if rs.iter().map(|r| r.k).collect::<BTreeSet<_>>().len() < 2 {
            continue;
        }
        let key = stream_key(&format!("report/fig1/{m}/{task}"), c.stats_seed);
        let mut o = BootstrapOptions::new(key);
        o.exec = c.exec;
        let d = dose_response(rs, o)?;
        for p in &d.points {
            t.rows.push(vec![
                m.to_string(),
                task.to_string(),
                p.k.to_string(),
                p.n.to_string(),
                num(p.accuracy.point),
                num(p.accuracy.lo),
                num(p.accuracy.hi),
                num(d.spearman.rho),
                num(d.spearman.p),
            ]);
        }
    }
    if t.rows.is_empty() {
        return Err(coverage(
            Figure::Fig1,
            vec!["records with at least two distinct dose values k".into()],
        ));
    }
    Ok(t)
}

fn fig2(c: &Ctx) -> Result<ReportTable> {
    let mut t = ReportTable::new(Figure::Fig2.columns().iter().copied());
    let mut groups: BTreeMap<(&str, &str, &str, &str), Vec<&TrialRecord>> = BTreeMap::new();
    for r in c.records {
        if let Some(iv) = &r.intervention {
            if !r.metrics.contains_key(CUMULATIVE_K) {
                groups
                    .entry((&r.model, &r.task, &r.condition, &iv.label))
                    .or_default()
                    .push(r);
            }
        }
    }
    if groups.is_empty() {
        return Err(coverage(Figure::Fig2, vec!["records with an intervention".into()]));
    }
    for ((m, task, cond, label), rs) in groups {
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
        let (p, lo, hi) = c.ci(&format!("{m}/{task}/{cond}/{label}"), &obs, excluded)?;
        t.rows.push(vec![
            m.into(),
            task.into(),
            cond.into(),
            label.into(),
            rs.len().to_string(),
            excluded.to_string(),
            opt(p),
            opt(lo),
            opt(hi),
        ]);
    }
    Ok(t)
}

/// (model, task, condition, layer)
type LensKey<'a> = (&'a str, &'a str, &'a str, usize);

fn fig3(c: &Ctx) -> Result<ReportTable> {
    let mut t = ReportTable::new(Figure::Fig3.columns().iter().copied());
    let mut groups: BTreeMap<LensKey, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in c.base() {
        for p in r.lens.iter().flatten() {
            groups
                .entry((&r.model, &r.task, &r.condition, p.layer))
                .or_default()
                .push((f64::from(p.correct), p.p_target, p.p_foil));
        }
    }
    if groups.is_empty() {
        return Err(coverage(Figure::Fig3, vec!["records with a lens trajectory".into()]));
    }
    for ((m, task, cond, layer), v) in groups {
        t.rows.push(vec![
            m.into(),
            task.into(),
            cond.into(),
            layer.to_string(),
            v.len().to_string(),
            opt(mean(v.iter().map(|x| x.0))),
            opt(mean(v.iter().map(|x| x.1))),
            opt(mean(v.iter().map(|x| x.2))),
        ]);
    }
    Ok(t)
}

fn fig4(c: &Ctx) -> Result<ReportTable> {
    let mut t = ReportTable::new(Figure::Fig4.columns().iter().copied());
    let mut missing = Vec::new();
    let models = c.models();
    for m in &models {
        let homog = c.select(m, None, "homog_nonsense");
        let varied = c.select(m, None, "varied_nonsense");
        if homog.is_empty() || varied.is_empty() {
            if homog.is_empty() {
                missing.push(format!("{m}: homog_nonsense"));
            }
            if varied.is_empty() {
                missing.push(format!("{m}: varied_nonsense"));
            }
            continue;
        }
        t.rows.push(vec![
            m.to_string(),
            opt(mean(homog.iter().map(|r| r.p_demo_set))),
            opt(mean(varied.iter().map(|r| r.p_demo_set))),
            opt(mean(varied.iter().map(|r| r.p_target))),
        ]);
    }
    if models.is_empty() {
        missing.push("no records".into());
    }
    if !missing.is_empty() {
        return Err(coverage(Figure::Fig4, missing));
    }
    Ok(t)
}

fn per_seed_sd(rs: &[&TrialRecord]) -> Option<f64> {
    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in rs {
        by_seed.entry(r.seed).or_default().push(f64::from(r.accuracy_bit));
    }
    let means: Vec<f64> = by_seed
        .values()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    if means.len() < 2 {
        return None;
    }
    let m = means.iter().sum::<f64>() / means.len() as f64;
    Some((means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt())
}

fn tab1(c: &Ctx) -> Result<ReportTable> {
    let mut t = ReportTable::new(Figure::Tab1.columns().iter().copied());
    let mut missing = Vec::new();
    let models = c.models();
    if models.is_empty() {
        missing.push("no records".into());
    }
    for m in &models {
        let gp = c.select(m, Some("category"), "gp");
        let ctrl = c.select(m, Some("category"), "ctrl_balanced");
        if gp.is_empty() || ctrl.is_empty() {
            for (name, v) in [("gp", &gp), ("ctrl_balanced", &ctrl)] {
                if v.is_empty() {
                    missing.push(format!("{m}: category/{name}"));
                }
            }
            continue;
        }
        let ga = mean(gp.iter().map(|r| f64::from(r.accuracy_bit))).unwrap_or(f64::NAN);
        let ca = mean(ctrl.iter().map(|r| f64::from(r.accuracy_bit))).unwrap_or(f64::NAN);
        let dose: Vec<TrialRecord> = c
            .base()
            .filter(|r| r.model == *m && r.task == "category" && r.k.is_some())
            .cloned()
            .collect();
        let ks: BTreeSet<usize> = dose.iter().filter_map(|r| r.k).collect();
        let (rho, p) = if ks.len() >= 2 {
            let mut o = BootstrapOptions::new(stream_key(&format!("report/tab1/{m}"), c.stats_seed));
            o.exec = c.exec;
            o.draws = 1;
            let d = dose_response(&dose, o)?;
            (Some(d.spearman.rho), Some(d.spearman.p))
        } else {
            (None, None)
        };
        t.rows.push(vec![
            m.to_string(),
            num(ga),
            num(ca),
            opt(per_seed_sd(&ctrl)),
            num((ca - ga) * 100.0),
            opt(rho),
            opt(p),
        ]);
    }
    if !missing.is_empty() {
        return Err(coverage(Figure::Tab1, missing));
    }
    Ok(t)
}

fn tab2(c: &Ctx) -> Result<ReportTable> {
    let mut t = ReportTable::new(Figure::Tab2.columns().iter().copied());
    let mut pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
    for r in c.base() {
        if ["category", "sentiment", "temperature", "size"].contains(&r.task.as_str()) {
            pairs.insert((&r.model, &r.task));
        }
    }
    let mut missing = Vec::new();
    if pairs.is_empty() {
        missing.push("records for any binary task".into());
    }
    for (m, task) in pairs {
        let gp = c.select(m, Some(task), "gp");
        let ctrl = c.select(m, Some(task), "ctrl_balanced");
        if gp.is_empty() || ctrl.is_empty() {
            missing.push(format!("{m}: {task}/gp+ctrl_balanced"));
            continue;
        }
        let ga = mean(gp.iter().map(|r| f64::from(r.accuracy_bit))).unwrap_or(f64::NAN);
        let ca = mean(ctrl.iter().map(|r| f64::from(r.accuracy_bit))).unwrap_or(f64::NAN);
        t.rows
            .push(vec![m.into(), task.into(), num(ga), num(ca), num((ca - ga) * 100.0)]);
    }
    if !missing.is_empty() {
        return Err(coverage(Figure::Tab2, missing));
    }
    Ok(t)
}

fn tab3(c: &Ctx) -> Result<ReportTable> {
    let mut t = ReportTable::new(Figure::Tab3.columns().iter().copied());
    let mut groups: BTreeMap<(&str, &str, u64, &str), Vec<&TrialRecord>> = BTreeMap::new();
    for r in c.records {
        if let (Some(iv), Some(k)) = (&r.intervention, r.metrics.get(CUMULATIVE_K)) {
            groups
                .entry((&r.model, &r.task, *k as u64, &iv.label))
                .or_default()
                .push(r);
        }
    }
    if groups.is_empty() {
        return Err(coverage(Figure::Tab3, vec!["cumulative head-patch records".into()]));
    }
    for ((m, task, k, label), rs) in groups {
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
        let (p, lo, hi) = c.ci(&format!("{m}/{task}/k={k}"), &obs, excluded)?;
        t.rows.push(vec![
            m.into(),
            task.into(),
            k.to_string(),
            label.into(),
            rs.len().to_string(),
            excluded.to_string(),
            opt(p),
            opt(lo),
            opt(hi),
        ]);
    }
    Ok(t)
}

fn tab4(c: &Ctx) -> Result<ReportTable> {
    let mut t = ReportTable::new(Figure::Tab4.columns().iter().copied());
    let mut groups: BTreeMap<(&str, &str), Vec<&TrialRecord>> = BTreeMap::new();
    for r in c.base().filter(|r| r.task == "multiclass4") {
        groups.entry((&r.model, &r.condition)).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(coverage(Figure::Tab4, vec!["multiclass4 records".into()]));
    }
    for ((m, cond), rs) in groups {
        t.rows.push(vec![
            m.into(),
            cond.into(),
            rs.len().to_string(),
            opt(mean(rs.iter().map(|r| r.p_target))),
            opt(mean(acc_obs(&rs).into_iter().map(|o| o.1))),
        ]);
    }
    Ok(t)
}

fn tab5(c: &Ctx) -> Result<ReportTable> {
    let rs: Vec<&TrialRecord> = c.base().filter(|r| r.metrics.contains_key(P_FORMAT)).collect();
    if rs.is_empty() {
        return Err(coverage(Figure::Tab5, vec!["multi-token verbalizer records".into()]));
    }
    let branches: BTreeSet<&str> = rs
        .iter()
        .flat_map(|r| r.metrics.keys())
        .filter(|k| k.starts_with(P_GIVEN_PREFIX))
        .map(String::as_str)
        .collect();
    let mut t = ReportTable::new(Figure::Tab5.columns().iter().copied().chain(branches.iter().copied()));
    let mut groups: BTreeMap<(&str, &str), Vec<&TrialRecord>> = BTreeMap::new();
    for r in rs {
        groups.entry((&r.model, &r.condition)).or_default().push(r);
    }
    for ((m, cond), rs) in groups {
        let mut row = vec![
            m.to_string(),
            cond.to_string(),
            rs.len().to_string(),
            opt(mean(rs.iter().filter_map(|r| r.metrics.get(P_FORMAT).copied()))),
        ];
        for b in &branches {
            row.push(opt(mean(rs.iter().filter_map(|r| r.metrics.get(*b).copied()))));
        }
        t.rows.push(row);
    }
    Ok(t)
}

/// Build one figure's table from records.
pub fn build_report(records: &[TrialRecord], figure: Figure, stats_seed: u64, exec: Exec) -> Result<ReportTable> {
    if records.is_empty() {
        return Err(coverage(figure, vec!["no records".into()]));
    }
    let c = Ctx {
        records,
        stats_seed,
        exec,
        figure,
    };
    match figure {
        Figure::Fig1 => fig1(&c),
        Figure::Fig2 => fig2(&c),
        Figure::Fig3 => fig3(&c),
        Figure::Fig4 => fig4(&c),
        Figure::Tab1 => tab1(&c),
        Figure::Tab2 => tab2(&c),
        Figure::Tab3 => tab3(&c),
        Figure::Tab4 => tab4(&c),
        Figure::Tab5 => tab5(&c),
    }
}

/// Write `<out_dir>/<figure>.csv` and return its path.
pub fn emit_report(
    records: &[TrialRecord],
    figure: Figure,
    out_dir: impl AsRef<Path>,
    stats_seed: u64,
    exec: Exec,
) -> Result<PathBuf> {
    let table = build_report(records, figure, stats_seed, exec)?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| FixlabError::io(dir, e))?;
    let path = dir.join(format!("{figure}.csv"));
    std::fs::write(&path, table.to_csv()?).map_err(|e| FixlabError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::record::sample;

    #[test]
    fn empty_records_are_a_coverage_error() {
        for f in Figure::ALL {
            assert!(matches!(
                build_report(&[], f, 0, Exec::Sequential),
                Err(FixlabError::Coverage { .. })
            ));
            assert_eq!(f.to_string().parse::<Figure>().unwrap(), f);
        }
    }

    #[test]
    fn fig4_columns_and_missing_list() {
        let mut recs = Vec::new();
        for (cond, v) in [("homog_nonsense", 0.9), ("varied_nonsense", 0.25)] {
            for s in 0..3 {
                let mut r = sample(s, v);
                r.condition = cond.into();
                r.p_demo_set = if cond == "homog_nonsense" { 0.75 } else { 0.5 };
                recs.push(r);
            }
        }
        let t = build_report(&recs, Figure::Fig4, 0, Exec::Sequential).unwrap();
        assert_eq!(t.header, ["model", "p_label_homog", "p_set_varied", "p_dog_varied"]);
        assert_eq!(t.cell(0, "p_label_homog"), Some("0.75"));
        assert_eq!(t.cell(0, "p_dog_varied"), Some("0.25"));
        let only_homog: Vec<_> = recs[..3].to_vec();
        match build_report(&only_homog, Figure::Fig4, 0, Exec::Sequential) {
            Err(FixlabError::Coverage { missing, .. }) => assert_eq!(missing, vec!["toy: varied_nonsense"]),
            other => panic!("{other:?}"),
        }
    }
}
