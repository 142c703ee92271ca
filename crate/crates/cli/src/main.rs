// SPDX-License-Identifier: MIT OR Apache-2.0

//! `fixlab`: run label-fixation experiments and emit their data files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};

use fixlab_core::exec::{with_threads, Exec};
use fixlab_core::harness::{
    build_pairs, default_tokenizer, emit_report, measure_prompt, read_records, run_experiment_with, single_token_gate,
    site_set_label, summarize, write_records, write_summaries, Context, ExperimentPlan, Figure, InterventionPlan,
    PairedPrompt, CUMULATIVE_K, DEFAULT_ITEMS_PER_CLASS, DEFAULT_SEEDS,
};
use fixlab_core::interventions::{
    combo_rows, cumulative_head_patch, dla_delta, dla_for_tokens, dla_mean, enumerate_layer_combos, grand_mean,
    head_rows, loo_mean_prepared, mean_recovery, rank_of, write_recovery_csv, zero_ablate_heads, PreparedPair,
    RecoveryResult,
};
use fixlab_core::model::{load_weights, ops::probs_of, HookSite, SiteKind};
use fixlab_core::prompts::{ConditionKind, TaskSet, Tokenizer};
use fixlab_core::stats::{
    audit_accuracy, cluster_bootstrap_ci, kfold_cv_select, stream_key, wilcoxon_signed_rank, BootstrapOptions,
    InterventionRecord, TrialRecord,
};

#[derive(Parser)]
#[command(
    name = "fixlab",
    version,
    about = "Label-fixation experiments on decoder-only transformers"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// FXB1 weight bundle.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Name written into records (defaults to the model file stem).
    #[arg(long, global = true)]
    model_name: Option<String>,
    #[arg(long, global = true, default_value = "category")]
    task: String,
    /// Condition(s), comma separated (e.g. `gp,ctrl_balanced,threshold_k=4`).
    #[arg(long, global = true, value_delimiter = ',')]
    condition: Vec<ConditionKind>,
    /// Seeds, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, global = true, default_value_t = 8)]
    shots: usize,
    #[arg(long, global = true, default_value_t = DEFAULT_ITEMS_PER_CLASS)]
    items: usize,
    /// Output file or directory, depending on the verb.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    stats_seed: u64,
    /// Worker threads (1 runs sequentially; 0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Portable tokenizer JSON (bundled NeoX or Llama-3 otherwise).
    #[arg(long, global = true)]
    tokenizer: Option<PathBuf>,
    /// Task pool file (bundled pools otherwise).
    #[arg(long, global = true)]
    tasks_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Measure every (condition, seed, item) and write JSONL records.
    Run {
        /// JSON experiment plan; overrides the global flags.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value = "experiment")]
        experiment_id: String,
    },
    /// Paired patching from the matched control at the given sites.
    Patch {
        /// Site set, e.g. `L7.attn_out,L10.attn_out,L11.attn_out`.
        #[arg(long, value_delimiter = ',', required = true)]
        sites: Vec<HookSite>,
        #[arg(long, default_value = "ctrl_balanced")]
        control: ConditionKind,
        /// Also run leave-one-out mean patching and compare.
        #[arg(long)]
        loo: bool,
    },
    /// Patch every layer combination and rank them (CSV).
    Enumerate {
        #[arg(long, default_value_t = 3)]
        combo_size: usize,
        #[arg(long, default_value = "attn_out")]
        kind: SiteKind,
        #[arg(long, default_value = "ctrl_balanced")]
        control: ConditionKind,
        /// Seed-level cross-validation folds for combo selection (0 skips).
        #[arg(long, default_value_t = 4)]
        folds: usize,
        /// Combo whose rank to report, e.g. `7,10,11`.
        #[arg(long, value_delimiter = ',')]
        highlight: Vec<usize>,
    },
    /// Per-head patching, cumulative top-k curve, DLA and ablation.
    Heads {
        #[arg(long, default_value = "ctrl_balanced")]
        control: ConditionKind,
        /// Largest k on the cumulative curve.
        #[arg(long)]
        max_k: Option<usize>,
        /// Heads to zero-ablate, e.g. `L10H5,L11H2`.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
    },
    /// Logit-lens trajectories attached to JSONL records.
    Lens {
        #[arg(long, default_value = "experiment")]
        experiment_id: String,
    },
    /// Stats summaries recomputed from a JSONL file.
    Stats {
        #[arg(long)]
        records: PathBuf,
    },
    /// Figure/table data files from JSONL records.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// `fig1`..`fig4`, `tab1`..`tab5` or `all`.
        #[arg(long, default_value = "all")]
        figure: String,
    },
    /// Check that a task's labels are single tokens and print their ids.
    VerifyTokens {
        /// Extra labels to check.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
}

impl Global {
    fn exec(&self) -> Exec {
        if self.threads == 1 {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            DEFAULT_SEEDS.to_vec()
        } else {
            self.seeds.clone()
        }
    }

    fn conditions(&self, default: &[ConditionKind]) -> Vec<ConditionKind> {
        if self.condition.is_empty() {
            default.to_vec()
        } else {
            self.condition.clone()
        }
    }

    fn model_path(&self) -> Result<&Path> {
        self.model.as_deref().context("--model is required")
    }

    fn tasks(&self) -> Result<TaskSet> {
        Ok(match &self.tasks_file {
            Some(p) => TaskSet::from_file(p)?,
            None => TaskSet::bundled()?,
        })
    }

    fn load(&self) -> Result<Context> {
        let path = self.model_path()?;
        let weights = load_weights(path).with_context(|| format!("loading {}", path.display()))?;
        let tokenizer = match &self.tokenizer {
            Some(p) => Tokenizer::from_file(p)?,
            None => default_tokenizer(weights.config.bos_policy)?,
        };
        let name = self.model_name.clone().unwrap_or_else(|| stem(path));
        Ok(Context::new(name, weights, tokenizer, self.tasks()?)?)
    }

    fn plan(&self, experiment_id: &str, default_conditions: &[ConditionKind], out: PathBuf) -> Result<ExperimentPlan> {
        let mut plan = ExperimentPlan::new(
            experiment_id,
            self.model_path()?,
            self.task.clone(),
            self.conditions(default_conditions),
            out,
        );
        plan.model_name = self.model_name.clone();
        plan.tokenizer_path = self.tokenizer.clone();
        plan.tasks_path = self.tasks_file.clone();
        plan.seeds = self.seeds();
        plan.shots = self.shots;
        plan.items_per_class = self.items;
        plan.stats_seed = self.stats_seed;
        Ok(plan)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn single_condition(&self) -> Result<ConditionKind> {
        match self.conditions(&[ConditionKind::Gp]).as_slice() {
            [c] => Ok(c.clone()),
            _ => bail!("this verb takes exactly one --condition"),
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn ci_line(label: &str, results: &[RecoveryResult], clusters: &[u64], key: u64, exec: Exec) -> Result<String> {
    let (mean, excluded) = mean_recovery(results);
    let obs: Vec<(u64, f64)> = results
        .iter()
        .zip(clusters)
        .filter_map(|(r, &c)| r.recovery.map(|v| (c, v)))
        .collect();
    let mut opts = BootstrapOptions::new(key);
    opts.exec = exec;
    let ci = cluster_bootstrap_ci(&obs, opts).ok();
    Ok(format!(
        "{label}: mean recovery {} (95% CI {} to {}), {excluded}/{} excluded",
        fmt_opt(mean),
        fmt_opt(ci.map(|c| c.lo)),
        fmt_opt(ci.map(|c| c.hi)),
        results.len()
    ))
}

fn prepare(
    g: &Global,
    ctx: &Context,
    control: &ConditionKind,
    kinds: &[SiteKind],
) -> Result<(Vec<PairedPrompt>, Vec<PreparedPair>)> {
    let task = ctx.tasks.get(&g.task)?;
    let kind = g.single_condition()?;
    single_token_gate(&ctx.tokenizer, task, &[kind.clone(), control.clone()])?;
    let pairs = build_pairs(ctx, task, &kind, control, &g.seeds(), g.shots, g.items)?;
    let prepared = g.exec().try_map(&pairs, |p| {
        PreparedPair::new(&ctx.weights, &p.pair, p.prompt.answer_token, kinds)
    })?;
    Ok((pairs, prepared))
}

fn base_records(ctx: &Context, pairs: &[PairedPrompt], exec: Exec) -> Result<Vec<TrialRecord>> {
    Ok(exec.try_map(pairs, |p| measure_prompt(&ctx.weights, &ctx.model_name, &p.prompt))?)
}

fn with_intervention(base: &TrialRecord, label: String, result: RecoveryResult) -> TrialRecord {
    let mut r = base.clone();
    r.intervention = Some(InterventionRecord { label, result });
    r
}

fn cmd_patch(g: &Global, sites: &[HookSite], control: &ConditionKind, loo: bool) -> Result<()> {
    let ctx = g.load()?;
    let exec = g.exec();
    let kinds: Vec<SiteKind> = {
        let mut k: Vec<SiteKind> = sites.iter().map(|s| s.kind).collect();
        k.sort();
        k.dedup();
        k
    };
    let (pairs, prepared) = prepare(g, &ctx, control, &kinds)?;
    let paired = exec.try_map(&prepared, |p| p.patch(&ctx.weights, sites))?;
    let clusters: Vec<u64> = prepared.iter().map(|p| p.cluster).collect();
    let key = stream_key("patch", g.stats_seed);
    println!(
        "{}",
        ci_line(
            &format!("paired {}", site_set_label(sites)),
            &paired,
            &clusters,
            key,
            exec
        )?
    );
    let base = base_records(&ctx, &pairs, exec)?;
    let mut records: Vec<TrialRecord> = base
        .iter()
        .zip(&paired)
        .map(|(b, r)| with_intervention(b, site_set_label(sites), *r))
        .collect();
    if loo {
        let loo = loo_mean_prepared(&ctx.weights, &prepared, sites, exec)?;
        println!("{}", ci_line("leave-one-out mean", &loo, &clusters, key, exec)?);
        let diffs: Vec<f64> = paired
            .iter()
            .zip(&loo)
            .filter_map(|(a, b)| Some(b.recovery? - a.recovery?))
            .collect();
        match wilcoxon_signed_rank(&diffs) {
            Ok(w) => println!("wilcoxon (loo - paired): n={} p={:.3e}", w.n, w.p_two_sided),
            Err(e) => println!("wilcoxon (loo - paired): {e}"),
        }
        records.extend(
            base.iter()
                .zip(&loo)
                .map(|(b, r)| with_intervention(b, format!("loo:{}", site_set_label(sites)), *r)),
        );
    }
    if let Some(out) = &g.out {
        write_records(out, &sorted(records))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn sorted(mut records: Vec<TrialRecord>) -> Vec<TrialRecord> {
    records.sort_by_key(TrialRecord::key);
    records
}

fn cmd_enumerate(
    g: &Global,
    combo_size: usize,
    kind: SiteKind,
    control: &ConditionKind,
    folds: usize,
    highlight: &[usize],
) -> Result<()> {
    let ctx = g.load()?;
    let exec = g.exec();
    let (_, prepared) = prepare(g, &ctx, control, &[kind])?;
    let ranked = enumerate_layer_combos(&ctx.weights, &prepared, combo_size, kind, exec)?;
    let clusters: Vec<u64> = prepared.iter().map(|p| p.cluster).collect();
    let mut opts = BootstrapOptions::new(stream_key("enumerate", g.stats_seed));
    opts.exec = exec;
    let rows = combo_rows(&ranked, &clusters, opts)?;
    let out = g.out_or("combos.csv");
    write_recovery_csv(
        fs::File::create(&out).with_context(|| out.display().to_string())?,
        &rows,
    )?;
    println!("{} combos written to {}", ranked.len(), out.display());
    println!("grand mean recovery {}", fmt_opt(grand_mean(&ranked)));
    for r in ranked.iter().take(5) {
        println!("  {} {}", r.id(), fmt_opt(r.mean));
    }
    if !highlight.is_empty() {
        match rank_of(&ranked, highlight) {
            Some((rank, pct)) => println!("{highlight:?} ranks {rank} ({:.1}th percentile)", pct * 100.0),
            None => println!("{highlight:?} is not among the combos"),
        }
    }
    if folds > 0 {
        let mut cands: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
        for r in &ranked {
            let obs = r
                .recoveries
                .iter()
                .zip(&clusters)
                .filter_map(|(x, &c)| x.recovery.map(|v| (c, v)))
                .collect();
            cands.insert(r.id(), obs);
        }
        match kfold_cv_select(&cands, folds, stream_key("kfold", g.stats_seed)) {
            Ok(res) => {
                for f in &res {
                    println!(
                        "fold {}: selected {} held-out mean {:.4} (n={})",
                        f.fold,
                        f.selected.as_deref().unwrap_or("-"),
                        f.mean,
                        f.n
                    );
                }
                let m = res.iter().map(|f| f.mean).sum::<f64>() / res.len() as f64;
                println!("cross-validated mean {m:.4}");
            }
            Err(e) => println!("cross-validation skipped: {e}"),
        }
    }
    Ok(())
}

fn parse_head(s: &str) -> Result<(usize, usize)> {
    let site: HookSite = format!("{s}.head_out")
        .parse()
        .or_else(|_| s.replace('-', "").parse())?;
    Ok((site.layer, site.head.context("head index required")?))
}

fn cmd_heads(g: &Global, control: &ConditionKind, max_k: Option<usize>, ablate: &[String]) -> Result<()> {
    let ctx = g.load()?;
    let exec = g.exec();
    let (pairs, prepared) = prepare(g, &ctx, control, &[SiteKind::HeadOut])?;
    let report = cumulative_head_patch(&ctx.weights, &prepared, max_k, exec)?;
    let clusters: Vec<u64> = prepared.iter().map(|p| p.cluster).collect();
    let mut opts = BootstrapOptions::new(stream_key("heads", g.stats_seed));
    opts.exec = exec;
    let out = g.out_or("heads");
    fs::create_dir_all(&out)?;
    let rows = head_rows(&report.ranking, &clusters, opts)?;
    write_recovery_csv(fs::File::create(out.join("heads.csv"))?, &rows)?;
    println!("top heads by individual recovery:");
    for h in report.ranking.iter().take(8) {
        println!("  {} {}", h.id(), fmt_opt(h.mean));
    }
    let base = base_records(&ctx, &pairs, exec)?;
    let mut records = Vec::new();
    for point in &report.curve {
        let label = if point.heads.is_empty() {
            "head_out:none".to_string()
        } else {
            let sites: Vec<HookSite> = point.heads.iter().map(|&(l, h)| HookSite::head_out(l, h)).collect();
            site_set_label(&sites)
        };
        println!("  k={} recovery {}", point.k, fmt_opt(point.mean));
        for (b, r) in base.iter().zip(&point.recoveries) {
            let mut rec = with_intervention(b, label.clone(), *r);
            rec.metrics.insert(CUMULATIVE_K.into(), point.k as f64);
            records.push(rec);
        }
    }
    write_records(out.join("cumulative.jsonl"), &sorted(records))?;

    let target = pairs[0].prompt.answer_token;
    let foil = pairs[0].prompt.foil_tokens[0];
    let dla = exec.try_map(&pairs, |p| -> fixlab_core::Result<_> {
        let a = dla_for_tokens(&ctx.weights, &p.pair.gp_tokens, foil, target)?;
        let b = dla_for_tokens(&ctx.weights, &p.pair.ctrl_tokens, foil, target)?;
        Ok(dla_delta(&a, &b))
    })?;
    let mean = dla_mean(&dla)?;
    println!("DLA delta (GP - control) toward the demonstrated label:");
    for (l, h, v) in mean.ranked_heads().into_iter().take(5) {
        println!("  L{l}-H{h} {v:+.3}");
    }
    fs::write(out.join("dla.json"), serde_json::to_string_pretty(&mean)? + "\n")?;

    if !ablate.is_empty() {
        let heads: Vec<(usize, usize)> = ablate.iter().map(|s| parse_head(s)).collect::<Result<_>>()?;
        let p = exec.try_map(&pairs, |p| -> fixlab_core::Result<f64> {
            let logits = zero_ablate_heads(&ctx.weights, &p.pair.gp_tokens, &heads)?;
            Ok(probs_of(&logits, &[p.prompt.answer_token])[0])
        })?;
        println!(
            "mean P(target) with {ablate:?} zero-ablated: {:.4}",
            p.iter().sum::<f64>() / p.len() as f64
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_run(g: &Global, plan: Option<&Path>, experiment_id: &str, lens: bool) -> Result<()> {
    let mut plan = match plan {
        Some(p) => ExperimentPlan::from_file(p)?,
        None => g.plan(
            experiment_id,
            &[ConditionKind::Gp, ConditionKind::CtrlBalanced],
            g.out_or("records.jsonl"),
        )?,
    };
    if lens {
        let iv = plan
            .interventions
            .get_or_insert_with(|| InterventionPlan::patching(Vec::new()));
        iv.lens = true;
    }
    let ctx = Context::load(&plan)?;
    let outcome = run_experiment_with(&ctx, &plan, g.exec())?;
    println!(
        "{} records in {} ({} units computed, {} resumed); summary {}",
        outcome.records.len(),
        plan.output.display(),
        outcome.computed,
        outcome.resumed,
        outcome.summary_path.display()
    );
    for s in outcome
        .summaries
        .iter()
        .filter(|s| s.statistic.starts_with("accuracy["))
    {
        println!("  {} = {} (n={})", s.statistic, fmt_opt(s.point), s.n);
    }
    Ok(())
}

fn cmd_stats(g: &Global, records: &Path) -> Result<()> {
    let recs = read_records(records)?;
    let bad = audit_accuracy(&recs);
    if !bad.is_empty() {
        bail!("{} records fail the accuracy audit, first: {}", bad.len(), bad[0]);
    }
    let summaries = summarize(&recs, &stem(records), g.stats_seed, g.exec())?;
    match &g.out {
        Some(out) => {
            write_summaries(out, &summaries)?;
            println!("wrote {}", out.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&summaries)?),
    }
    Ok(())
}

fn cmd_report(g: &Global, records: &[PathBuf], figure: &str) -> Result<()> {
    let mut recs = Vec::new();
    for r in records {
        recs.extend(read_records(r)?);
    }
    let out = g.out_or("report");
    let figures: Vec<Figure> = if figure == "all" {
        Figure::ALL.to_vec()
    } else {
        figure.split(',').map(str::parse).collect::<fixlab_core::Result<_>>()?
    };
    let single = figures.len() == 1;
    for f in figures {
        match emit_report(&recs, f, &out, g.stats_seed, g.exec()) {
            Ok(p) => println!("{f}: {}", p.display()),
            Err(e) if !single => println!("{f}: skipped ({e})"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn cmd_verify_tokens(g: &Global, labels: &[String]) -> Result<()> {
    let tokenizer = match (&g.tokenizer, &g.model) {
        (Some(p), _) => Tokenizer::from_file(p)?,
        (None, Some(m)) => default_tokenizer(load_weights(m)?.config.bos_policy)?,
        (None, None) => Tokenizer::neox()?,
    };
    let tasks = g.tasks()?;
    let task = tasks.get(&g.task)?;
    let conds = g.conditions(&[ConditionKind::Gp]);
    for (l, id) in single_token_gate(&tokenizer, task, &conds)? {
        println!("{} {l:?} -> {id}", tokenizer.family());
    }
    for l in labels {
        let id = tokenizer.single_token(l)?;
        println!("{} {l:?} -> {id}", tokenizer.family());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = cli.global.clone();
    with_threads(g.threads, move || match &cli.command {
        Command::Run { plan, experiment_id } => cmd_run(&g, plan.as_deref(), experiment_id, false),
        Command::Patch { sites, control, loo } => cmd_patch(&g, sites, control, *loo),
        Command::Enumerate {
            combo_size,
            kind,
            control,
            folds,
            highlight,
        } => cmd_enumerate(&g, *combo_size, *kind, control, *folds, highlight),
        Command::Heads { control, max_k, ablate } => cmd_heads(&g, control, *max_k, ablate),
        Command::Lens { experiment_id } => cmd_run(&g, None, experiment_id, true),
        Command::Stats { records } => cmd_stats(&g, records),
        Command::Report { records, figure } => cmd_report(&g, records, figure),
        Command::VerifyTokens { labels } => cmd_verify_tokens(&g, labels),
    })
}
