// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sinklab::analysis::export::{alpha_heatmap, cosine_heatmap, write_heatmap, write_json};
use sinklab::analysis::{analyze, gate_projection_stats, intervention_experiment, GateStats, ReportDiff, SinkReport};
use sinklab::model::{build_sequence, Checkpoint, InterventionSpec, ModelInput, Rates, RotationMode};
use sinklab::train::{held_out_set, init_model, run_finetune, run_pretrain, Phase, RunOptions, RunSummary};

use crate::config::ExperimentConfig;
use crate::UsageError;

#[derive(Debug, Parser)]
#[command(
    name = "sinklab",
    version,
    about = "Attention-sink experiments on a toy audio-visual decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured training phase.
    Train(TrainArgs),
    /// Write sink diagnostics for one held-out sample.
    Analyze(AnalyzeArgs),
    /// Rotate one hidden state and report what changes.
    Intervene(InterveneArgs),
    /// Fine-tune every (rates, λ) pair and tabulate the results.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compression rates as `a,v`, `a` or `v` depending on the task.
    #[arg(long)]
    pub rates: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Decorrelation weight for the fine-tune phase.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Pretrained checkpoint to fine-tune from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to load.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index into the held-out set.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to load.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index into the held-out set.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Block whose output is rotated (1-based).
    #[arg(long)]
    pub layer: usize,
    /// Position whose hidden state is rotated.
    #[arg(long)]
    pub token: usize,
    /// `toward-bos` or `toward-token:J`.
    #[arg(long)]
    pub mode: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// λ values; repeat the flag to list several. Defaults to the config grid.
    #[arg(long)]
    pub lambda: Vec<f64>,
    /// Rate lists to sweep; repeat to list several. Defaults to the config grid.
    #[arg(long = "rate")]
    pub rate_list: Vec<String>,
    /// Pretrained checkpoint; pretrains first when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(r) = &common.rates {
        cfg.rates = Rates::parse_for(cfg.task, r).map_err(|e| usage(format!("--rates: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Intervene(a) => cmd_intervene(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn write_marker(dir: &Path, err: &anyhow::Error) {
    let _ = fs::create_dir_all(dir);
    let _ = fs::write(dir.join("FAILED"), format!("{err:#}\n"));
}

/// Loads or produces the pretrained checkpoint a fine-tune starts from.
fn pretrained(cfg: &ExperimentConfig, explicit: Option<&Path>, out: &Path) -> Result<Checkpoint> {
    if let Some(path) = explicit.or(cfg.pretrained.as_deref()) {
        return Checkpoint::load(path).with_context(|| format!("loading {}", path.display()));
    }
    let dir = out.join("pretrain");
    let run = run_pretrain(
        &cfg.pretrain_config(),
        &cfg.toy,
        init_model(&cfg.model, cfg.seed)?,
        &RunOptions {
            out_dir: Some(dir.clone()),
            analysis: cfg.report.analysis(),
        },
    );
    match run {
        Ok(o) => Ok(o.checkpoint),
        Err(e) => {
            let e = anyhow::Error::from(e);
            write_marker(&dir, &e);
            Err(e)
        }
    }
}

pub fn cmd_train(args: TrainArgs) -> Result<RunSummary> {
    let mut cfg = load_config(&args.common)?;
    if let Some(l) = args.lambda {
        cfg.train.lambda = l;
        cfg.validate()?;
    }
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let options = RunOptions {
        out_dir: None,
        analysis: cfg.report.analysis(),
    };
    let result = match cfg.phase {
        Phase::Pretrain => run_pretrain(
            &cfg.pretrain_config(),
            &cfg.toy,
            init_model(&cfg.model, cfg.seed)?,
            &RunOptions {
                out_dir: Some(out.join("pretrain")),
                ..options
            },
        )
        .map_err(anyhow::Error::from),
        Phase::Finetune => pretrained(&cfg, args.checkpoint.as_deref(), &out).and_then(|base| {
            run_finetune(
                &cfg.finetune_config(),
                &cfg.toy,
                &base,
                &RunOptions {
                    out_dir: Some(out.join("finetune")),
                    ..options
                },
            )
            .map_err(anyhow::Error::from)
        }),
    };
    match result {
        Ok(o) => {
            println!(
                "{}: step {} eval_ce {:.4} mean_cos2 {:.4}{}",
                out.display(),
                o.summary.steps,
                o.summary.eval_ce,
                o.summary.eval_mean_cos2,
                o.summary.eval_ter.map(|t| format!(" ter {t:.4}")).unwrap_or_default()
            );
            Ok(o.summary)
        }
        Err(e) => {
            write_marker(&out, &e);
            Err(e)
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn selected_input(cfg: &ExperimentConfig, ckpt: &Checkpoint, sample: usize) -> Result<ModelInput> {
    let set = held_out_set(&cfg.toy, cfg.seed, sample + 1)?;
    Ok(build_sequence(
        &set[sample],
        cfg.task,
        cfg.rates,
        &cfg.toy.vocab(),
        true,
        ckpt.params.config.max_seq,
    )?)
}

fn write_bundle(dir: &Path, report: &SinkReport, heatmaps: bool) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    if heatmaps {
        write_heatmap(&dir.join("alpha.csv"), &alpha_heatmap(&report.scores))?;
        write_heatmap(&dir.join("cosine.csv"), &cosine_heatmap(&report.cosine))?;
    }
    Ok(())
}

pub fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let input = selected_input(&cfg, &ckpt, args.sample)?;
    let (trace, report) = analyze(&ckpt.params, ckpt.lora.as_ref(), &input, &cfg.report.analysis())?;
    let gate: Vec<GateStats> = (1..=trace.n_layers())
        .map(|l| gate_projection_stats(&trace, &ckpt.params, ckpt.lora.as_ref(), l, &report.sinks.global))
        .collect::<sinklab::Result<_>>()?;
    let out = &cfg.out_dir;
    write_bundle(out, &report, cfg.report.heatmaps)?;
    write_json(&out.join("gate.json"), &gate)?;
    println!("{}: sinks {:?}", out.display(), report.sinks.global);
    Ok(())
}

#[derive(Serialize)]
struct InterventionSummary<'a> {
    spec: &'a InterventionSpec,
    diff: &'a ReportDiff,
    empty: bool,
}

pub fn cmd_intervene(args: InterveneArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let mode: RotationMode = args.mode.parse().map_err(|e| usage(format!("--mode: {e}")))?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let input = selected_input(&cfg, &ckpt, args.sample)?;
    let spec = InterventionSpec {
        layer: args.layer,
        token: args.token,
        mode,
    };
    spec.validate(ckpt.params.config.n_layers, input.len())
        .map_err(|e| usage(format!("intervention: {e}")))?;
    let outcome = intervention_experiment(&ckpt.params, ckpt.lora.as_ref(), &input, spec, &cfg.report.analysis())?;
    let diff = ReportDiff::between(&outcome.baseline, &outcome.intervened);
    let out = &cfg.out_dir;
    write_bundle(&out.join("baseline"), &outcome.baseline, cfg.report.heatmaps)?;
    write_bundle(&out.join("intervened"), &outcome.intervened, cfg.report.heatmaps)?;
    write_json(
        &out.join("diff.json"),
        &InterventionSummary {
            spec: &spec,
            diff: &diff,
            empty: diff.is_empty(),
        },
    )?;
    println!(
        "{}: sinks added {:?} removed {:?}, {} Θ changes",
        out.display(),
        diff.sinks_added,
        diff.sinks_removed,
        diff.theta_changes.len()
    );
    Ok(())
}

/// One line of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub task: String,
    pub rates: String,
    pub lambda: f64,
    pub seed: u64,
    pub final_ter: Option<f64>,
    pub final_mean_cos2: Option<f64>,
    pub sink_count: Option<usize>,
    pub status: String,
}

/// Seed of sweep row `index`.
pub fn row_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let lambdas = if args.lambda.is_empty() {
        cfg.sweep.lambdas.clone()
    } else {
        args.lambda.clone()
    };
    let rate_lists = if args.rate_list.is_empty() {
        cfg.sweep.rate_lists(cfg.task)
    } else {
        args.rate_list.clone()
    };
    if lambdas.is_empty() || rate_lists.is_empty() {
        return Err(usage("sweep needs at least one λ and one rate list"));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(usage(format!("--lambda {bad} must be finite and non-negative")));
    }
    let rates: Vec<Rates> = rate_lists
        .iter()
        .map(|r| Rates::parse_for(cfg.task, r).map_err(|e| usage(format!("--rate: {e}"))))
        .collect::<Result<_>>()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let base = pretrained(&cfg, args.checkpoint.as_deref(), &out)?;

    let jobs: Vec<(usize, Rates, f64)> = rates
        .iter()
        .flat_map(|&r| lambdas.iter().map(move |&l| (r, l)))
        .enumerate()
        .map(|(k, (r, l))| (k, r, l))
        .collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(k, r, lambda)| {
            let seed = row_seed(cfg.seed, k);
            let mut train = cfg.finetune_config();
            train.rates = r;
            train.lambda = lambda;
            train.seed = seed;
            let dir = out.join("rows").join(format!("{k:03}"));
            let result = run_finetune(
                &train,
                &cfg.toy,
                &base,
                &RunOptions {
                    out_dir: Some(dir.clone()),
                    analysis: cfg.report.analysis(),
                },
            );
            let mut row = SweepRow {
                task: cfg.task.to_string(),
                rates: r.to_string(),
                lambda,
                seed,
                final_ter: None,
                final_mean_cos2: None,
                sink_count: None,
                status: "ok".into(),
            };
            match result {
                Ok(o) => {
                    row.final_ter = o.summary.eval_ter;
                    row.final_mean_cos2 = Some(o.summary.eval_mean_cos2);
                    row.sink_count = Some(o.summary.final_sinks.len());
                }
                Err(e) => {
                    let e = anyhow::Error::from(e);
                    write_marker(&dir, &e);
                    row.status = format!("failed: {e}");
                }
            }
            row
        })
        .collect();
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    println!("{}: {} rows", path.display(), rows.len());
    Ok(())
}
