// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sinklab::analysis::{AnalysisOptions, SinkRule, DEFAULT_TAU};
use sinklab::model::{ModelConfig, Rates, Task};
use sinklab::train::{LrSchedule, Phase, ToyTaskSpec, TrainConfig};

use crate::UsageError;

/// λ values swept when the config names none.
pub const DEFAULT_LAMBDA_GRID: [f64; 3] = [10.0, 100.0, 10_000.0];

/// Optimizer and schedule of one training phase.
///
/// Fields missing from a TOML section take that phase's defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseConfig {
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub checkpoint_interval: usize,
    pub eval_size: usize,
    pub schedule: LrSchedule,
    /// Global gradient-norm cap; written as `0` when clipping is off.
    #[serde(serialize_with = "clip_to_toml")]
    pub grad_clip: Option<f64>,
}

fn clip_to_toml<S: serde::Serializer>(clip: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(clip.unwrap_or(0.0))
}

/// A phase section as written, before defaults are filled in.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PhaseSection {
    lambda: Option<f64>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    lora_rank: Option<usize>,
    lora_scale: Option<f64>,
    checkpoint_interval: Option<usize>,
    eval_size: Option<usize>,
    schedule: Option<LrSchedule>,
    grad_clip: Option<f64>,
}

impl PhaseSection {
    fn over(self, d: PhaseConfig) -> PhaseConfig {
        PhaseConfig {
            lambda: self.lambda.unwrap_or(d.lambda),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lora_rank: self.lora_rank.unwrap_or(d.lora_rank),
            lora_scale: self.lora_scale.unwrap_or(d.lora_scale),
            checkpoint_interval: self.checkpoint_interval.unwrap_or(d.checkpoint_interval),
            eval_size: self.eval_size.unwrap_or(d.eval_size),
            schedule: self.schedule.unwrap_or(d.schedule),
            grad_clip: match self.grad_clip {
                Some(0.0) => None,
                Some(c) => Some(c),
                None => d.grad_clip,
            },
        }
    }
}

fn pretrain_section<'de, D: serde::Deserializer<'de>>(d: D) -> Result<PhaseConfig, D::Error> {
    Ok(PhaseSection::deserialize(d)?.over(PhaseConfig::pretrain_default()))
}

fn finetune_section<'de, D: serde::Deserializer<'de>>(d: D) -> Result<PhaseConfig, D::Error> {
    Ok(PhaseSection::deserialize(d)?.over(PhaseConfig::default()))
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

impl PhaseConfig {
    fn from_train(t: &TrainConfig) -> Self {
        Self {
            lambda: t.lambda,
            lr: t.lr,
            weight_decay: t.weight_decay,
            steps: t.steps,
            batch_size: t.batch_size,
            lora_rank: t.lora_rank,
            lora_scale: t.lora_scale,
            checkpoint_interval: t.checkpoint_interval,
            eval_size: t.eval_size,
            schedule: t.schedule,
            grad_clip: t.grad_clip,
        }
    }

    fn pretrain_default() -> Self {
        Self::from_train(&TrainConfig::pretrain_default())
    }

    pub fn to_train(&self, phase: Phase, rates: Rates, seed: u64) -> TrainConfig {
        TrainConfig {
            phase,
            lambda: self.lambda,
            lr: self.lr,
            weight_decay: self.weight_decay,
            steps: self.steps,
            batch_size: self.batch_size,
            rates,
            lora_rank: self.lora_rank,
            lora_scale: self.lora_scale,
            seed,
            checkpoint_interval: self.checkpoint_interval,
            eval_size: self.eval_size,
            schedule: self.schedule,
            grad_clip: self.grad_clip,
        }
    }
}

fn default_pretrain() -> PhaseConfig {
    PhaseConfig::pretrain_default()
}

/// Diagnostics settings and export switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub tau: f64,
    pub sink_ratio: f64,
    pub sink_min_layers_frac: f64,
    pub full_range: bool,
    pub pairwise: bool,
    pub heatmaps: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        let rule = SinkRule::default();
        Self {
            tau: DEFAULT_TAU,
            sink_ratio: rule.ratio,
            sink_min_layers_frac: rule.min_layers_frac,
            full_range: false,
            pairwise: false,
            heatmaps: true,
        }
    }
}

impl ReportConfig {
    pub fn analysis(&self) -> AnalysisOptions {
        AnalysisOptions {
            tau: self.tau,
            sinks: SinkRule {
                ratio: self.sink_ratio,
                min_layers_frac: self.sink_min_layers_frac,
                full_range: self.full_range,
            },
            full_range: self.full_range,
            pairwise: self.pairwise,
        }
    }
}

/// Grid for `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    /// Rate lists in the `--rates` form, e.g. `"16,5"`; empty means
    /// [`default_rate_grid`] for the task.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rates: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDA_GRID.to_vec(),
            rates: Vec::new(),
        }
    }
}

/// Compression rates swept when the config names none.
pub fn default_rate_grid(task: Task) -> Vec<String> {
    let grid: &[&str] = match task {
        Task::Avsr => &["1,1", "4,2", "16,5"],
        Task::Asr => &["1", "4", "16"],
        Task::Vsr => &["1", "2", "5"],
    };
    grid.iter().map(|r| r.to_string()).collect()
}

impl SweepConfig {
    pub fn rate_lists(&self, task: Task) -> Vec<String> {
        if self.rates.is_empty() {
            default_rate_grid(task)
        } else {
            self.rates.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub rates: Rates,
    #[serde(default)]
    pub seed: u64,
    /// Phase run by `train`; `finetune` pretrains first unless `pretrained` is set.
    #[serde(default = "default_phase")]
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub toy: ToyTaskSpec,
    #[serde(default = "default_pretrain", deserialize_with = "pretrain_section")]
    pub pretrain: PhaseConfig,
    #[serde(default, deserialize_with = "finetune_section")]
    pub train: PhaseConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_phase() -> Phase {
    Phase::Finetune
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Avsr,
            rates: Rates::avsr(16, 5),
            seed: 0,
            phase: Phase::Finetune,
            pretrained: None,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            toy: ToyTaskSpec::default(),
            pretrain: PhaseConfig::pretrain_default(),
            train: PhaseConfig::default(),
            report: ReportConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn usage(field: &str, err: impl std::fmt::Display) -> anyhow::Error {
    UsageError(format!("{field}: {err}")).into()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage("config", format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| usage("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks every section before any compute; errors name the field.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.rates.check(self.task).map_err(|e| usage("rates", e))?;
        self.model.validate().map_err(|e| usage("model", e))?;
        self.toy.validate().map_err(|e| usage("toy", e))?;
        if self.toy.vocab().size() > self.model.vocab_size {
            return Err(usage(
                "model.vocab_size",
                format!("toy vocabulary needs {} ids", self.toy.vocab().size()),
            ));
        }
        if self.toy.audio_dim != self.model.audio_dim || self.toy.video_dim != self.model.video_dim {
            return Err(usage("toy", "audio_dim/video_dim must match the model"));
        }
        self.pretrain
            .to_train(Phase::Pretrain, self.rates, self.seed)
            .validate()
            .map_err(|e| usage("pretrain", e))?;
        self.train
            .to_train(Phase::Finetune, self.rates, self.seed)
            .validate()
            .map_err(|e| usage("train", e))?;
        if !(self.report.tau > 1.0) {
            return Err(usage("report.tau", "must exceed 1"));
        }
        if self.sweep.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(usage("sweep.lambdas", "values must be finite and non-negative"));
        }
        for r in &self.sweep.rate_lists(self.task) {
            Rates::parse_for(self.task, r).map_err(|e| usage("sweep.rates", e))?;
        }
        Ok(())
    }

    pub fn finetune_config(&self) -> TrainConfig {
        self.train.to_train(Phase::Finetune, self.rates, self.seed)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        self.pretrain.to_train(Phase::Pretrain, self.rates, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg: ExperimentConfig =
            toml::from_str("task = \"asr\"\nout_dir = \"runs/x\"\n[rates]\naudio = 4\n").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.report.tau, 1e3);
        assert_eq!(cfg.sweep.lambdas, vec![10.0, 100.0, 10_000.0]);
        assert_eq!(cfg.train.lambda, 100.0);
    }

    #[test]
    fn partial_sections_fill_from_their_own_phase() {
        let cfg: ExperimentConfig = toml::from_str(
            "task = \"asr\"\nout_dir = \"x\"\n[rates]\naudio = 4\n[pretrain]\nsteps = 3\n[train]\nsteps = 5\ngrad_clip = 0\n",
        )
        .unwrap();
        let pre = PhaseConfig::pretrain_default();
        assert_eq!(cfg.pretrain, PhaseConfig { steps: 3, ..pre });
        assert_eq!(
            cfg.train,
            PhaseConfig {
                steps: 5,
                grad_clip: None,
                ..PhaseConfig::default()
            }
        );
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn modality_contradictions_are_usage_errors() {
        for (task, rates) in [
            (Task::Asr, Rates::avsr(4, 2)),
            (Task::Vsr, Rates::asr(4)),
            (Task::Avsr, Rates::vsr(2)),
        ] {
            let cfg = ExperimentConfig {
                task,
                rates,
                ..ExperimentConfig::default()
            };
            let err = cfg.validate().unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{err}");
        }
    }
}
