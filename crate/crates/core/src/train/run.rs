// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pretrain and fine-tune loops with checkpointed evaluation.
//!
//! Run directory layout, when an output directory is given:
//!
//! ```text
//! checkpoints/step-000000.ckpt
//! metrics/step-000000.json      one CheckpointMetrics per checkpoint
//! summary.json                  RunSummary
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{decorrelation_loss, token_error_rate, total_loss};
use super::optim::AdamW;
use super::task::{ToyTask, ToyTaskSpec};
use crate::analysis::export::write_json;
use crate::analysis::{analyze_trace, checkpoint_timeline, AnalysisOptions, EmergenceSummary, SinkReport};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{
    apply_lora, bind, build_sequence, forward_on_tape, forward_with_trace, generate_greedy, text_sequence, Checkpoint,
    LoraSet, ModelConfig, ModelInput, ModelParams, ParamId, Rates, Sample,
};
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_LORA: u64 = 3;

/// RNG for one purpose of a run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The held-out samples of a run with `seed`; index `k` is sample selector `k`.
pub fn held_out_set(toy: &ToyTaskSpec, seed: u64, n: usize) -> Result<Vec<Sample>> {
    ToyTask::new(toy)?.batch(n, &mut stream_rng(seed, STREAM_EVAL))
}

/// Fresh base model for `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(config, &mut stream_rng(seed, STREAM_INIT))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Weight of the decorrelation term; 0 is the plain cross-entropy baseline.
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub rates: Rates,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
    /// Held-out samples used for evaluation.
    pub eval_size: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Rescale the joint gradient to at most this global L2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Multiplier applied at `step` (1-based) of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => {
                let progress = (step - 1) as f64 / total.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    /// Fine-tune settings calibrated on the default toy task at rates (16, 5).
    fn default() -> Self {
        Self {
            phase: Phase::Finetune,
            lambda: 100.0,
            lr: 1e-2,
            weight_decay: 0.0,
            steps: 2000,
            batch_size: 8,
            rates: Rates::avsr(16, 5),
            lora_rank: 8,
            lora_scale: 1.0,
            seed: 0,
            checkpoint_interval: 500,
            eval_size: 64,
            schedule: LrSchedule::Cosine,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    /// Language-model pretraining settings for the default toy task.
    pub fn pretrain_default() -> Self {
        Self {
            phase: Phase::Pretrain,
            lambda: 0.0,
            lr: 3e-3,
            steps: 600,
            checkpoint_interval: 100,
            eval_size: 16,
            grad_clip: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::contract("lr must be positive and weight_decay non-negative"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::contract("grad_clip must be positive"));
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 || self.eval_size == 0 {
            return Err(Error::contract(
                "batch_size, checkpoint_interval and eval_size must be positive",
            ));
        }
        if self.phase == Phase::Finetune {
            self.rates.check(self.rates.task()?)?;
            if self.lora_rank == 0 {
                return Err(Error::contract("lora_rank must be positive"));
            }
        }
        Ok(())
    }
}

/// Where and how a run records its outputs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub analysis: AnalysisOptions,
}

/// Everything measured at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub step: usize,
    /// Batch cross-entropy of the step that produced this checkpoint.
    pub train_ce: Option<f64>,
    /// Batch decorrelation loss of the same step.
    pub train_decor: Option<f64>,
    pub eval_ce: f64,
    /// Held-out mean cos² of non-BOS tokens to BOS over interior layers.
    pub eval_mean_cos2: f64,
    /// Held-out token error rate; fine-tune runs only.
    pub eval_ter: Option<f64>,
    pub report: SinkReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub phase: Phase,
    pub lambda: f64,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointMetrics>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&CheckpointMetrics> {
        self.checkpoints.last()
    }

    pub fn timeline(&self) -> Result<EmergenceSummary> {
        let reports: Vec<_> = self.checkpoints.iter().map(|c| (c.step, c.report.clone())).collect();
        checkpoint_timeline(&reports)
    }
}

/// Final outcome written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub phase: Phase,
    pub lambda: f64,
    pub seed: u64,
    pub steps: usize,
    pub final_checkpoint: String,
    pub eval_ce: f64,
    pub eval_mean_cos2: f64,
    pub eval_ter: Option<f64>,
    pub final_sinks: Vec<usize>,
    pub timeline: EmergenceSummary,
}

pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub checkpoint: Checkpoint,
    pub summary: RunSummary,
}

/// Held-out measurements of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ce: f64,
    pub mean_cos2: f64,
    pub ter: Option<f64>,
    pub report: SinkReport,
}

#[derive(Clone, Copy)]
enum Slot {
    Base(ParamId),
    LoraA(usize),
    LoraB(usize),
}

struct Layout {
    phase: Phase,
    rates: Rates,
    max_seq: usize,
}

impl Layout {
    fn input(&self, task: &ToyTask, sample: &Sample, include_target: bool) -> Result<ModelInput> {
        match self.phase {
            Phase::Pretrain => text_sequence(&sample.transcript, &task.spec.vocab(), include_target),
            Phase::Finetune => build_sequence(
                sample,
                self.rates.task()?,
                self.rates,
                &task.spec.vocab(),
                include_target,
                self.max_seq,
            ),
        }
    }
}

/// Held-out cross-entropy, mean cos², TER (fine-tune only) and the probe report.
///
/// The probe is the first held-out sample with its full target sequence.
fn evaluate(
    params: &ModelParams,
    lora: Option<&LoraSet>,
    task: &ToyTask,
    layout: &Layout,
    eval_set: &[Sample],
    analysis: &AnalysisOptions,
) -> Result<Evaluation> {
    let merged = match lora {
        Some(set) => apply_lora(params, set)?,
        None => params.clone(),
    };
    let vocab = task.spec.vocab();
    let (mut ce, mut cos2) = (0.0, 0.0);
    let (mut edits, mut ref_len) = (0.0, 0usize);
    let mut report = None;
    for (k, sample) in eval_set.iter().enumerate() {
        let input = layout.input(task, sample, true)?;
        let (logits, trace) = forward_with_trace(&merged, None, &input, &[])?;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let sample_ce = super::loss::sequence_cross_entropy(&mut tape, l, &input.spec)?;
        ce += tape.value(sample_ce).item();
        cos2 += decorrelation_loss(&trace)?;
        if k == 0 {
            report = Some(analyze_trace(&trace, &input.spec, analysis)?);
        }
        if layout.phase == Phase::Finetune {
            let prefix = layout.input(task, sample, false)?;
            let hyp = generate_greedy(&merged, None, &prefix, task.spec.max_len + 1)?;
            let reference: Vec<usize> = sample.transcript.iter().map(|&s| vocab.symbol_token(s)).collect();
            edits += token_error_rate(&hyp, &reference)? * reference.len() as f64;
            ref_len += reference.len();
        }
    }
    let n = eval_set.len() as f64;
    Ok(Evaluation {
        ce: ce / n,
        mean_cos2: cos2 / n,
        ter: (layout.phase == Phase::Finetune).then(|| edits / ref_len as f64),
        report: report.ok_or_else(|| Error::contract("empty evaluation set"))?,
    })
}

fn check_finite(step: usize, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{what} = {value}"),
        })
    }
}

fn clip(mut grads: Vec<Tensor>, max_norm: Option<f64>) -> Vec<Tensor> {
    let Some(max_norm) = max_norm else {
        return grads;
    };
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    grads
}

struct Recorder<'a> {
    out_dir: Option<&'a Path>,
    metrics: RunMetrics,
    last_file: String,
}

impl Recorder<'_> {
    fn record(&mut self, ckpt: &Checkpoint, m: CheckpointMetrics) -> Result<()> {
        let name = format!("step-{:06}", m.step);
        if let Some(dir) = self.out_dir {
            ckpt.save(&dir.join("checkpoints").join(format!("{name}.ckpt")))?;
            write_json(&dir.join("metrics").join(format!("{name}.json")), &m)?;
        }
        self.last_file = format!("checkpoints/{name}.ckpt");
        self.metrics.checkpoints.push(m);
        Ok(())
    }
}

fn train_loop(
    config: &TrainConfig,
    toy: &ToyTaskSpec,
    mut params: ModelParams,
    mut lora: Option<LoraSet>,
    options: &RunOptions,
) -> Result<RunOutcome> {
    config.validate()?;
    let task = ToyTask::new(toy)?;
    let vocab = toy.vocab();
    if vocab.size() > params.config.vocab_size {
        return Err(Error::contract(format!(
            "toy vocabulary of {} exceeds model vocab_size {}",
            vocab.size(),
            params.config.vocab_size
        )));
    }
    let layout = Layout {
        phase: config.phase,
        rates: config.rates,
        max_seq: params.config.max_seq,
    };
    let eval_set = held_out_set(toy, config.seed, config.eval_size)?;
    let mut batch_rng = stream_rng(config.seed, STREAM_TRAIN);

    let slots: Vec<Slot> = match config.phase {
        Phase::Pretrain => params
            .ids()
            .into_iter()
            .filter(|id| !matches!(id, ParamId::AudioProj | ParamId::VideoProj))
            .map(Slot::Base)
            .collect(),
        Phase::Finetune => {
            let mut s = Vec::new();
            if config.rates.audio.is_some() {
                s.push(Slot::Base(ParamId::AudioProj));
            }
            if config.rates.video.is_some() {
                s.push(Slot::Base(ParamId::VideoProj));
            }
            let n = lora.as_ref().map_or(0, |l| l.adapters.len());
            s.extend((0..n).flat_map(|k| [Slot::LoraA(k), Slot::LoraB(k)]));
            s
        }
    };
    let shape_of = |slot: Slot, params: &ModelParams, lora: &Option<LoraSet>| -> Result<Vec<usize>> {
        Ok(match slot {
            Slot::Base(id) => params.get(id)?.shape().to_vec(),
            Slot::LoraA(k) => lora.as_ref().expect("adapters present").adapters[k].a.shape().to_vec(),
            Slot::LoraB(k) => lora.as_ref().expect("adapters present").adapters[k].b.shape().to_vec(),
        })
    };
    let shapes: Vec<Vec<usize>> = slots
        .iter()
        .map(|&s| shape_of(s, &params, &lora))
        .collect::<Result<_>>()?;
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = AdamW::new(&shape_refs, config.lr, config.weight_decay);
    let base_trainable: Vec<ParamId> = slots
        .iter()
        .filter_map(|s| match s {
            Slot::Base(id) => Some(*id),
            _ => None,
        })
        .collect();
    let train_lora = config.phase == Phase::Finetune;

    let mut recorder = Recorder {
        out_dir: options.out_dir.as_deref(),
        metrics: RunMetrics {
            phase: config.phase,
            lambda: config.lambda,
            seed: config.seed,
            checkpoints: Vec::new(),
        },
        last_file: String::new(),
    };
    let snapshot = |params: &ModelParams, lora: &Option<LoraSet>, step: usize| Checkpoint {
        params: params.clone(),
        lora: lora.clone(),
        seed: config.seed,
        step,
    };
    let measure =
        |params: &ModelParams, lora: &Option<LoraSet>, step, train: Option<(f64, f64)>| -> Result<CheckpointMetrics> {
            let ev = evaluate(params, lora.as_ref(), &task, &layout, &eval_set, &options.analysis)?;
            check_finite(step, "held-out cross-entropy", ev.ce)?;
            Ok(CheckpointMetrics {
                step,
                train_ce: train.map(|t| t.0),
                train_decor: train.map(|t| t.1),
                eval_ce: ev.ce,
                eval_mean_cos2: ev.mean_cos2,
                eval_ter: ev.ter,
                report: ev.report,
            })
        };

    let m0 = measure(&params, &lora, 0, None)?;
    recorder.record(&snapshot(&params, &lora, 0), m0)?;

    for step in 1..=config.steps {
        let batch = task.batch(config.batch_size, &mut batch_rng)?;
        let mut tape = Tape::new();
        let model = bind(
            &mut tape,
            &params,
            lora.as_ref(),
            &|id| base_trainable.contains(&id),
            train_lora,
        )?;
        let mut total = None;
        let (mut ce_sum, mut decor_sum) = (0.0, 0.0);
        for sample in &batch {
            let input = layout.input(&task, sample, true)?;
            let fwd = forward_on_tape(&mut tape, &model, &input, &[])?;
            let terms = total_loss(&mut tape, &fwd, &input.spec, config.lambda)?;
            ce_sum += tape.value(terms.ce).item();
            decor_sum += tape.value(terms.decor).item();
            total = Some(match total {
                Some(t) => tape.add(t, terms.total)?,
                None => terms.total,
            });
        }
        let b = batch.len() as f64;
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / b);
        check_finite(step, "training loss", tape.value(loss).item())?;
        tape.backward(loss)?;

        let grads: Vec<Tensor> = slots
            .iter()
            .enumerate()
            .map(|(k, &slot)| {
                let var = match slot {
                    Slot::Base(id) => model.param(id),
                    Slot::LoraA(j) => model.adapters[&lora.as_ref().expect("adapters").adapters[j].target].0,
                    Slot::LoraB(j) => model.adapters[&lora.as_ref().expect("adapters").adapters[j].target].1,
                };
                tape.grad(var).cloned().unwrap_or_else(|| Tensor::zeros(&shapes[k]))
            })
            .collect();
        let grads = clip(grads, config.grad_clip);

        opt.lr = config.lr * config.schedule.factor(step, config.steps);
        opt.begin_step();
        for (k, (&slot, grad)) in slots.iter().zip(&grads).enumerate() {
            let target = match slot {
                Slot::Base(id) => params.get_mut(id)?,
                Slot::LoraA(j) => &mut lora.as_mut().expect("adapters").adapters[j].a,
                Slot::LoraB(j) => &mut lora.as_mut().expect("adapters").adapters[j].b,
            };
            opt.apply(k, target, grad)?;
        }

        if step % config.checkpoint_interval == 0 || step == config.steps {
            let m = measure(&params, &lora, step, Some((ce_sum / b, decor_sum / b)))?;
            recorder.record(&snapshot(&params, &lora, step), m)?;
        }
    }

    let metrics = recorder.metrics;
    let last = metrics.last().expect("step 0 is always recorded");
    let summary = RunSummary {
        phase: config.phase,
        lambda: config.lambda,
        seed: config.seed,
        steps: config.steps,
        final_checkpoint: recorder.last_file,
        eval_ce: last.eval_ce,
        eval_mean_cos2: last.eval_mean_cos2,
        eval_ter: last.eval_ter,
        final_sinks: last.report.sinks.global.iter().copied().collect(),
        timeline: metrics.timeline()?,
    };
    if let Some(dir) = &options.out_dir {
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(RunOutcome {
        checkpoint: snapshot(&params, &lora, config.steps),
        metrics,
        summary,
    })
}

/// Trains every base weight as a language model on transcript-only
/// sequences. `config.lambda` still applies if non-zero.
pub fn run_pretrain(
    config: &TrainConfig,
    toy: &ToyTaskSpec,
    model: ModelParams,
    options: &RunOptions,
) -> Result<RunOutcome> {
    if config.phase != Phase::Pretrain {
        return Err(Error::contract("run_pretrain needs phase = pretrain"));
    }
    train_loop(config, toy, model, None, options)
}

/// Attaches fresh adapters to the attention projections of `pretrained` and
/// trains them with the modality projectors; every other weight is frozen.
pub fn run_finetune(
    config: &TrainConfig,
    toy: &ToyTaskSpec,
    pretrained: &Checkpoint,
    options: &RunOptions,
) -> Result<RunOutcome> {
    if config.phase != Phase::Finetune {
        return Err(Error::contract("run_finetune needs phase = finetune"));
    }
    pretrained.params.validate()?;
    let params = pretrained.params.clone();
    let lora = LoraSet::init(
        &params,
        &LoraSet::attention_targets(params.config.n_layers),
        config.lora_rank,
        config.lora_scale,
        &mut stream_rng(config.seed, STREAM_LORA),
    )?;
    train_loop(config, toy, params, Some(lora), options)
}
