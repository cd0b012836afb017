// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token layout and modality compression.
//!
//! A multimodal sequence is laid out as
//!
//! ```text
//! BOS <audio> a_1..a_A </audio> <video> v_1..v_V </video> prompt.. target.. EOS
//! ```
//!
//! where the audio and video spans hold average-pooled, linearly projected
//! feature frames instead of token embeddings. Unimodal tasks drop the
//! absent span together with its markers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which modalities feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    Vsr,
    Avsr,
}

impl Task {
    pub fn uses_audio(self) -> bool {
        matches!(self, Self::Asr | Self::Avsr)
    }

    pub fn uses_video(self) -> bool {
        matches!(self, Self::Vsr | Self::Avsr)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Asr => "asr",
            Self::Vsr => "vsr",
            Self::Avsr => "avsr",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(Self::Asr),
            "vsr" => Ok(Self::Vsr),
            "avsr" => Ok(Self::Avsr),
            other => Err(Error::contract(format!("unknown task '{other}'"))),
        }
    }
}

/// Temporal pooling factors `(a, v)`; a unimodal task sets only its own rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<usize>,
}

impl Rates {
    pub fn avsr(audio: usize, video: usize) -> Self {
        Self {
            audio: Some(audio),
            video: Some(video),
        }
    }

    pub fn asr(audio: usize) -> Self {
        Self {
            audio: Some(audio),
            video: None,
        }
    }

    pub fn vsr(video: usize) -> Self {
        Self {
            audio: None,
            video: Some(video),
        }
    }

    /// Enforces that exactly the task's modalities carry a rate, each ≥ 1.
    pub fn check(&self, task: Task) -> Result<()> {
        match (task.uses_audio(), self.audio) {
            (true, None) => return Err(Error::contract(format!("{task} requires an audio rate"))),
            (false, Some(_)) => return Err(Error::contract(format!("{task} forbids an audio rate"))),
            _ => {}
        }
        match (task.uses_video(), self.video) {
            (true, None) => return Err(Error::contract(format!("{task} requires a video rate"))),
            (false, Some(_)) => return Err(Error::contract(format!("{task} forbids a video rate"))),
            _ => {}
        }
        if self.audio == Some(0) || self.video == Some(0) {
            return Err(Error::contract("compression rates must be at least 1"));
        }
        Ok(())
    }

    /// The task implied by which rates are set.
    pub fn task(&self) -> Result<Task> {
        match (self.audio, self.video) {
            (Some(_), Some(_)) => Ok(Task::Avsr),
            (Some(_), None) => Ok(Task::Asr),
            (None, Some(_)) => Ok(Task::Vsr),
            (None, None) => Err(Error::contract("no compression rate set")),
        }
    }

    /// Parses `a,v`, `a` or `v` according to the task.
    pub fn parse_for(task: Task, s: &str) -> Result<Self> {
        let nums: Vec<usize> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::contract(format!("bad rate list '{s}'")))
            })
            .collect::<Result<_>>()?;
        let rates = match (task, nums.as_slice()) {
            (Task::Avsr, [a, v]) => Self::avsr(*a, *v),
            (Task::Asr, [a]) => Self::asr(*a),
            (Task::Vsr, [v]) => Self::vsr(*v),
            _ => {
                return Err(Error::contract(format!(
                    "{task} expects {} rate(s), got '{s}'",
                    if task == Task::Avsr { 2 } else { 1 }
                )))
            }
        };
        rates.check(task)?;
        Ok(rates)
    }
}

impl fmt::Display for Rates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.audio, self.video) {
            (Some(a), Some(v)) => write!(f, "({a},{v})"),
            (Some(a), None) => write!(f, "({a})"),
            (None, Some(v)) => write!(f, "({v})"),
            (None, None) => f.write_str("()"),
        }
    }
}

/// Fixed vocabulary layout: seven special ids, then prompt words, then
/// transcript symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub n_prompt: usize,
    pub n_symbols: usize,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const AUDIO_OPEN: usize = 3;
    pub const AUDIO_CLOSE: usize = 4;
    pub const VIDEO_OPEN: usize = 5;
    pub const VIDEO_CLOSE: usize = 6;
    const N_SPECIAL: usize = 7;

    pub fn size(&self) -> usize {
        Self::N_SPECIAL + self.n_prompt + self.n_symbols
    }

    pub fn prompt_token(&self, k: usize) -> usize {
        Self::N_SPECIAL + k
    }

    pub fn symbol_token(&self, s: usize) -> usize {
        Self::N_SPECIAL + self.n_prompt + s
    }

    /// Inverse of [`Vocab::symbol_token`].
    pub fn token_symbol(&self, token: usize) -> Option<usize> {
        let first = Self::N_SPECIAL + self.n_prompt;
        (first..first + self.n_symbols).contains(&token).then(|| token - first)
    }

    pub fn prompt(&self) -> Vec<usize> {
        (0..self.n_prompt).map(|k| self.prompt_token(k)).collect()
    }
}

/// What a sequence position holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Bos,
    Marker,
    Audio,
    Video,
    Prompt,
    Target,
    Pad,
}

/// Token ids and role labels per position. Audio and video positions carry
/// no token id; their content comes from the pooled modality streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub tokens: Vec<Option<usize>>,
    pub roles: Vec<Role>,
}

impl SequenceSpec {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    fn push(&mut self, token: Option<usize>, role: Role) {
        self.tokens.push(token);
        self.roles.push(role);
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    /// Positions whose token is predicted by the loss: `(input_row, target_id)`
    /// with `input_row = position − 1`.
    pub fn target_pairs(&self) -> (Vec<usize>, Vec<usize>) {
        self.roles
            .iter()
            .enumerate()
            .filter(|(p, r)| **r == Role::Target && *p > 0)
            .filter_map(|(p, _)| self.tokens[p].map(|t| (p - 1, t)))
            .unzip()
    }

    /// Checks the layout invariants.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.roles.len() {
            return Err(Error::contract("token and role lists differ in length"));
        }
        if self.roles.first() != Some(&Role::Bos) || self.tokens.first() != Some(&Some(Vocab::BOS)) {
            return Err(Error::contract("position 0 must be BOS"));
        }
        for (p, (t, r)) in self.tokens.iter().zip(&self.roles).enumerate() {
            let modal = matches!(r, Role::Audio | Role::Video);
            if modal == t.is_some() {
                return Err(Error::contract(format!("position {p}: role {r:?} with token {t:?}")));
            }
            if p > 0 && *r == Role::Bos {
                return Err(Error::contract("BOS may only appear at position 0"));
            }
        }
        Ok(())
    }
}

/// A sequence ready for the decoder: its layout plus the pooled streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub spec: SequenceSpec,
    /// Pooled audio frames, one row per audio position.
    pub audio: Option<Tensor>,
    /// Pooled video frames, one row per video position.
    pub video: Option<Tensor>,
}

impl ModelInput {
    /// A text-only input (no modality spans).
    pub fn text(spec: SequenceSpec) -> Result<Self> {
        let input = Self {
            spec,
            audio: None,
            video: None,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn len(&self) -> usize {
        self.spec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let check = |stream: &Option<Tensor>, role: Role| -> Result<()> {
            let rows = stream.as_ref().map_or(0, Tensor::rows);
            if rows != self.spec.count(role) {
                return Err(Error::contract(format!(
                    "{role:?} span has {} positions but {rows} stream rows",
                    self.spec.count(role)
                )));
            }
            Ok(())
        };
        check(&self.audio, Role::Audio)?;
        check(&self.video, Role::Video)
    }

    /// Appends a token with the given role.
    pub fn push_token(&mut self, token: usize, role: Role) {
        self.spec.push(Some(token), role);
    }

    /// Right-pads with PAD tokens up to `len` positions.
    pub fn pad_to(&mut self, len: usize) {
        while self.spec.len() < len {
            self.spec.push(Some(Vocab::PAD), Role::Pad);
        }
    }
}

/// One synthetic utterance: raw feature streams and the symbol transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `T_a × audio_dim`
    pub audio: Tensor,
    /// `T_v × video_dim`
    pub video: Tensor,
    /// Symbol indices in `0..n_symbols`.
    pub transcript: Vec<usize>,
}

/// Averages non-overlapping windows of `factor` frames. A trailing partial
/// window is averaged over the frames it actually holds.
pub fn average_pool_compress(stream: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::contract("pooling factor must be at least 1"));
    }
    let (t, d) = stream.dims2("average_pool_compress")?;
    if t == 0 {
        return Err(Error::contract("cannot pool an empty stream"));
    }
    let windows = t.div_ceil(factor);
    let mut out = Tensor::zeros(&[windows, d]);
    for w in 0..windows {
        let lo = w * factor;
        let hi = (lo + factor).min(t);
        let inv = 1.0 / (hi - lo) as f64;
        let acc = out.row_mut(w);
        for r in lo..hi {
            for (a, v) in acc.iter_mut().zip(stream.row(r)) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    Ok(out)
}

/// Lays out a multimodal sample. With `include_target = false` the sequence
/// stops after the prompt and serves as a generation prefix.
pub fn build_sequence(
    sample: &Sample,
    task: Task,
    rates: Rates,
    vocab: &Vocab,
    include_target: bool,
    max_seq: usize,
) -> Result<ModelInput> {
    rates.check(task)?;
    let mut spec = SequenceSpec {
        tokens: Vec::new(),
        roles: Vec::new(),
    };
    spec.push(Some(Vocab::BOS), Role::Bos);
    let mut audio = None;
    let mut video = None;
    if let Some(a) = rates.audio {
        let pooled = average_pool_compress(&sample.audio, a)?;
        spec.push(Some(Vocab::AUDIO_OPEN), Role::Marker);
        for _ in 0..pooled.rows() {
            spec.push(None, Role::Audio);
        }
        spec.push(Some(Vocab::AUDIO_CLOSE), Role::Marker);
        audio = Some(pooled);
    }
    if let Some(v) = rates.video {
        let pooled = average_pool_compress(&sample.video, v)?;
        spec.push(Some(Vocab::VIDEO_OPEN), Role::Marker);
        for _ in 0..pooled.rows() {
            spec.push(None, Role::Video);
        }
        spec.push(Some(Vocab::VIDEO_CLOSE), Role::Marker);
        video = Some(pooled);
    }
    for t in vocab.prompt() {
        spec.push(Some(t), Role::Prompt);
    }
    if include_target {
        for &s in &sample.transcript {
            spec.push(Some(vocab.symbol_token(s)), Role::Target);
        }
        spec.push(Some(Vocab::EOS), Role::Target);
    }
    if spec.len() > max_seq {
        return Err(Error::contract(format!(
            "sequence of {} positions exceeds max_seq {max_seq}",
            spec.len()
        )));
    }
    let input = ModelInput { spec, audio, video };
    input.validate()?;
    Ok(input)
}

/// `BOS prompt.. transcript.. EOS` with no modality spans, used for
/// language-model pretraining.
pub fn text_sequence(transcript: &[usize], vocab: &Vocab, include_target: bool) -> Result<ModelInput> {
    let mut spec = SequenceSpec {
        tokens: vec![Some(Vocab::BOS)],
        roles: vec![Role::Bos],
    };
    for t in vocab.prompt() {
        spec.push(Some(t), Role::Prompt);
    }
    if include_target {
        for &s in transcript {
            if s >= vocab.n_symbols {
                return Err(Error::Index {
                    what: "transcript symbol",
                    index: s,
                    len: vocab.n_symbols,
                });
            }
            spec.push(Some(vocab.symbol_token(s)), Role::Target);
        }
        spec.push(Some(Vocab::EOS), Role::Target);
    }
    ModelInput::text(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn pooling_exact_and_partial_windows() {
        let out = average_pool_compress(&col(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(out.data(), &[1.5, 3.5]);
        let out = average_pool_compress(&col(&[1.0, 2.0, 3.0]), 2).unwrap();
        assert_eq!(out.data(), &[1.5, 3.0]);
        let x = col(&[0.25, -1.0, 7.0]);
        assert_eq!(average_pool_compress(&x, 1).unwrap(), x);
        assert!(average_pool_compress(&x, 0).is_err());
    }

    fn sample(ta: usize, tv: usize) -> Sample {
        Sample {
            audio: Tensor::filled(&[ta, 3], 0.5),
            video: Tensor::filled(&[tv, 2], -0.5),
            transcript: vec![0, 1, 2],
        }
    }

    #[test]
    fn avsr_layout_and_span_lengths() {
        let vocab = Vocab {
            n_prompt: 2,
            n_symbols: 4,
        };
        let input = build_sequence(&sample(100, 23), Task::Avsr, Rates::avsr(16, 5), &vocab, true, 64).unwrap();
        assert_eq!(input.spec.count(Role::Audio), 7);
        assert_eq!(input.spec.count(Role::Video), 5);
        assert_eq!(input.spec.count(Role::Marker), 4);
        assert_eq!(input.spec.count(Role::Target), 4);
        assert_eq!(input.spec.roles[0], Role::Bos);
        let (rows, targets) = input.spec.target_pairs();
        assert_eq!(targets.last(), Some(&Vocab::EOS));
        assert_eq!(rows.last(), Some(&(input.len() - 2)));
    }

    #[test]
    fn asr_drops_video_span() {
        let vocab = Vocab {
            n_prompt: 2,
            n_symbols: 4,
        };
        let input = build_sequence(&sample(10, 10), Task::Asr, Rates::asr(1), &vocab, true, 64).unwrap();
        assert_eq!(input.spec.count(Role::Video), 0);
        assert!(!input.spec.tokens.contains(&Some(Vocab::VIDEO_OPEN)));
        assert_eq!(input.spec.count(Role::Audio), 10);
        assert!(input.video.is_none());
    }

    #[test]
    fn unit_rates_keep_raw_lengths() {
        let vocab = Vocab {
            n_prompt: 1,
            n_symbols: 4,
        };
        let input = build_sequence(&sample(9, 6), Task::Avsr, Rates::avsr(1, 1), &vocab, false, 64).unwrap();
        assert_eq!(input.spec.count(Role::Audio), 9);
        assert_eq!(input.spec.count(Role::Video), 6);
        assert_eq!(input.spec.count(Role::Target), 0);
    }

    #[test]
    fn rate_validation_and_max_seq() {
        let vocab = Vocab {
            n_prompt: 1,
            n_symbols: 4,
        };
        assert!(build_sequence(&sample(9, 6), Task::Asr, Rates::avsr(1, 1), &vocab, true, 64).is_err());
        assert!(build_sequence(&sample(9, 6), Task::Avsr, Rates::asr(1), &vocab, true, 64).is_err());
        assert!(build_sequence(&sample(90, 6), Task::Asr, Rates::asr(1), &vocab, true, 64).is_err());
        assert_eq!(Rates::parse_for(Task::Avsr, "16,5").unwrap(), Rates::avsr(16, 5));
        assert!(Rates::parse_for(Task::Asr, "16,5").is_err());
        assert_eq!(Rates::parse_for(Task::Vsr, "5").unwrap(), Rates::vsr(5));
    }
}
