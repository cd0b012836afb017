// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic audio-visual transcription task.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Sample, Vocab};
use crate::tensor::Tensor;

/// Parameters of the toy task.
///
/// Transcripts are random walks on a fixed successor graph in which every
/// symbol has `successors` possible next symbols, so a language model has
/// something to learn. The graph and the per-symbol codes depend only on
/// `seed`; the batch RNG only picks walks and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTaskSpec {
    pub n_symbols: usize,
    pub prompt_len: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub successors: usize,
    /// Audio frames per symbol.
    pub audio_factor: usize,
    pub audio_noise: f64,
    pub audio_dim: usize,
    /// Video frames per symbol.
    pub video_factor: usize,
    /// Probability that a symbol's video frames show its confusion-class code.
    pub video_corruption: f64,
    pub video_dim: usize,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            n_symbols: 16,
            prompt_len: 5,
            min_len: 4,
            max_len: 8,
            successors: 2,
            audio_factor: 16,
            audio_noise: 0.5,
            audio_dim: 24,
            video_factor: 5,
            video_corruption: 0.3,
            video_dim: 24,
            seed: 0,
        }
    }
}

impl ToyTaskSpec {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_prompt: self.prompt_len,
            n_symbols: self.n_symbols,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_symbols < 2 {
            return Err(Error::contract("toy task needs at least 2 symbols"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::contract(format!(
                "transcript length range {}..={} is empty",
                self.min_len, self.max_len
            )));
        }
        if self.successors == 0 || self.successors > self.n_symbols {
            return Err(Error::contract(format!("successors must be in 1..={}", self.n_symbols)));
        }
        if self.audio_factor == 0 || self.video_factor == 0 || self.audio_dim == 0 || self.video_dim == 0 {
            return Err(Error::contract("modality factors and widths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.video_corruption) {
            return Err(Error::contract(format!(
                "video_corruption {} outside [0, 1]",
                self.video_corruption
            )));
        }
        if !(self.audio_noise >= 0.0 && self.audio_noise.is_finite()) {
            return Err(Error::contract("audio_noise must be finite and non-negative"));
        }
        Ok(())
    }
}

/// The fixed parts of a task instance: symbol codes and the successor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub spec: ToyTaskSpec,
    /// `n_symbols × audio_dim`
    pub audio_codes: Tensor,
    /// `n_symbols × video_dim`
    pub video_codes: Tensor,
    /// Per symbol, the code of its confusion class `{2k, 2k+1}`.
    pub video_class_codes: Tensor,
    pub successors: Vec<Vec<usize>>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("matching length")
}

impl ToyTask {
    pub fn new(spec: &ToyTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.n_symbols;
        let audio_codes = gaussian(&mut rng, n, spec.audio_dim);
        let video_codes = gaussian(&mut rng, n, spec.video_dim);
        let mut video_class_codes = Tensor::zeros(&[n, spec.video_dim]);
        for s in 0..n {
            let partner = s ^ 1;
            let row: Vec<f64> = if partner < n {
                video_codes
                    .row(s)
                    .iter()
                    .zip(video_codes.row(partner))
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect()
            } else {
                video_codes.row(s).to_vec()
            };
            video_class_codes.row_mut(s).copy_from_slice(&row);
        }
        let all: Vec<usize> = (0..n).collect();
        let successors = (0..n)
            .map(|_| {
                let mut next: Vec<usize> = all.choose_multiple(&mut rng, spec.successors).copied().collect();
                next.sort_unstable();
                next
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            audio_codes,
            video_codes,
            video_class_codes,
            successors,
        })
    }

    pub fn sample_transcript(&self, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
        let mut out = Vec::with_capacity(len);
        let mut s = rng.random_range(0..self.spec.n_symbols);
        out.push(s);
        while out.len() < len {
            s = *self.successors[s].choose(rng).expect("non-empty successor list");
            out.push(s);
        }
        out
    }

    /// Renders both streams of one transcript.
    pub fn render(&self, transcript: &[usize], rng: &mut impl Rng) -> Sample {
        let spec = &self.spec;
        let noise = Normal::new(0.0, spec.audio_noise.max(0.0)).expect("finite std");
        let mut audio = Tensor::zeros(&[transcript.len() * spec.audio_factor, spec.audio_dim]);
        let mut video = Tensor::zeros(&[transcript.len() * spec.video_factor, spec.video_dim]);
        for (k, &s) in transcript.iter().enumerate() {
            for f in 0..spec.audio_factor {
                let row = audio.row_mut(k * spec.audio_factor + f);
                for (x, c) in row.iter_mut().zip(self.audio_codes.row(s)) {
                    *x = c + if spec.audio_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                }
            }
            let confused = spec.video_corruption > 0.0 && rng.random_bool(spec.video_corruption);
            let code = if confused {
                self.video_class_codes.row(s)
            } else {
                self.video_codes.row(s)
            };
            for f in 0..spec.video_factor {
                video.row_mut(k * spec.video_factor + f).copy_from_slice(code);
            }
        }
        Sample {
            audio,
            video,
            transcript: transcript.to_vec(),
        }
    }

    pub fn batch(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<Sample>> {
        if batch == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        Ok((0..batch)
            .map(|_| {
                let t = self.sample_transcript(rng);
                self.render(&t, rng)
            })
            .collect())
    }
}

/// `batch` samples whose audio and video streams share one transcript each.
pub fn generate_toy_batch(spec: &ToyTaskSpec, batch: usize, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    ToyTask::new(spec)?.batch(batch, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean() -> ToyTaskSpec {
        ToyTaskSpec {
            audio_noise: 0.0,
            video_corruption: 0.0,
            ..ToyTaskSpec::default()
        }
    }

    #[test]
    fn clean_channel_repeats_codes_exactly() {
        let spec = clean();
        let task = ToyTask::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in task.batch(4, &mut rng).unwrap() {
            for (k, &sym) in s.transcript.iter().enumerate() {
                for f in 0..spec.audio_factor {
                    assert_eq!(s.audio.row(k * spec.audio_factor + f), task.audio_codes.row(sym));
                }
                for f in 0..spec.video_factor {
                    assert_eq!(s.video.row(k * spec.video_factor + f), task.video_codes.row(sym));
                }
            }
        }
    }

    #[test]
    fn full_corruption_hides_pair_identity() {
        let spec = ToyTaskSpec {
            video_corruption: 1.0,
            ..clean()
        };
        let task = ToyTask::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = task.render(&[4, 6], &mut rng);
        let b = task.render(&[5, 7], &mut rng);
        assert_eq!(a.video, b.video);
        assert_ne!(a.audio, b.audio);
    }

    #[test]
    fn walks_follow_the_successor_graph() {
        let task = ToyTask::new(&ToyTaskSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let t = task.sample_transcript(&mut rng);
            assert!((4..=8).contains(&t.len()));
            for w in t.windows(2) {
                assert!(task.successors[w[0]].contains(&w[1]));
            }
        }
    }

    #[test]
    fn fixed_seed_gives_identical_batches() {
        let spec = ToyTaskSpec::default();
        let a = generate_toy_batch(&spec, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = generate_toy_batch(&spec, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            ToyTaskSpec {
                video_corruption: 1.5,
                ..ToyTaskSpec::default()
            },
            ToyTaskSpec {
                min_len: 9,
                ..ToyTaskSpec::default()
            },
            ToyTaskSpec {
                successors: 0,
                ..ToyTaskSpec::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(generate_toy_batch(&ToyTaskSpec::default(), 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
