// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{random_input, random_model};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sinklab::analysis::{analyze_trace, attention_receive_scores, AnalysisOptions, ReportDiff};
use sinklab::model::{apply_lora, forward, forward_with_trace, Checkpoint, InterventionSpec, LoraSet, RotationMode};
use sinklab::tensor::{cosine, l2_norm};
use sinklab::train::decorrelation_loss;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_is_causal_and_normalized(seed in any::<u64>(), scale in 1.0f64..30.0, mm in any::<bool>()) {
        let params = random_model(seed, scale);
        let input = random_input(seed ^ 1, mm);
        let (_, trace) = forward_with_trace(&params, None, &input, &[]).unwrap();
        for lt in &trace.layers {
            for a in &lt.attention {
                for k in 0..a.rows() {
                    let row = a.row(k);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    prop_assert!(row[k + 1..].iter().all(|&v| v == 0.0));
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
        prop_assert!(trace.reconstruction_error() <= 1e-8);
        // Every query spreads unit mass over its keys and the score averages it back.
        let scores = attention_receive_scores(&trace);
        let n = trace.n_tokens();
        for l in 1..=trace.n_layers() {
            let mass: f64 = (0..n).map(|i| scores.get(l, i) * (n - i) as f64).sum();
            prop_assert!((mass - n as f64).abs() <= 1e-9);
        }
        let decor = decorrelation_loss(&trace).unwrap();
        prop_assert!((0.0..=1.0).contains(&decor));
    }

    #[test]
    fn rotation_contract(seed in any::<u64>(), layer in 1usize..=4, pick in any::<prop::sample::Index>(), target in any::<prop::sample::Index>()) {
        let params = random_model(seed, 8.0);
        let input = random_input(seed ^ 2, true);
        let n = input.len();
        let token = 1 + pick.index(n - 1);
        let j = target.index(n);
        let spec = InterventionSpec { layer, token, mode: RotationMode::TowardToken(j) };
        let (_, base) = forward_with_trace(&params, None, &input, &[]).unwrap();
        let (_, edited) = forward_with_trace(&params, None, &input, &[spec]).unwrap();
        let before = base.hidden(layer).row(token);
        let after = edited.hidden(layer).row(token);
        let norm = l2_norm(before);
        prop_assert!((l2_norm(after) - norm).abs() <= 1e-10 * norm.max(1.0));
        prop_assert!((cosine(after, edited.hidden(layer).row(j)) - 1.0).abs() <= 1e-10);
        prop_assert!(edited.reconstruction_error() <= 1e-8);
        // Layers below the edit are untouched.
        for l in 0..layer {
            prop_assert_eq!(base.hidden(l), edited.hidden(l));
        }
    }

    #[test]
    fn identity_rotation_is_bitwise_noop(seed in any::<u64>(), layer in 1usize..=4, pick in any::<prop::sample::Index>()) {
        let params = random_model(seed, 8.0);
        let input = random_input(seed ^ 3, true);
        let token = pick.index(input.len());
        let spec = InterventionSpec { layer, token, mode: RotationMode::TowardToken(token) };
        let (la, base) = forward_with_trace(&params, None, &input, &[]).unwrap();
        let (lb, edited) = forward_with_trace(&params, None, &input, &[spec]).unwrap();
        prop_assert_eq!(la, lb);
        for l in 0..=4 {
            prop_assert_eq!(base.hidden(l), edited.hidden(l));
        }
        let opts = AnalysisOptions::default();
        let ra = analyze_trace(&base, &input.spec, &opts).unwrap();
        let rb = analyze_trace(&edited, &input.spec, &opts).unwrap();
        prop_assert!(ReportDiff::between(&ra, &rb).is_empty());
        prop_assert_eq!(ra.scores, rb.scores);
        prop_assert_eq!(ra.cosine, rb.cosine);
        prop_assert_eq!(ra.massive, rb.massive);
    }

    #[test]
    fn merged_and_unmerged_adapters_agree(seed in any::<u64>()) {
        let params = random_model(seed, 4.0);
        let input = random_input(seed ^ 4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lora = LoraSet::init(&params, &LoraSet::attention_targets(4), 2, 1.5, &mut rng).unwrap();
        prop_assert_eq!(forward(&params, Some(&lora), &input).unwrap(), forward(&params, None, &input).unwrap());
        for (k, ad) in lora.adapters.iter_mut().enumerate() {
            for (m, v) in ad.b.data_mut().iter_mut().enumerate() {
                *v = 0.1 * (((k + m) % 5) as f64 - 2.0);
            }
        }
        let a = forward(&params, Some(&lora), &input).unwrap();
        let b = forward(&apply_lora(&params, &lora).unwrap(), None, &input).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), step in 0usize..10_000, with_lora in any::<bool>()) {
        let params = random_model(seed, 2.0);
        let lora = with_lora.then(|| LoraSet::init(&params, &LoraSet::attention_targets(4), 3, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap());
        let ckpt = Checkpoint { params, lora, seed, step };
        let bytes = ckpt.to_bytes().unwrap();
        prop_assert_eq!(&Checkpoint::from_bytes(&bytes).unwrap(), &ckpt);
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
