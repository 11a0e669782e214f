mod common;

use cmer::data::cmaf::{decode, encode};
use cmer::data::{Batch, EmotionLabel, FeatureSequence, Modality, UtteranceSample, AUDIO_DIM, TEXT_DIM};
use cmer::model::CrossModalAttention;
use cmer::{GradTape, Model, ModelConfig, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

fn sample(id: usize, session: u8, label: usize, frames: usize, tokens: usize, dims: (usize, usize), seed: u64) -> UtteranceSample {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    };
    let audio = (0..frames * dims.0).map(|_| next()).collect();
    let text = (0..tokens * dims.1).map(|_| next()).collect();
    UtteranceSample {
        id: format!("utt-{id}"),
        session,
        audio: FeatureSequence::new(Modality::Audio, frames, dims.0, audio),
        text: FeatureSequence::new(Modality::Text, tokens, dims.1, text),
        label: EmotionLabel::from_index(label).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in values(12), rows in 1usize..4) {
        let cols = 12 / rows;
        let mut tape = GradTape::<f64>::detached();
        let v = tape.constant(Tensor::new(vec![rows, cols], x[..rows * cols].to_vec()).unwrap());
        let p = tape.softmax(v, 1).unwrap();
        for row in tape.value(p).chunks(cols) {
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_split_is_identity(a in values(6), b in values(9), axis in 0usize..2) {
        let mut tape = GradTape::<f64>::detached();
        let (sa, sb) = if axis == 0 { ([2, 3], [3, 3]) } else { ([3, 2], [3, 3]) };
        let va = tape.constant(Tensor::new(sa.to_vec(), a.clone()).unwrap());
        let vb = tape.constant(Tensor::new(sb.to_vec(), b.clone()).unwrap());
        let c = tape.concat(&[va, vb], axis).unwrap();
        let parts = tape.split(c, axis, &[sa[axis], sb[axis]]).unwrap();
        prop_assert_eq!(tape.value(parts[0]), a.as_slice());
        prop_assert_eq!(tape.value(parts[1]), b.as_slice());
    }

    #[test]
    fn cmaf_round_trip(specs in prop::collection::vec((1u8..=5, 0usize..4, 1usize..4, 1usize..4, any::<u64>()), 1..4)) {
        let samples: Vec<_> = specs
            .iter()
            .enumerate()
            .map(|(i, &(s, l, n, t, seed))| sample(i, s, l, n, t, (AUDIO_DIM, TEXT_DIM), seed))
            .collect();
        let bytes = encode(&samples).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &samples);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), tq in 1usize..6, tk in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let block = CrossModalAttention::new(&mut store, "cma", &cfg, &mut rng);
        let q = common::mat(tq, 8, |r, c| ((seed as usize + 7 * r + c) % 13) as f64 / 6.5 - 1.0);
        let kv = common::mat(tk, 8, |r, c| ((seed as usize + 3 * r + 5 * c) % 11) as f64 / 5.5 - 1.0);
        let mut tape = GradTape::new(&store);
        let qv = tape.constant(Tensor::new(vec![tq, 8], common::flatten(&q)).unwrap());
        let kvv = tape.constant(Tensor::new(vec![tk, 8], common::flatten(&kv)).unwrap());
        let out = block.attend(&mut tape, qv, kvv, None).unwrap();
        prop_assert_eq!(out.attn[0].len(), cfg.heads);
        for &w in &out.attn[0] {
            prop_assert_eq!(tape.shape(w), &[tq, tk]);
            for row in tape.value(w).chunks(tk) {
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logits_do_not_depend_on_batch_company(lens in prop::collection::vec((4usize..20, 1usize..6), 2..5), seed in any::<u64>()) {
        let model = Model::<f64>::new(ModelConfig::tiny(), seed).unwrap();
        let samples: Vec<_> = lens
            .iter()
            .enumerate()
            .map(|(i, &(n, t))| sample(i, 1, i % 4, n, t, (8, 8), seed ^ i as u64))
            .collect();
        let refs: Vec<_> = samples.iter().collect();
        let together = model.logits(&Batch::from_samples(&refs)).unwrap();
        for (s, row) in samples.iter().zip(&together) {
            let alone = model.logits(&Batch::single(s)).unwrap();
            for (a, b) in alone[0].iter().zip(row) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
