mod common;

use common::algebra;
use onion_core::gru::{self, GruParams};
use onion_core::interventions::onion::onion_intervene;
use onion_core::probes::{featurize, reconstruction_error, FeaturizerVariant};
use onion_core::taskgen::{
    bigram_counterfactual_from, decode_corpus, encode_corpus, random_tokens, unigram_counterfactual_from,
    OnionEditExample,
};
use onion_core::trainer::{load_checkpoint, save_checkpoint, CheckpointMeta, TrainConfig};
use onion_core::{Graph, RepeatExample, Rng, TaskConfig, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn das_empty_mask_is_exact(seed in any::<u64>()) {
        prop_assert!(algebra::empty_mask_is_noop(seed));
    }

    #[test]
    fn das_full_mask_copies_source(seed in any::<u64>()) {
        prop_assert!(algebra::full_mask_copy_error(seed) < 1e-5);
    }

    #[test]
    fn rotation_roundtrip(seed in any::<u64>()) {
        prop_assert!(algebra::rotation_roundtrip_error(seed) < 1e-5);
    }

    #[test]
    fn onion_same_token_edit_is_exact(seed in any::<u64>()) {
        prop_assert!(algebra::onion_same_token_is_noop(seed));
    }

    #[test]
    fn onion_edit_then_reverse_restores_state(seed in any::<u64>()) {
        let (op, mut rng) = algebra::random_onion(seed);
        let len = rng.range_inclusive(1, 9);
        let base = random_tokens(&mut rng, op.n_symbols, len);
        let j = rng.range_inclusive(1, len);
        let new = (base[j - 1] + 1 + rng.below(op.n_symbols - 1)) % op.n_symbols;
        let h: Vec<f32> = (0..op.hidden).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let fwd = OnionEditExample { base: base.clone(), j, old_token: base[j - 1], new_token: new };
        let edited = onion_intervene(&op, &h, &fwd).unwrap();
        let mut target = base.clone();
        target[j - 1] = new;
        let back = OnionEditExample { base: target, j, old_token: new, new_token: base[j - 1] };
        let restored = onion_intervene(&op, &edited, &back).unwrap();
        let scale = edited.iter().fold(1.0f32, |m, x| m.max(x.abs()));
        for (a, b) in restored.iter().zip(&h) {
            prop_assert!((a - b).abs() <= 1e-5 * scale);
        }
    }

    #[test]
    fn consistent_featurizer_inverts(seed in any::<u64>()) {
        let (op, mut rng) = algebra::random_onion(seed);
        let op = op.cast::<f64>();
        let len = rng.range_inclusive(1, 9);
        let tokens = random_tokens(&mut rng, op.n_symbols, len);
        let h: Vec<f64> = (0..op.hidden).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let err = reconstruction_error(&h, &tokens, &op, FeaturizerVariant::Consistent).unwrap();
        prop_assert!(err < 1e-10);
        let f = featurize(&h, &tokens, &op, FeaturizerVariant::Consistent).unwrap();
        prop_assert_eq!(f.features.len(), len);
    }

    #[test]
    fn gru_states_stay_in_unit_box(seed in any::<u64>(), len in 1usize..12) {
        let mut rng = Rng::new(seed);
        let mut p = GruParams::<f64>::init(6, 5, &mut rng);
        for t in [&mut p.u_h, &mut p.w_h, &mut p.b_h] {
            for x in t.data_mut() {
                *x *= 20.0;
            }
        }
        let tokens = random_tokens(&mut rng, 5, len);
        let (h, trace) = gru::encode(&p, &tokens).unwrap();
        prop_assert!(h.data().iter().all(|v| v.abs() <= 1.0));
        prop_assert_eq!(trace.steps(), len + 1);
        prop_assert!(trace.values.data().iter().all(|&z| (0.0..=1.0).contains(&z)));
    }

    #[test]
    fn unigram_counterfactual_splits_positions(seed in any::<u64>(), len in 1usize..10) {
        let mut rng = Rng::new(seed);
        let y = random_tokens(&mut rng, 30, len);
        let cf = unigram_counterfactual_from(&mut rng, y.clone(), 30);
        prop_assert!(!cf.positions.is_empty());
        for k in 1..=len {
            if cf.positions.contains(&k) {
                prop_assert_eq!(cf.s[k - 1], y[k - 1]);
            } else {
                prop_assert_eq!(cf.b[k - 1], y[k - 1]);
            }
        }
        prop_assert_eq!(cf.variables(), cf.positions.clone());
    }

    #[test]
    fn bigram_counterfactual_edits_one_position(seed in any::<u64>(), len in 2usize..10) {
        let mut rng = Rng::new(seed);
        let y = random_tokens(&mut rng, 30, len);
        let cf = bigram_counterfactual_from(&mut rng, y.clone(), 30);
        let j = cf.positions[0];
        let diffs: Vec<usize> = (0..len).filter(|&k| cf.b[k] != y[k]).collect();
        prop_assert_eq!(diffs, vec![j - 1]);
        for k in j.saturating_sub(1).max(1)..=(j + 1).min(len) {
            prop_assert_eq!(cf.s[k - 1], y[k - 1]);
        }
        let vars = cf.variables();
        prop_assert!(!vars.is_empty() && vars.iter().all(|&v| v >= 1 && v < len));
    }

    #[test]
    fn gumbel_hard_rows_are_one_hot(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..12) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::<f32>::new();
        let l = g.constant(Tensor::normal(&[rows, cols], 0.0, 2.0, &mut rng));
        let y = g.gumbel_softmax_hard(l, 1.0, &mut rng);
        let v = g.value(y);
        for r in 0..rows {
            let row: Vec<f32> = (0..cols).map(|c| v.get(r, c)).collect();
            prop_assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            prop_assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), cols - 1);
        }
    }

    #[test]
    fn corpus_roundtrip(seed in any::<u64>(), n in 0usize..50) {
        let mut rng = Rng::new(seed);
        let seqs: Vec<RepeatExample> = (0..n)
            .map(|_| {
                let len = rng.range_inclusive(1, 9);
                RepeatExample::new(random_tokens(&mut rng, 30, len))
            })
            .collect();
        let bytes = encode_corpus(&seqs).unwrap();
        prop_assert_eq!(decode_corpus(&bytes, std::path::Path::new("mem")).unwrap(), seqs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_roundtrip_is_bit_identical(seed in any::<u64>(), hidden in 1usize..24) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = GruParams::<f32>::init(hidden, 30, &mut Rng::new(seed));
        let cfg = TrainConfig { hidden, seed, ..TrainConfig::desk() };
        let meta = CheckpointMeta::new(&TaskConfig::desk(), &cfg, 3);
        save_checkpoint(&path, &p, &meta).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (q, m) = load_checkpoint(&path).unwrap();
        prop_assert_eq!(&q, &p);
        prop_assert_eq!(m, meta.clone());
        save_checkpoint(&path, &q, &meta).unwrap();
        prop_assert_eq!(&std::fs::read(&path).unwrap(), &bytes);
        // Truncation anywhere is rejected.
        let cut = (seed as usize) % bytes.len();
        std::fs::write(&path, &bytes[..cut]).unwrap();
        prop_assert!(load_checkpoint(&path).is_err());
    }
}
