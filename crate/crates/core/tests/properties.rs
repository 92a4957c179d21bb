use moda_core::harness::{Checkpoint, RunConfig};
use moda_core::synth::{counterfactual_pair, gen_sample, oracle_answer, read_split, write_split, TaskSpec};
use moda_core::tensor::CosineSchedule;
use proptest::prelude::*;

fn spec(noise_std: f64, code_seed: u64) -> TaskSpec {
    TaskSpec {
        noise_std,
        code_seed,
        ..TaskSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_bytes_round_trip(
        tensors in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 1..20), 1..6),
        meta in prop::collection::vec(any::<u64>(), 1..4),
    ) {
        let mut ck = Checkpoint::default();
        for (i, t) in tensors.iter().enumerate() {
            ck.push_f64(format!("p{i}"), &[t.len()], t.clone());
        }
        ck.push_u64("meta.x", meta);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn any_flipped_bit_is_rejected(len in 1usize..16, pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut ck = Checkpoint::default();
        ck.push_f64("w", &[len], (0..len).map(|i| i as f64 * 0.5).collect());
        let mut bytes = ck.to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn schedule_stays_in_range_and_is_unimodal(lr in 1e-6f64..1.0, frac in 0.0f64..0.5, total in 1u64..500) {
        let s = CosineSchedule::new(lr, frac, total).unwrap();
        let xs: Vec<f64> = (0..=total).map(|t| s.lr_at(t)).collect();
        prop_assert!(xs.iter().all(|&x| (0.0..=lr).contains(&x)));
        let w = s.warmup_steps as usize;
        prop_assert!(xs[..=w.min(total as usize)].windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(xs[w..].windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn noiseless_oracle_matches_label(seed in any::<u64>(), id in 0u64..1_000_000, code_seed in 0u64..8) {
        let spec = spec(0.0, code_seed);
        let s = gen_sample(&spec, &spec.codes(), seed, id);
        prop_assert_eq!(oracle_answer(&s, &spec).unwrap(), s.answer_id);
        prop_assert_eq!(&s, &gen_sample(&spec, &spec.codes(), seed, id));
    }

    #[test]
    fn counterfactual_shares_image(seed in any::<u64>(), id in 0u64..1000) {
        let spec = spec(0.1, 0);
        let s = gen_sample(&spec, &spec.codes(), seed, id);
        let (a, b) = counterfactual_pair(&s, &spec).unwrap();
        prop_assert_eq!(&a.image_feats, &b.image_feats);
        prop_assert_eq!(a.token, b.token);
        prop_assert_ne!(a.group, b.group);
        prop_assert_eq!(b.answer_id, spec.vocab().value(b.value(&spec)));
    }

    #[test]
    fn split_file_round_trip(seed in any::<u64>(), n in 0usize..5) {
        let spec = spec(0.1, 0);
        let codes = spec.codes();
        let samples: Vec<_> = (0..n as u64).map(|i| gen_sample(&spec, &codes, seed, i)).collect();
        let mut buf = Vec::new();
        write_split(&mut buf, &spec, seed, &samples).unwrap();
        let (spec2, seed2, back) = read_split(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(spec2, spec);
        prop_assert_eq!(seed2, seed);
        prop_assert_eq!(back, samples);
    }

    #[test]
    fn config_json_round_trip(seed in any::<u64>(), lr in 1e-7f64..1.0, steps in 1u64..100_000) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.stage2.base_lr = lr;
        cfg.stage1.total_steps = steps;
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back.config_hash(), cfg.config_hash());
        prop_assert_eq!(back.to_json(), cfg.to_json());
    }
}
