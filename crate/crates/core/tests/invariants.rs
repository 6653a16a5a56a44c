use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metalink::autodiff::ParamVector;
use metalink::channel::convolve;
use metalink::harness::{
    evaluate_bler, read_results, write_results, BlerRecord, ExperimentConfig, Scheme, TrainedSystem,
};
use metalink::link::EncoderModel;
use metalink::training::{enter_test_phase, message_schedule, FeedbackPacket, TrainConfig, Trainer, TrainingMode};

fn small_train() -> TrainConfig {
    TrainConfig {
        k: 2,
        n: 2,
        taps: 2,
        frame_len: 8,
        adapt_blocks: 2,
        frames: 200,
        kappa: 0.05,
        eta: 0.5,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn agree(cfg: &ExperimentConfig, system: &TrainedSystem) {
    let a = evaluate_bler(cfg, system, 2, 1000).unwrap();
    let b = evaluate_bler(cfg, system, 2, 2000).unwrap();
    let combined = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
    assert!(
        (a.bler - b.bler).abs() <= 3.0 * combined,
        "{} vs {} (3 s.e. {})",
        a.bler,
        b.bler,
        3.0 * combined
    );
}

#[test]
fn frozen_models_agree_across_seed_sets() {
    let mut cfg = ExperimentConfig::new(Scheme::HybridMeta);
    cfg.train = small_train();
    cfg.test.payload_blocks = 4000;
    cfg.test.test_frames = 200;
    let mut trainer = Trainer::new(&cfg.train, TrainingMode::Meta).unwrap();
    trainer.run(200).unwrap();
    agree(&cfg, &TrainedSystem::from_trainer(Scheme::HybridMeta, &trainer));

    let mut classic = ExperimentConfig::new(Scheme::BpskMlMmse);
    classic.train.k = 4;
    classic.train.n = 4;
    classic.train.taps = 2;
    classic.train.es_n0_db = 4.0;
    classic.test = cfg.test.clone();
    agree(&classic, &TrainedSystem::untrained(Scheme::BpskMlMmse, &classic.train));
}

#[test]
fn feedback_cannot_be_built_while_testing() {
    assert!(FeedbackPacket::new(0, vec![0.1; 4], 4).is_ok());
    {
        let _guard = enter_test_phase();
        assert!(FeedbackPacket::new(0, vec![0.1; 4], 4).is_err());
    }
    assert!(FeedbackPacket::new(0, vec![0.1; 4], 4).is_ok());
}

fn scheme() -> impl Strategy<Value = Scheme> {
    prop::sample::select(Scheme::ALL.to_vec())
}

fn record() -> impl Strategy<Value = BlerRecord> {
    (scheme(), 0usize..64, 0.0f64..=1.0, 0u64..100_000, any::<u64>(), 0.0f64..=1.0, 0.0f64..1.0).prop_map(
        |(scheme, pilots, rho, train_frames, run_seed, bler, std)| BlerRecord {
            scheme,
            pilots,
            rho,
            train_frames,
            run_seed,
            bler,
            std,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoder_power_is_exact(k in 1u32..4, n in 1usize..5, es in 0.1f64..4.0, seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderModel::new(k, n, es, 0.1, &mut rng).unwrap();
        let mut p: ParamVector = enc.params().clone();
        for v in p.values_mut() {
            *v *= scale;
        }
        let enc = enc.with_params(p).unwrap();
        for x in enc.codebook().unwrap() {
            let power = x.iter().map(|s| s.norm_sqr()).sum::<f64>() / n as f64;
            prop_assert!((power - es).abs() <= 1e-9 * es.max(1.0));
        }
    }

    #[test]
    fn convolution_is_linear(
        h in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..4),
        a in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..6),
        c in -3.0f64..3.0,
    ) {
        let h: Vec<Complex64> = h.into_iter().map(|(r, i)| Complex64::new(r, i)).collect();
        let a: Vec<Complex64> = a.into_iter().map(|(r, i)| Complex64::new(r, i)).collect();
        let b: Vec<Complex64> = a.iter().rev().cloned().collect();
        let sum: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x * c + y).collect();
        let lhs = convolve(&h, &sum);
        let ya = convolve(&h, &a);
        let yb = convolve(&h, &b);
        prop_assert_eq!(lhs.len(), h.len() + a.len() - 1);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (ya[i] * c + yb[i])).norm() <= 1e-9);
        }
    }

    #[test]
    fn schedules_cover_messages(k in 1u32..6, frames in 1usize..4, seed in any::<u64>()) {
        let card = 1usize << k;
        let len = card * frames;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = message_schedule(card, card, &mut rng);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..card).collect::<Vec<_>>());
        let s = message_schedule(card, len + 1, &mut rng);
        prop_assert_eq!(s.len(), len + 1);
        prop_assert!(s.iter().all(|&m| m < card));
    }

    #[test]
    fn results_round_trip(rows in prop::collection::vec(record(), 0..12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_results(&path, &rows).unwrap();
        let back = read_results(&path).unwrap();
        prop_assert_eq!(back, rows);
    }
}
