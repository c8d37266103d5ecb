mod common;

use common::random_tensor;
use hlfusion_core::model::{param_count, FusionModel, ModelConfig};
use hlfusion_core::tape::OpKind;
use hlfusion_core::Tape;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(n_stacks: usize, embed_dim: usize) -> ModelConfig {
    ModelConfig {
        n_stacks,
        embed_dim,
        patch_size: 5,
        hsi_channels: 6,
        lidar_channels: 1,
        n_classes: 3,
        dropout_rate: 0.5,
        ..ModelConfig::default()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn stacks_preserve_patch_geometry() {
    for nx in 1..=6 {
        let cfg = small(nx, 4);
        let model = FusionModel::new(cfg.clone()).unwrap();
        let mut r = rng(nx as u64);
        let (h, l) = (random_tensor(&mut r, &[5, 5, 6]), random_tensor(&mut r, &[5, 5, 1]));
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &h, &l, false, &mut r).unwrap();
        assert_eq!(trace.stacks.len(), nx);
        for s in &trace.stacks {
            assert_eq!(tape.shape(s.hsi), [5, 5, 4]);
            assert_eq!(tape.shape(s.lidar), [5, 5, 4]);
            assert_eq!(tape.shape(s.attention[0]), [25, 25]);
        }
        assert_eq!(tape.shape(trace.features), [2 * nx * 4]);
        assert_eq!(tape.shape(trace.probs), [3]);
    }
}

#[test]
fn full_size_feature_length_is_1024() {
    let cfg = ModelConfig {
        patch_size: 3,
        hsi_channels: 2,
        n_classes: 2,
        ..ModelConfig::default()
    };
    assert_eq!((cfg.n_stacks, cfg.embed_dim), (4, 128));
    assert_eq!(cfg.feature_len(), 1024);
    let model = FusionModel::new(cfg).unwrap();
    let mut r = rng(0);
    let (h, l) = (random_tensor(&mut r, &[3, 3, 2]), random_tensor(&mut r, &[3, 3, 1]));
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &h, &l, false, &mut r).unwrap();
    assert_eq!(tape.shape(trace.features), [1024]);
}

#[test]
fn each_stream_depends_on_the_other_modality() {
    let model = FusionModel::new(small(1, 4)).unwrap();
    let mut r = rng(3);
    let (h, l) = (random_tensor(&mut r, &[5, 5, 6]), random_tensor(&mut r, &[5, 5, 1]));
    let (h2, l2) = (random_tensor(&mut r, &[5, 5, 6]), random_tensor(&mut r, &[5, 5, 1]));
    let outputs = |h, l| {
        let mut tape = Tape::new();
        let t = model.forward(&mut tape, h, l, false, &mut rng(0)).unwrap();
        let s = t.stacks[0];
        (tape.value(s.hsi).to_vec(), tape.value(s.lidar).to_vec())
    };
    let (base_h, base_l) = outputs(&h, &l);
    let (h_after_lidar, _) = outputs(&h, &l2);
    let (_, l_after_hsi) = outputs(&h2, &l);
    assert_ne!(base_h, h_after_lidar, "HSI output must change with LiDAR input");
    assert_ne!(base_l, l_after_hsi, "LiDAR output must change with HSI input");
}

#[test]
fn param_count_matches_allocation_for_random_configs() {
    let mut r = rng(11);
    for _ in 0..3 {
        let cfg = ModelConfig {
            n_stacks: r.gen_range(1..5),
            embed_dim: r.gen_range(1..24),
            patch_size: 2 * r.gen_range(1..4) + 1,
            hsi_channels: r.gen_range(1..20),
            lidar_channels: r.gen_range(1..3),
            n_classes: r.gen_range(2..12),
            ..ModelConfig::default()
        };
        let model = FusionModel::new(cfg.clone()).unwrap();
        assert_eq!(model.params().numel(), param_count(&cfg), "{cfg:?}");
    }
}

#[test]
fn one_more_stack_adds_two_d_input_streams_and_head_width() {
    let (d, k) = (6, 3);
    let stream = 3 * (9 * d * d + 3 * d) + 2 * d;
    for nx in 1..5 {
        let (a, b) = (small(nx, d), small(nx + 1, d));
        assert_eq!(param_count(&b) - param_count(&a), 2 * stream + 2 * d * k);
    }
}

#[test]
fn doubling_classes_only_grows_the_head() {
    let a = small(2, 5);
    let b = ModelConfig { n_classes: 6, ..a.clone() };
    assert_eq!(param_count(&b) - param_count(&a), a.feature_len() * 3 + 3);
}

#[test]
fn attention_rows_sum_to_one_and_layer_norm_is_standardized() {
    let cfg = ModelConfig { ln_eps: 1e-10, ..small(3, 8) };
    let model = FusionModel::new(cfg).unwrap();
    let mut r = rng(5);
    let (h, l) = (random_tensor(&mut r, &[5, 5, 6]), random_tensor(&mut r, &[5, 5, 1]));
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &h, &l, true, &mut r).unwrap();
    for s in &trace.stacks {
        for &a in &s.attention {
            for row in tape.value(a).chunks(25) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            }
        }
    }
    let mut seen = 0;
    for v in tape.vars().filter(|&v| tape.kind(v) == OpKind::LayerNorm) {
        let c = *tape.shape(v).last().unwrap();
        for row in tape.value(v).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6, "variance {var}");
        }
        seen += 1;
    }
    // three filter blocks and one CrossOut per stream per stack
    assert_eq!(seen, 3 * 2 * 4);
}

#[test]
fn inference_is_deterministic_and_training_mode_uses_dropout() {
    let model = FusionModel::new(small(2, 4)).unwrap();
    let mut r = rng(8);
    let (h, l) = (random_tensor(&mut r, &[5, 5, 6]), random_tensor(&mut r, &[5, 5, 1]));
    assert_eq!(model.predict(&h, &l).unwrap(), model.predict(&h, &l).unwrap());
    let mut tape = Tape::new();
    let trained = model.forward(&mut tape, &h, &l, true, &mut rng(1)).unwrap();
    assert!(tape.vars().any(|v| tape.kind(v) == OpKind::Dropout));
    assert_ne!(tape.value(trained.probs), model.predict(&h, &l).unwrap());
}

#[test]
fn wrong_patch_shapes_are_rejected() {
    let model = FusionModel::new(small(1, 4)).unwrap();
    let mut r = rng(0);
    let good_l = random_tensor(&mut r, &[5, 5, 1]);
    assert!(model.predict(&random_tensor(&mut r, &[5, 5, 5]), &good_l).is_err());
    assert!(model.predict(&random_tensor(&mut r, &[7, 7, 6]), &good_l).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn probabilities_form_a_distribution(nx in 1usize..4, d in 1usize..6, seed in any::<u64>()) {
        let cfg = ModelConfig { seed, ..small(nx, d) };
        let model = FusionModel::new(cfg).unwrap();
        let mut r = rng(seed);
        let (h, l) = (random_tensor(&mut r, &[5, 5, 6]), random_tensor(&mut r, &[5, 5, 1]));
        let p = model.predict(&h, &l).unwrap();
        prop_assert_eq!(p.len(), 3);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn same_seed_same_model(seed in any::<u64>()) {
        let cfg = ModelConfig { seed, ..small(2, 3) };
        prop_assert_eq!(FusionModel::new(cfg.clone()).unwrap(), FusionModel::new(cfg).unwrap());
    }
}
