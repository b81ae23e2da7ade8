//! Model-training behaviour against closed-form or brute-force expectations.

mod common;

use common::{median, planted_model, planted_splits};
use mixr::baselines::{constant_k_policy, run_method, tune_global_knn, MethodContext, MethodSpec, FINAL_SEEDS};
use mixr::data::{generate_synthetic, Dataset, Standardizer, SyntheticKind, SyntheticSpec};
use mixr::mixing::{MixConfig, MixPolicy};
use mixr::neighbors::{KnnIndex, KnnOptions};
use mixr::nn::{Mlp, ModelSpec, TrainConfig};
use mixr::search::{evaluate_policy, EvalTask};
use ndarray::Array2;

#[test]
fn linear_layer_recovers_least_squares_slope() {
    let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64 / 10.0 - 1.0);
    let y = &x * 2.0;
    let mut model = Mlp::new(1, &[], 1, false, 3).unwrap();
    let cfg = TrainConfig {
        batch_size: 20,
        epochs: 3000,
        lr: 0.02,
        shuffle_seed: 0,
    };
    model.train(&x, &y, &cfg).unwrap();
    let w = model.layers()[0].weights[[0, 0]];
    assert!((w - 2.0).abs() < 1e-3, "w = {w}");
}

#[test]
fn training_is_bitwise_deterministic() {
    let (train, _, _) = planted_splits(1);
    let spec = ModelSpec {
        epochs: 20,
        ..planted_model()
    };
    let run = || {
        let mut m = spec.build(1, 1, 42).unwrap();
        m.train(&train.features, &train.labels, &spec.train_config(7)).unwrap();
        m
    };
    assert_eq!(run(), run());
}

fn linear_data() -> (Dataset, Dataset, Dataset) {
    let spec = SyntheticSpec {
        generator: SyntheticKind::Polynomial {
            n_train: 64,
            dim: 2,
            degree: 1,
            outputs: 1,
        },
        n_val: 50,
        n_test: 50,
        noise: 0.0,
        seed: 4,
    };
    let d = generate_synthetic(&spec).unwrap();
    let st = Standardizer::fit(&d.train, true).unwrap();
    (st.apply(&d.train).unwrap(), st.apply(&d.val).unwrap(), st.apply(&d.test).unwrap())
}

fn linear_model() -> ModelSpec {
    ModelSpec {
        hidden: vec![16],
        layer_norm: false,
        batch_size: 16,
        epochs: 300,
        lr: 0.01,
    }
}

#[test]
fn zero_policy_on_linear_data_fits_well() {
    let (train, val, _) = linear_data();
    let index = KnnIndex::build(&train).unwrap();
    let policy = constant_k_policy(train.len(), 0).unwrap();
    let loss = evaluate_policy(&EvalTask {
        policy: &policy,
        seed: 1,
        train: &train,
        val: &val,
        index: &index,
        mix: &MixConfig::default(),
        model: &linear_model(),
    })
    .unwrap();
    assert!(loss < 1e-3, "loss {loss}");
}

#[test]
fn no_augmentation_on_linear_data_explains_variance() {
    let (train, val, test) = linear_data();
    let model = linear_model();
    let ctx = MethodContext {
        train: &train,
        val: &val,
        test: &test,
        model: &model,
        mix: &MixConfig::default(),
        policy: None,
        seeds: FINAL_SEEDS,
        seed: 0,
    };
    let out = run_method(&MethodSpec::None {}, &ctx).unwrap();
    assert_eq!(out.per_seed.len(), 5);
    assert_eq!(out.seeds.len(), 5);
    assert!(out.r2_mean > 0.99, "R2 {}", out.r2_mean);
}

#[test]
fn mixing_across_the_discontinuity_hurts() {
    let opts = KnnOptions::new(vec![0, 16]).unwrap();
    let mut zero = Vec::new();
    let mut far = Vec::new();
    for seed in 0..5 {
        let (train, val, _) = planted_splits(seed);
        let index = KnnIndex::build(&train).unwrap();
        for (choice, out) in [(0, &mut zero), (1, &mut far)] {
            let policy = MixPolicy::constant(train.len(), choice, opts.clone()).unwrap();
            out.push(
                evaluate_policy(&EvalTask {
                    policy: &policy,
                    seed,
                    train: &train,
                    val: &val,
                    index: &index,
                    mix: &MixConfig::default(),
                    model: &planted_model(),
                })
                .unwrap(),
            );
        }
    }
    assert!(median(far.clone()) > median(zero.clone()), "k=16 {far:?} vs k=0 {zero:?}");
}

#[test]
fn global_knn_matches_mixr_with_the_same_constant_policy() {
    let (train, val, test) = planted_splits(2);
    let model = ModelSpec {
        epochs: 30,
        ..planted_model()
    };
    let k = tune_global_knn(&train, &val, &model, &MixConfig::default(), 4, 9).unwrap().best_k;
    let policy = constant_k_policy(train.len(), k).unwrap();
    let ctx = MethodContext {
        train: &train,
        val: &val,
        test: &test,
        model: &model,
        mix: &MixConfig::default(),
        policy: Some(&policy),
        seeds: 3,
        seed: 5,
    };
    let g = run_method(&MethodSpec::GlobalKnn { budget: 4 }, &ctx).unwrap();
    assert_eq!(g.global_knn.as_ref().unwrap().best_k, k);
    let m = run_method(&MethodSpec::Mixr {}, &ctx).unwrap();
    assert_eq!(g.per_seed, m.per_seed);
}

#[test]
fn global_knn_on_planted_data_picks_a_block_sized_k() {
    let (train, val, _) = planted_splits(0);
    let res = tune_global_knn(&train, &val, &planted_model(), &MixConfig::default(), 12, 1).unwrap();
    assert!((2..=8).contains(&res.best_k), "{res:?}");
}
