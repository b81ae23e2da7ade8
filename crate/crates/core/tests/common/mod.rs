#![allow(dead_code)]

use mixr::controller::{log_prob_logit_grad, softmax_rows, ControllerNet};
use mixr::mixing::MixPolicy;
use mixr::neighbors::KnnOptions;
use mixr::nn::{mse_loss, BatchPlan, Gradients, HiddenMix, Mlp};
use mixr::search::{ppo_objective, TrajectoryEntry};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries that are zero
/// up to rounding from dominating.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Central differences of `f` over every parameter of the model exposed by
/// `params`, compared entry by entry with `analytic`. Returns the worst
/// relative error.
pub fn fd_max_rel_err<M: Clone>(
    model: &M,
    analytic: &Gradients,
    params: impl Fn(&mut M) -> Vec<&mut [f64]>,
    f: impl Fn(&M) -> f64,
) -> f64 {
    let tensors = analytic.tensors();
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let shapes: Vec<usize> = params(&mut probe).iter().map(|t| t.len()).collect();
    assert_eq!(shapes, tensors.iter().map(|t| t.len()).collect::<Vec<_>>());
    for (t, &len) in shapes.iter().enumerate() {
        for j in 0..len {
            let orig = params(&mut probe)[t][j];
            params(&mut probe)[t][j] = orig + FD_STEP;
            let up = f(&probe);
            params(&mut probe)[t][j] = orig - FD_STEP;
            let down = f(&probe);
            params(&mut probe)[t][j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(tensors[t][j], numeric));
        }
    }
    worst
}

fn mlp_params(m: &mut Mlp) -> Vec<&mut [f64]> {
    m.params_mut()
}

/// Network parameter gradients of the MSE loss.
pub fn check_network(hidden: &[usize], layer_norm: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Mlp::new(4, hidden, 2, layer_norm, seed).unwrap();
    let x = random_matrix(7, 4, &mut rng);
    let y = random_matrix(7, 2, &mut rng);
    let (_, grads) = model.loss_and_grads(&x, &y).unwrap();
    fd_max_rel_err(&model, &grads, mlp_params, |m| mse_loss(&m.forward(&x).unwrap(), &y).unwrap())
}

/// Gradient with respect to the network input, as returned by the backward pass.
pub fn check_input_gradient(hidden: &[usize], layer_norm: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Mlp::new(3, hidden, 2, layer_norm, seed).unwrap();
    let x = random_matrix(5, 3, &mut rng);
    let y = random_matrix(5, 2, &mut rng);
    let n = model.layer_count();
    let (pred, caches) = model.forward_cached(&x, 0, n);
    let d_out = (&pred - &y) * (2.0 / pred.len() as f64);
    let mut g = model.zero_grads();
    let d_x = model.backward_range(0, &caches, &d_out, &mut g);
    let mut worst = 0.0f64;
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut xp = x.clone();
            xp[[i, j]] += FD_STEP;
            let mut xm = x.clone();
            xm[[i, j]] -= FD_STEP;
            let up = mse_loss(&model.forward(&xp).unwrap(), &y).unwrap();
            let down = mse_loss(&model.forward(&xm).unwrap(), &y).unwrap();
            worst = worst.max(rel_err(d_x[[i, j]], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// MSE gradient with respect to predictions, through an identity head with
/// unit weights and zero bias.
pub fn check_mse(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Mlp::new(3, &[], 3, false, seed).unwrap();
    model.layers_mut()[0].weights = Array2::eye(3);
    model.layers_mut()[0].bias.fill(0.0);
    let x = random_matrix(6, 3, &mut rng);
    let y = random_matrix(6, 3, &mut rng);
    let (pred, caches) = model.forward_cached(&x, 0, 1);
    let d_pred = (&pred - &y) * (2.0 / pred.len() as f64);
    let mut g = model.zero_grads();
    model.backward_range(0, &caches, &d_pred, &mut g);
    let mut worst = 0.0f64;
    for i in 0..6 {
        for j in 0..3 {
            let mut p = pred.clone();
            p[[i, j]] += FD_STEP;
            let up = mse_loss(&p, &y).unwrap();
            p[[i, j]] -= 2.0 * FD_STEP;
            let down = mse_loss(&p, &y).unwrap();
            worst = worst.max(rel_err(d_pred[[i, j]], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst.max(fd_max_rel_err(&model, &g, mlp_params, |m| mse_loss(&m.forward(&x).unwrap(), &y).unwrap()))
}

/// Parameter gradients of a minibatch that mixes hidden rows at `split_layer`.
pub fn check_hidden_mix(split_layer: usize, layer_norm: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Mlp::new(3, &[6, 5], 2, layer_norm, seed).unwrap();
    let x = random_matrix(6, 3, &mut rng);
    let y = random_matrix(6, 2, &mut rng);
    let pairs: Vec<(usize, usize, f64)> = (0..6).map(|r| (r, (r + 1 + r % 3) % 6, rng.random_range(0.1..0.9))).collect();
    let plan = BatchPlan {
        rows: (0..6).collect(),
        mix: Some(HiddenMix {
            split_layer,
            pairs: pairs.clone(),
        }),
    };
    let (_, grads) = model.plan_loss_and_grads(&x, &y, &plan).unwrap();
    fd_max_rel_err(&model, &grads, mlp_params, |m| {
        let (h, resume) = m.forward_split(&x, split_layer).unwrap();
        let hm = mixr::nn::mix_rows(&h, &pairs);
        let ym = mixr::nn::mix_rows(&y, &pairs);
        mse_loss(&m.forward_resume(&resume, &hm).unwrap(), &ym).unwrap()
    })
}

fn random_controller(seed: u64) -> ControllerNet {
    let mut c = ControllerNet::new(5, KnnOptions::new(vec![0, 1, 2, 4]).unwrap(), &[6, 6], seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for p in c.body_mut().params_mut() {
        p.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    c
}

fn controller_params(c: &mut ControllerNet) -> Vec<&mut [f64]> {
    c.body_mut().params_mut()
}

/// Joint log-probability of a fixed policy, through the controller body.
pub fn check_controller_log_prob(seed: u64) -> f64 {
    let c = random_controller(seed);
    let policy: MixPolicy = c.sample_policy(seed).policy;
    let probs = softmax_rows(&c.policy_logits());
    let grads = c.backprop_logits(&log_prob_logit_grad(&probs, policy.choices()));
    fd_max_rel_err(&c, &grads, controller_params, |m| m.log_prob_of(&policy).unwrap())
}

/// PPO objective at the sampling parameters (every ratio is exactly 1).
pub fn check_ppo_at_unit_ratio(entropy_weight: f64, seed: u64) -> f64 {
    let c = random_controller(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj: Vec<TrajectoryEntry> = (0..6)
        .map(|t| TrajectoryEntry {
            sample: c.sample_policy(seed * 100 + t),
            loss: 1.0,
            reward: rng.random_range(-2.0..2.0),
        })
        .collect();
    let (_, d_logits) = ppo_objective(&c, &traj, 0.2, entropy_weight);
    let grads = c.backprop_logits(&d_logits);
    fd_max_rel_err(&c, &grads, controller_params, |m| ppo_objective(m, &traj, 0.2, entropy_weight).0)
}

/// Every gradient check with its worst relative error over a few seeds.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let worst = |f: &dyn Fn(u64) -> f64| (0..3).map(f).fold(0.0f64, f64::max);
    vec![
        ("dense", worst(&|s| check_network(&[], false, s))),
        ("relu", worst(&|s| check_network(&[5, 4], false, s))),
        ("layer_norm", worst(&|s| check_network(&[5, 4], true, s))),
        ("input", worst(&|s| check_input_gradient(&[5], true, s))),
        ("mse", worst(&check_mse)),
        ("hidden_mix_input", worst(&|s| check_hidden_mix(0, false, s))),
        ("hidden_mix_layer1", worst(&|s| check_hidden_mix(1, false, s))),
        ("hidden_mix_layer2_ln", worst(&|s| check_hidden_mix(2, true, s))),
        ("controller_log_prob", worst(&check_controller_log_prob)),
        ("ppo_unit_ratio", worst(&|s| check_ppo_at_unit_ratio(0.01, s))),
        ("ppo_entropy", worst(&|s| check_ppo_at_unit_ratio(0.5, s))),
    ]
}

/// Regression model used for every planted-dataset experiment.
pub fn planted_model() -> mixr::nn::ModelSpec {
    mixr::nn::ModelSpec {
        hidden: vec![16, 16],
        layer_norm: false,
        batch_size: 8,
        epochs: 300,
        lr: 0.01,
    }
}

/// Standardized train / validation / test splits of the planted dataset.
pub fn planted_splits(seed: u64) -> (mixr::data::Dataset, mixr::data::Dataset, mixr::data::Dataset) {
    let d = mixr::data::generate_synthetic(&mixr::data::SyntheticSpec::planted(seed)).unwrap();
    let st = mixr::data::Standardizer::fit(&d.train, true).unwrap();
    (st.apply(&d.train).unwrap(), st.apply(&d.val).unwrap(), st.apply(&d.test).unwrap())
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
