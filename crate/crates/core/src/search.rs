//! Policy search: sample kNN mixing policies from the controller, score each
//! one by training a fresh regression model on `D ∪ Mix(D, P)`, turn inverse
//! validation losses into baselined rewards, and update the controller with
//! a clipped-surrogate PPO step.
//!
//! Evaluations inside one iteration run on a rayon pool. Rewards and the
//! moving-average baseline are then computed sequentially in sample order, so
//! results never depend on the number of workers.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{entropy_logit_grad, log_prob_logit_grad, log_softmax_rows, softmax_rows, ControllerNet, PolicySample, DEFAULT_HIDDEN};
use crate::data::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::mixing::{mix_with_policy, MixConfig, MixPolicy};
use crate::neighbors::{KnnIndex, KnnOptions};
use crate::nn::{mse_loss, Adam, ModelSpec, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Policies sampled (and models trained) per iteration.
    pub samples_per_iter: usize,
    pub max_iters: usize,
    /// Stop after this many consecutive iterations without a relative
    /// improvement of more than `min_rel_improvement` in the best loss.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub entropy_weight: f64,
    pub baseline_weight: f64,
    pub controller_lr: f64,
    pub controller_hidden: Vec<usize>,
    pub reward_floor: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            samples_per_iter: 20,
            max_iters: 100,
            patience: 10,
            min_rel_improvement: 0.001,
            clip_eps: 0.2,
            ppo_epochs: 4,
            entropy_weight: 0.01,
            baseline_weight: 0.95,
            controller_lr: 2e-4,
            controller_hidden: DEFAULT_HIDDEN.to_vec(),
            reward_floor: 1e-8,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(Error::Config {
                field: format!("search.{field}"),
                message: msg.to_string(),
            })
        };
        if self.samples_per_iter == 0 {
            return bad("samples_per_iter", "must be >= 1");
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be >= 1");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps", "must lie in (0, 1)");
        }
        if !(self.baseline_weight > 0.0 && self.baseline_weight < 1.0) {
            return bad("baseline_weight", "must lie in (0, 1)");
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return bad("entropy_weight", "must be finite and >= 0");
        }
        if !(self.controller_lr > 0.0 && self.controller_lr.is_finite()) {
            return bad("controller_lr", "must be positive");
        }
        if !(self.reward_floor > 0.0) {
            return bad("reward_floor", "must be positive");
        }
        if self.ppo_epochs == 0 {
            return bad("ppo_epochs", "must be >= 1");
        }
        Ok(())
    }
}

/// Everything needed to score one sampled policy.
#[derive(Clone, Copy)]
pub struct EvalTask<'a> {
    pub policy: &'a MixPolicy,
    pub seed: u64,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub index: &'a KnnIndex,
    pub mix: &'a MixConfig,
    pub model: &'a ModelSpec,
}

/// Trains a fresh model on `D ∪ Mix(D, P)` and returns it.
pub fn train_on_policy(task: &EvalTask<'_>) -> Result<Mlp> {
    let aug = mix_with_policy(task.train, task.index, task.policy, task.mix, derive_seed(task.seed, &[2]))?;
    let data = aug.union_with(task.train)?;
    let mut model = task.model.build(data.dim(), data.label_dim(), task.seed)?;
    model.train(
        &data.features,
        &data.labels,
        &task.model.train_config(derive_seed(task.seed, &[1])),
    )?;
    Ok(model)
}

/// Mean validation MSE of a model trained on the policy's augmented set.
/// Diverged training scores `+inf`.
pub fn evaluate_policy(task: &EvalTask<'_>) -> Result<f64> {
    match train_on_policy(task) {
        Ok(model) => mse_loss(&model.forward(&task.val.features)?, &task.val.labels),
        Err(Error::Diverged { step, loss }) => {
            log::warn!("policy evaluation diverged at step {step} (loss {loss}); scoring +inf");
            Ok(f64::INFINITY)
        }
        Err(e) => Err(e),
    }
}

/// `1 / max(loss, floor) - baseline`
pub fn reward(loss: f64, baseline: f64, floor: f64) -> f64 {
    1.0 / loss.max(floor) - baseline
}

/// `w * baseline + (1 - w) / max(loss, floor)`
pub fn update_baseline(baseline: f64, loss: f64, weight: f64, floor: f64) -> f64 {
    weight * baseline + (1.0 - weight) * (1.0 / loss.max(floor))
}

/// Per-entry clipped surrogate `min(ρ Â, clip(ρ, 1-ε, 1+ε) Â)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub sample: PolicySample,
    pub loss: f64,
    /// Baselined reward, used directly as the advantage.
    pub reward: f64,
}

/// PPO objective over the trajectory and its gradient with respect to the
/// controller logits:
/// `mean_t min(ρ_t Â_t, clip(ρ_t) Â_t) + entropy_weight * H`.
pub fn ppo_objective(
    controller: &ControllerNet,
    trajectory: &[TrajectoryEntry],
    clip_eps: f64,
    entropy_weight: f64,
) -> (f64, Array2<f64>) {
    let logits = controller.policy_logits();
    let probs = softmax_rows(&logits);
    let log_probs = log_softmax_rows(&logits);
    let t = trajectory.len() as f64;
    let mut objective = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for entry in trajectory {
        let choices = entry.sample.policy.choices();
        let new_lp: f64 = choices.iter().enumerate().map(|(i, &c)| log_probs[[i, c]]).sum();
        let ratio = (new_lp - entry.sample.log_prob).exp();
        let adv = entry.reward;
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        objective += unclipped.min(clipped) / t;
        // the clipped branch is constant in θ
        if unclipped <= clipped {
            grad.scaled_add(adv * ratio / t, &log_prob_logit_grad(&probs, choices));
        }
    }
    let entropy: f64 = -(&probs * &log_probs).sum();
    objective += entropy_weight * entropy;
    grad.scaled_add(entropy_weight, &entropy_logit_grad(&probs, &log_probs));
    (objective, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub max_reward: f64,
    pub mean_loss: f64,
    pub min_loss: f64,
    pub baseline: f64,
    pub entropy: f64,
}

pub struct SearchState {
    pub controller: ControllerNet,
    pub baseline: f64,
    pub trajectory: Vec<TrajectoryEntry>,
    pub losses: Vec<f64>,
    pub reward_trace: Vec<IterationStats>,
    pub best: Option<(MixPolicy, f64)>,
    optimizer: Adam,
}

impl SearchState {
    pub fn new(controller: ControllerNet, lr: f64) -> Self {
        let optimizer = Adam::for_model(lr, controller.body());
        Self {
            controller,
            baseline: 0.0,
            trajectory: Vec::new(),
            losses: Vec::new(),
            reward_trace: Vec::new(),
            best: None,
            optimizer,
        }
    }

    /// Turns the collected losses into rewards, in sample order, advancing the
    /// baseline after each one.
    pub fn record(&mut self, samples: Vec<PolicySample>, losses: Vec<f64>, cfg: &SearchConfig) {
        self.trajectory.clear();
        self.losses.clear();
        for (sample, loss) in samples.into_iter().zip(losses) {
            let r = reward(loss, self.baseline, cfg.reward_floor);
            self.baseline = update_baseline(self.baseline, loss, cfg.baseline_weight, cfg.reward_floor);
            if self.best.as_ref().is_none_or(|(_, b)| loss < *b) {
                self.best = Some((sample.policy.clone(), loss));
            }
            self.losses.push(loss);
            self.trajectory.push(TrajectoryEntry {
                sample,
                loss,
                reward: r,
            });
        }
    }
}

/// `ppo_epochs` ascent steps on the clipped surrogate, then clears τ and s.
/// A non-finite objective rolls the controller back to its state before the
/// update.
pub fn ppo_update(state: &mut SearchState, cfg: &SearchConfig) -> Result<()> {
    if state.trajectory.is_empty() {
        return Err(Error::input("PPO update needs a nonempty trajectory"));
    }
    let saved = (state.controller.clone(), state.optimizer.clone());
    for epoch in 0..cfg.ppo_epochs {
        let (objective, d_logits) = ppo_objective(&state.controller, &state.trajectory, cfg.clip_eps, cfg.entropy_weight);
        if !objective.is_finite() || d_logits.iter().any(|v| !v.is_finite()) {
            log::warn!("non-finite PPO objective at epoch {epoch}; restoring controller");
            (state.controller, state.optimizer) = saved;
            break;
        }
        let mut grads = state.controller.backprop_logits(&d_logits);
        // Adam descends; we ascend the objective
        grads.scale(-1.0);
        state.optimizer.step(state.controller.body_mut().params_mut(), &grads.tensors());
    }
    state.trajectory.clear();
    state.losses.clear();
    Ok(())
}

pub struct SearchOutcome {
    /// Most probable option per example under the final controller.
    pub policy: MixPolicy,
    /// Validation loss of `policy`, re-scored with a fresh model.
    pub validation_loss: f64,
    /// Lowest-loss policy sampled during the search, re-scored the same way.
    pub best_sample: MixPolicy,
    pub best_sample_loss: f64,
    pub reward_trace: Vec<IterationStats>,
    pub controller: ControllerNet,
    pub iterations: usize,
    pub seconds: f64,
}

/// Runs the whole search on standardized `train`/`val`.
///
/// `workers == 0` uses rayon's default pool size.
pub fn run_search(
    train: &Dataset,
    val: &Dataset,
    options: &KnnOptions,
    model: &ModelSpec,
    mix: &MixConfig,
    cfg: &SearchConfig,
    workers: usize,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    model.validate()?;
    mix.validate()?;
    options.check_cap(train.len())?;
    if val.is_empty() {
        return Err(Error::input("policy search needs a nonempty validation set"));
    }
    let started = Instant::now();
    let index = KnnIndex::build(train)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::input(format!("cannot build worker pool: {e}")))?;

    let controller = ControllerNet::new(train.len(), options.clone(), &cfg.controller_hidden, derive_seed(cfg.seed, &[0]))?;
    let mut state = SearchState::new(controller, cfg.controller_lr);
    let mut best_seen = f64::INFINITY;
    let mut stale = 0;
    let mut iterations = 0;

    for it in 0..cfg.max_iters {
        iterations = it + 1;
        let samples: Vec<PolicySample> = (0..cfg.samples_per_iter)
            .map(|t| state.controller.sample_policy(derive_seed(cfg.seed, &[1, it as u64, t as u64])))
            .collect();
        let model_seeds: Vec<u64> = (0..cfg.samples_per_iter)
            .map(|t| derive_seed(cfg.seed, &[2, it as u64, t as u64]))
            .collect();
        let losses: Vec<f64> = pool.install(|| {
            samples
                .par_iter()
                .zip(model_seeds.par_iter())
                .map(|(s, &seed)| {
                    evaluate_policy(&EvalTask {
                        policy: &s.policy,
                        seed,
                        train,
                        val,
                        index: &index,
                        mix,
                        model,
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })?;

        let entropy = state.controller.entropy();
        state.record(samples, losses, cfg);
        let rewards: Vec<f64> = state.trajectory.iter().map(|e| e.reward).collect();
        let finite: Vec<f64> = state.losses.iter().copied().filter(|l| l.is_finite()).collect();
        state.reward_trace.push(IterationStats {
            iteration: it,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            max_reward: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_loss: if finite.is_empty() {
                f64::INFINITY
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            },
            min_loss: state.losses.iter().copied().fold(f64::INFINITY, f64::min),
            baseline: state.baseline,
            entropy,
        });
        ppo_update(&mut state, cfg)?;

        let best_now = state.best.as_ref().map_or(f64::INFINITY, |(_, l)| *l);
        if best_now < best_seen * (1.0 - cfg.min_rel_improvement) {
            stale = 0;
        } else {
            stale += 1;
        }
        best_seen = best_seen.min(best_now);
        log::info!(
            "search iter {it}: mean loss {:.6}, best {:.6}, baseline {:.4}, entropy {:.3}",
            state.reward_trace[it].mean_loss,
            best_seen,
            state.baseline,
            entropy
        );
        if cfg.patience > 0 && stale >= cfg.patience {
            break;
        }
    }

    let (best_sample, _) = state.best.clone().expect("at least one iteration ran");
    let mode_policy = state.controller.mode_policy();
    let final_seed = derive_seed(cfg.seed, &[3]);
    let score = |p: &MixPolicy| {
        evaluate_policy(&EvalTask {
            policy: p,
            seed: final_seed,
            train,
            val,
            index: &index,
            mix,
            model,
        })
    };
    let (mode_loss, best_sample_loss) = pool.install(|| rayon::join(|| score(&mode_policy), || score(&best_sample)));
    Ok(SearchOutcome {
        policy: mode_policy,
        validation_loss: mode_loss?,
        best_sample,
        best_sample_loss: best_sample_loss?,
        reward_trace: state.reward_trace,
        controller: state.controller,
        iterations,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Reward-trace CSV: iteration, mean/max reward, mean/min loss, baseline, entropy.
pub fn write_reward_trace(trace: &[IterationStats], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        assert_eq!(reward(0.5, 0.0, 1e-8), 2.0);
        assert!((reward(0.5, 0.1, 1e-8) - 1.9).abs() < 1e-15);
        assert_eq!(reward(0.0, 0.25, 1e-8), 1e8 - 0.25);
        assert_eq!(reward(f64::INFINITY, 0.5, 1e-8), -0.5);
    }

    #[test]
    fn baseline_examples() {
        assert!((update_baseline(0.0, 1.0, 0.95, 1e-8) - 0.05).abs() < 1e-15);
        assert!((update_baseline(1.0, 0.5, 0.95, 1e-8) - 1.05).abs() < 1e-15);
    }

    #[test]
    fn surrogate_clipping() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_surrogate(1.1, 2.0, 0.2), 2.2);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let bad = SearchConfig {
            clip_eps: 1.0,
            ..SearchConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let bad = SearchConfig {
            samples_per_iter: 0,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_trajectory_is_rejected() {
        let opts = KnnOptions::new(vec![0, 1]).unwrap();
        let c = ControllerNet::new(2, opts, &[4], 0).unwrap();
        let mut st = SearchState::new(c, 1e-3);
        assert!(ppo_update(&mut st, &SearchConfig::default()).is_err());
    }
}
