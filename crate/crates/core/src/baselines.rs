//! Comparison methods: no augmentation, Original Mixup, Manifold Mixup,
//! a single tuned global k, MixR with a searched policy, and MixR mixing at
//! hidden layers.
//!
//! Every method reports test metrics over [`FINAL_SEEDS`] seeded trainings.
//! Training seed `s` is shared across methods so runs can be compared pairwise.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{mean_std, metrics, Metrics};
use crate::data::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::mixing::{mix_with_policy, original_mixup, LambdaMode, LambdaSampler, MixConfig, MixPolicy};
use crate::neighbors::{KnnIndex, KnnOptions};
use crate::nn::{mse_loss, BatchAugmenter, BatchPlan, HiddenMix, ModelSpec, Mlp, NoAugment};

pub const FINAL_SEEDS: usize = 5;

fn default_alpha() -> f64 {
    1.0
}

fn default_budget() -> usize {
    12
}

fn default_eligible() -> Vec<usize> {
    vec![0, 1, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    None {},
    OriginalMixup {
        #[serde(default = "default_alpha")]
        alpha: f64,
        /// Synthetic pairs added to the training set; defaults to the
        /// training-set size.
        #[serde(default)]
        pairs: Option<usize>,
    },
    ManifoldMixup {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_eligible")]
        eligible_layers: Vec<usize>,
    },
    GlobalKnn {
        /// Number of distinct k values the tuner may try.
        #[serde(default = "default_budget")]
        budget: usize,
    },
    Mixr {},
    MixrManifold {
        #[serde(default = "default_eligible")]
        eligible_layers: Vec<usize>,
    },
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::None {} => "none",
            MethodSpec::OriginalMixup { .. } => "original_mixup",
            MethodSpec::ManifoldMixup { .. } => "manifold_mixup",
            MethodSpec::GlobalKnn { .. } => "global_knn",
            MethodSpec::Mixr {} => "mixr",
            MethodSpec::MixrManifold { .. } => "mixr_manifold",
        }
    }

    pub fn needs_policy(&self) -> bool {
        matches!(self, MethodSpec::Mixr {} | MethodSpec::MixrManifold { .. })
    }

    pub fn validate(&self, layer_count: usize) -> Result<()> {
        let check_layers = |layers: &[usize]| {
            if layers.is_empty() {
                return Err(Error::input("eligible_layers must be nonempty"));
            }
            match layers.iter().find(|&&l| l >= layer_count) {
                Some(l) => Err(Error::input(format!(
                    "eligible layer {l} out of range for a model with {layer_count} layers"
                ))),
                None => Ok(()),
            }
        };
        let check_alpha = |a: f64| {
            if a > 0.0 && a.is_finite() {
                Ok(())
            } else {
                Err(Error::input(format!("alpha must be positive, got {a}")))
            }
        };
        match self {
            MethodSpec::None {} | MethodSpec::Mixr {} => Ok(()),
            MethodSpec::OriginalMixup { alpha, pairs } => {
                if *pairs == Some(0) {
                    return Err(Error::input("original_mixup pairs must be >= 1"));
                }
                check_alpha(*alpha)
            }
            MethodSpec::ManifoldMixup { alpha, eligible_layers } => {
                check_alpha(*alpha)?;
                check_layers(eligible_layers)
            }
            MethodSpec::GlobalKnn { budget } => {
                if *budget < 3 {
                    return Err(Error::input("global_knn budget must cover at least 3 values of k"));
                }
                Ok(())
            }
            MethodSpec::MixrManifold { eligible_layers } => check_layers(eligible_layers),
        }
    }
}

/// Shared inputs for the final trainings of every method.
pub struct MethodContext<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
    pub model: &'a ModelSpec,
    pub mix: &'a MixConfig,
    /// Required by `mixr` and `mixr_manifold`.
    pub policy: Option<&'a MixPolicy>,
    pub seeds: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalKnnResult {
    pub best_k: usize,
    /// `(k, mean validation loss)` in the order tried.
    pub tried: Vec<(usize, f64)>,
    pub seeds_per_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub spec: MethodSpec,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Metrics>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_knn: Option<GlobalKnnResult>,
}

/// Final-training seeds, identical for every method.
pub fn training_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|s| derive_seed(seed, &[s])).collect()
}

/// Test metrics in original label units when the test set carries label
/// standardization statistics.
pub fn test_metrics(model: &Mlp, test: &Dataset) -> Result<Metrics> {
    let pred = model.forward(&test.features)?;
    match &test.standardization {
        Some(st) if st.label_stats.is_some() => metrics(&st.inverse_labels(&test.labels), &st.inverse_labels(&pred)),
        _ => metrics(&test.labels, &pred),
    }
}

fn train_model(data: &Dataset, spec: &ModelSpec, seed: u64, augmenter: &mut dyn BatchAugmenter) -> Result<Mlp> {
    let mut model = spec.build(data.dim(), data.label_dim(), seed)?;
    model.train_with(&data.features, &data.labels, &spec.train_config(derive_seed(seed, &[1])), augmenter)?;
    Ok(model)
}

/// Policy with the single option set `{0, k}` choosing `k` everywhere.
pub fn constant_k_policy(len: usize, k: usize) -> Result<MixPolicy> {
    if k == 0 {
        return MixPolicy::constant(len, 0, KnnOptions::new(vec![0])?);
    }
    MixPolicy::constant(len, 1, KnnOptions::new(vec![0, k])?)
}

fn global_k_grid(s: usize, coarse: usize) -> Vec<usize> {
    let max_k = s - 1;
    let mut ks = vec![0];
    if max_k >= 1 && coarse > 1 {
        let steps = coarse - 1;
        for i in 0..steps {
            let t = if steps == 1 { 1.0 } else { i as f64 / (steps - 1) as f64 };
            ks.push((max_k as f64).powf(t).round() as usize);
        }
    }
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// Two-stage search for one k shared by all examples: a log-spaced grid over
/// `[0, S-1]`, then a linear walk around the best with step `max(1, best/8)`.
/// A budget of at least `S` tries every k.
pub fn tune_global_knn(
    train: &Dataset,
    val: &Dataset,
    model: &ModelSpec,
    mix: &MixConfig,
    budget: usize,
    seed: u64,
) -> Result<GlobalKnnResult> {
    const SEEDS_PER_K: usize = 3;
    if budget < 3 {
        return Err(Error::input("global kNN tuner needs a budget of at least 3"));
    }
    let s = train.len();
    let index = KnnIndex::build(train)?;
    let score = |k: usize| -> Result<f64> {
        let policy = constant_k_policy(s, k)?;
        let losses = (0..SEEDS_PER_K as u64)
            .into_par_iter()
            .map(|r| {
                let ms = derive_seed(seed, &[k as u64, r]);
                let aug = mix_with_policy(train, &index, &policy, mix, derive_seed(ms, &[2]))?;
                let model = match train_model(&aug.union_with(train)?, model, ms, &mut NoAugment) {
                    Ok(m) => m,
                    Err(Error::Diverged { .. }) => return Ok(f64::INFINITY),
                    Err(e) => return Err(e),
                };
                mse_loss(&model.forward(&val.features)?, &val.labels)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    };

    let mut tried: Vec<(usize, f64)> = Vec::new();
    let coarse = if budget >= s { s } else { budget.div_ceil(2).max(2) };
    let grid: Vec<usize> = if budget >= s { (0..s).collect() } else { global_k_grid(s, coarse) };
    for k in grid {
        tried.push((k, score(k)?));
    }
    let best_of = |t: &[(usize, f64)]| {
        t.iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("grid is nonempty")
    };
    let (center, _) = best_of(&tried);
    let step = (center / 8).max(1);
    let mut m = 1;
    while tried.len() < budget && m * step < s {
        for k in [center.checked_sub(m * step), Some(center + m * step)].into_iter().flatten() {
            if k < s && tried.len() < budget && !tried.iter().any(|&(t, _)| t == k) {
                tried.push((k, score(k)?));
            }
        }
        m += 1;
    }
    Ok(GlobalKnnResult {
        best_k: best_of(&tried).0,
        tried,
        seeds_per_k: SEEDS_PER_K,
    })
}

/// Manifold Mixup: per batch, a uniform-random eligible layer and one λ;
/// rows are paired with a shuffled copy of the batch.
pub struct ManifoldMixup {
    eligible: Vec<usize>,
    sampler: LambdaSampler,
    rng: ChaCha8Rng,
    /// How often each eligible layer was picked, in `eligible` order.
    pub layer_counts: Vec<usize>,
}

impl ManifoldMixup {
    pub fn new(eligible: Vec<usize>, lambda: LambdaMode, seed: u64) -> Result<Self> {
        if eligible.is_empty() {
            return Err(Error::input("eligible_layers must be nonempty"));
        }
        Ok(Self {
            layer_counts: vec![0; eligible.len()],
            eligible,
            sampler: LambdaSampler::new(lambda)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl BatchAugmenter for ManifoldMixup {
    fn plan(&mut self, batch: &[usize]) -> Result<BatchPlan> {
        let pick = self.rng.random_range(0..self.eligible.len());
        self.layer_counts[pick] += 1;
        let lambda = self.sampler.draw(&mut self.rng);
        let mut partner: Vec<usize> = (0..batch.len()).collect();
        partner.shuffle(&mut self.rng);
        Ok(BatchPlan {
            rows: batch.to_vec(),
            mix: Some(HiddenMix {
                split_layer: self.eligible[pick],
                pairs: partner.into_iter().enumerate().map(|(a, b)| (a, b, lambda)).collect(),
            }),
        })
    }
}

/// MixR at a hidden layer: each batch example with `k_i > 0` is mixed
/// (λ = 0.5) with one neighbor drawn uniformly from its `k_i` nearest. The
/// neighbor joins the forward pass if it is not already in the batch.
/// Original rows are kept alongside the mixes.
pub struct MixrManifold<'a> {
    policy: &'a MixPolicy,
    index: &'a KnnIndex,
    eligible: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> MixrManifold<'a> {
    pub fn new(policy: &'a MixPolicy, index: &'a KnnIndex, eligible: Vec<usize>, seed: u64) -> Result<Self> {
        if policy.len() != index.len() {
            return Err(Error::input(format!(
                "policy covers {} examples but the training set has {}",
                policy.len(),
                index.len()
            )));
        }
        if eligible.is_empty() {
            return Err(Error::input("eligible_layers must be nonempty"));
        }
        Ok(Self {
            policy,
            index,
            eligible,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl BatchAugmenter for MixrManifold<'_> {
    fn plan(&mut self, batch: &[usize]) -> Result<BatchPlan> {
        let layer = self.eligible[self.rng.random_range(0..self.eligible.len())];
        let mut rows = batch.to_vec();
        let mut pairs: Vec<(usize, usize, f64)> = (0..batch.len()).map(|p| (p, p, 1.0)).collect();
        for (p, &i) in batch.iter().enumerate() {
            let k = self.policy.k(i);
            if k == 0 {
                continue;
            }
            let j = self.index.knn(i, k)?[self.rng.random_range(0..k)];
            let q = match rows.iter().position(|&r| r == j) {
                Some(q) => q,
                None => {
                    rows.push(j);
                    rows.len() - 1
                }
            };
            pairs.push((p, q, 0.5));
        }
        if pairs.len() == batch.len() {
            return Ok(BatchPlan { rows, mix: None });
        }
        Ok(BatchPlan {
            rows,
            mix: Some(HiddenMix {
                split_layer: layer,
                pairs,
            }),
        })
    }
}

/// Trains and scores one method over `ctx.seeds` seeds.
pub fn run_method(spec: &MethodSpec, ctx: &MethodContext<'_>) -> Result<MethodOutcome> {
    let started = Instant::now();
    spec.validate(ctx.model.hidden.len() + 1)?;
    ctx.model.validate()?;
    if ctx.seeds == 0 {
        return Err(Error::input("at least one training seed is required"));
    }
    let policy = if spec.needs_policy() {
        let p = ctx
            .policy
            .ok_or_else(|| Error::input(format!("method {} needs a searched policy", spec.name())))?;
        if p.len() != ctx.train.len() {
            return Err(Error::input(format!(
                "policy covers {} examples but the training set has {}",
                p.len(),
                ctx.train.len()
            )));
        }
        Some(p)
    } else {
        None
    };
    let index = KnnIndex::build(ctx.train)?;
    let global_knn = match spec {
        MethodSpec::GlobalKnn { budget } => Some(tune_global_knn(
            ctx.train,
            ctx.val,
            ctx.model,
            ctx.mix,
            *budget,
            derive_seed(ctx.seed, &[u64::MAX]),
        )?),
        _ => None,
    };
    let seeds = training_seeds(ctx.seed, ctx.seeds);
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let aug_seed = derive_seed(seed, &[2]);
            let model = match spec {
                MethodSpec::None {} => train_model(ctx.train, ctx.model, seed, &mut NoAugment)?,
                MethodSpec::OriginalMixup { alpha, pairs } => {
                    let aug = original_mixup(ctx.train, pairs.unwrap_or(ctx.train.len()), *alpha, aug_seed)?;
                    train_model(&aug.union_with(ctx.train)?, ctx.model, seed, &mut NoAugment)?
                }
                MethodSpec::ManifoldMixup { alpha, eligible_layers } => {
                    let mut aug = ManifoldMixup::new(eligible_layers.clone(), LambdaMode::Beta(*alpha), aug_seed)?;
                    train_model(ctx.train, ctx.model, seed, &mut aug)?
                }
                MethodSpec::GlobalKnn { .. } => {
                    let k = global_knn.as_ref().expect("tuned above").best_k;
                    let aug = mix_with_policy(ctx.train, &index, &constant_k_policy(ctx.train.len(), k)?, ctx.mix, aug_seed)?;
                    train_model(&aug.union_with(ctx.train)?, ctx.model, seed, &mut NoAugment)?
                }
                MethodSpec::Mixr {} => {
                    let aug = mix_with_policy(ctx.train, &index, policy.expect("checked above"), ctx.mix, aug_seed)?;
                    train_model(&aug.union_with(ctx.train)?, ctx.model, seed, &mut NoAugment)?
                }
                MethodSpec::MixrManifold { eligible_layers } => {
                    let mut aug = MixrManifold::new(policy.expect("checked above"), &index, eligible_layers.clone(), aug_seed)?;
                    train_model(ctx.train, ctx.model, seed, &mut aug)?
                }
            };
            test_metrics(&model, ctx.test)
        })
        .collect::<Result<Vec<Metrics>>>()?;
    let (rmse_mean, rmse_std) = mean_std(&per_seed.iter().map(|m| m.rmse).collect::<Vec<_>>());
    let (r2_mean, r2_std) = mean_std(&per_seed.iter().map(|m| m.r2).collect::<Vec<_>>());
    Ok(MethodOutcome {
        method: spec.name().to_string(),
        spec: spec.clone(),
        seeds,
        per_seed,
        rmse_mean,
        rmse_std,
        r2_mean,
        r2_std,
        seconds: started.elapsed().as_secs_f64(),
        global_knn,
    })
}
