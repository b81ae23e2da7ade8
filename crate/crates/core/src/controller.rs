//! MLP policy controller.
//!
//! The body is an ordinary [`Mlp`] fed a constant all-ones vector. Its output
//! vector of length `S * |N|` is read example-major: row `i` of the reshaped
//! `(S, |N|)` matrix holds the logits of example `i` over the kNN options.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mixing::MixPolicy;
use crate::neighbors::KnnOptions;
use crate::nn::{Gradients, Mlp};

pub const FIXED_INPUT_LEN: usize = 16;
pub const DEFAULT_HIDDEN: [usize; 4] = [100, 100, 100, 100];

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerNet {
    body: Mlp,
    examples: usize,
    options: KnnOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub policy: MixPolicy,
    /// Joint log-probability (sum over examples).
    pub log_prob: f64,
    /// Joint entropy of the distribution the sample was drawn from.
    pub entropy: f64,
    pub per_example_log_prob: Vec<f64>,
}

impl ControllerNet {
    /// Hidden layers use the usual seeded init; the output layer starts at
    /// zero so the initial policy is uniform over the options.
    pub fn new(examples: usize, options: KnnOptions, hidden: &[usize], seed: u64) -> Result<Self> {
        if examples == 0 {
            return Err(Error::input("controller needs at least one example"));
        }
        let mut body = Mlp::new(FIXED_INPUT_LEN, hidden, examples * options.len(), false, seed)?;
        let last = body.layers_mut().last_mut().expect("at least one layer");
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        Ok(Self {
            body,
            examples,
            options,
        })
    }

    pub fn from_body(body: Mlp, examples: usize, options: KnnOptions) -> Result<Self> {
        if body.input_dim() != FIXED_INPUT_LEN {
            return Err(Error::input(format!(
                "controller body must take {FIXED_INPUT_LEN} inputs, got {}",
                body.input_dim()
            )));
        }
        if body.output_dim() != examples * options.len() {
            return Err(Error::input(format!(
                "controller body outputs {} values, expected {} x {}",
                body.output_dim(),
                examples,
                options.len()
            )));
        }
        Ok(Self {
            body,
            examples,
            options,
        })
    }

    pub fn body(&self) -> &Mlp {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut Mlp {
        &mut self.body
    }

    pub fn examples(&self) -> usize {
        self.examples
    }

    pub fn options(&self) -> &KnnOptions {
        &self.options
    }

    fn fixed_input() -> Array2<f64> {
        Array2::ones((1, FIXED_INPUT_LEN))
    }

    /// `(S, |N|)` logits from one forward pass.
    pub fn policy_logits(&self) -> Array2<f64> {
        let out = self.body.forward(&Self::fixed_input()).expect("fixed input matches body");
        out.into_shape_with_order((self.examples, self.options.len()))
            .expect("output reshapes example-major")
    }

    pub fn probabilities(&self) -> Array2<f64> {
        softmax_rows(&self.policy_logits())
    }

    pub fn sample_policy(&self, seed: u64) -> PolicySample {
        let logits = self.policy_logits();
        let probs = softmax_rows(&logits);
        let log_probs = log_softmax_rows(&logits);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut choice = Vec::with_capacity(self.examples);
        let mut per_example = Vec::with_capacity(self.examples);
        for (i, row) in probs.outer_iter().enumerate() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = row.len() - 1;
            for (o, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = o;
                    break;
                }
            }
            choice.push(pick);
            per_example.push(log_probs[[i, pick]]);
        }
        PolicySample {
            policy: MixPolicy::new(choice, self.options.clone()).expect("choices in range"),
            log_prob: per_example.iter().sum(),
            entropy: entropy_rows(&probs, &log_probs).iter().sum(),
            per_example_log_prob: per_example,
        }
    }

    fn check_policy(&self, policy: &MixPolicy) -> Result<()> {
        if policy.len() != self.examples || policy.options() != &self.options {
            return Err(Error::input("policy does not match this controller"));
        }
        Ok(())
    }

    pub fn log_prob_of(&self, policy: &MixPolicy) -> Result<f64> {
        self.check_policy(policy)?;
        let lp = log_softmax_rows(&self.policy_logits());
        Ok(policy.choices().iter().enumerate().map(|(i, &c)| lp[[i, c]]).sum())
    }

    /// Sum of per-example entropies.
    pub fn entropy(&self) -> f64 {
        let logits = self.policy_logits();
        entropy_rows(&softmax_rows(&logits), &log_softmax_rows(&logits)).iter().sum()
    }

    /// Most probable option per example; ties go to the smaller k.
    pub fn mode_policy(&self) -> MixPolicy {
        let logits = self.policy_logits();
        let choice = logits
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (o, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = o;
                    }
                }
                best
            })
            .collect();
        MixPolicy::new(choice, self.options.clone()).expect("choices in range")
    }

    /// Probability of each example's chosen option under the current net.
    pub fn chosen_probabilities(&self, policy: &MixPolicy) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let p = self.probabilities();
        Ok(policy.choices().iter().enumerate().map(|(i, &c)| p[[i, c]]).collect())
    }

    /// Backpropagates a gradient with respect to the `(S, |N|)` logits into
    /// body parameter gradients.
    pub fn backprop_logits(&self, d_logits: &Array2<f64>) -> Gradients {
        let input = Self::fixed_input();
        let (_, caches) = self.body.forward_cached(&input, 0, self.body.layer_count());
        let d_out = d_logits
            .clone()
            .into_shape_with_order((1, self.examples * self.options.len()))
            .expect("logit gradient shape");
        let mut grads = self.body.zero_grads();
        self.body.backward_range(0, &caches, &d_out, &mut grads);
        grads
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn entropy_rows(probs: &Array2<f64>, log_probs: &Array2<f64>) -> Vec<f64> {
    (probs * log_probs).sum_axis(Axis(1)).iter().map(|v| -v).collect()
}

/// d(joint log-prob of `choices`) / d(logits) = onehot - p, row by row.
pub fn log_prob_logit_grad(probs: &Array2<f64>, choices: &[usize]) -> Array2<f64> {
    let mut g = -probs.clone();
    for (i, &c) in choices.iter().enumerate() {
        g[[i, c]] += 1.0;
    }
    g
}

/// d(sum of row entropies) / d(logits) = -p (log p + H_row).
pub fn entropy_logit_grad(probs: &Array2<f64>, log_probs: &Array2<f64>) -> Array2<f64> {
    let h = entropy_rows(probs, log_probs);
    let mut g = Array2::zeros(probs.raw_dim());
    for i in 0..probs.nrows() {
        for o in 0..probs.ncols() {
            g[[i, o]] = -probs[[i, o]] * (log_probs[[i, o]] + h[i]);
        }
    }
    g
}
