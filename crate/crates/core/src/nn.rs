//! Dense MLP engine with exact backpropagation.
//!
//! Everything here is `f64` and single-threaded per model. A network is a
//! chain of [`DenseLayer`]s, each computing `act(norm(x W^T + b))` where the
//! optional layer norm sits between the affine map and the activation.
//!
//! Weights are stored `(out_dim, in_dim)`; batches are `(rows, features)`.
//!
//! Training goes through [`Mlp::train_with`], which accepts a
//! [`BatchAugmenter`] so that hidden-layer mixing (Manifold Mixup and its
//! kNN-restricted variant) can reuse the same loop and the same backward pass.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }
}

/// Normalizes `x` to zero mean and unit (population) variance, then applies
/// `gain * x_hat + shift`.
pub fn layer_norm(x: &[f64], gain: &[f64], shift: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::input("layer_norm needs at least two features"));
    }
    if gain.len() != x.len() || shift.len() != x.len() {
        return Err(Error::input(format!(
            "layer_norm parameter length mismatch: x={}, gain={}, shift={}",
            x.len(),
            gain.len(),
            shift.len()
        )));
    }
    let mut out = x.to_vec();
    let mut x_hat = vec![0.0; x.len()];
    norm_row(&mut out, &mut x_hat, gain, shift);
    Ok(out)
}

/// In-place layer norm of one row. Writes the normalized pre-gain values to
/// `x_hat` and returns `1/sqrt(var + eps)`.
fn norm_row(row: &mut [f64], x_hat: &mut [f64], gain: &[f64], shift: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (k, v) in row.iter_mut().enumerate() {
        let h = (*v - mean) * inv_std;
        x_hat[k] = h;
        *v = gain[k] * h + shift[k];
    }
    inv_std
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `(out_dim, in_dim)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub layer_norm: Option<LayerNormParams>,
}

/// Intermediate values kept by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    input: Array2<f64>,
    /// Normalized pre-gain values and per-row inverse std, when layer norm is on.
    norm: Option<(Array2<f64>, Array1<f64>)>,
    /// Values fed into the activation.
    pre_activation: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gain: Option<Array1<f64>>,
    pub shift: Option<Array1<f64>>,
}

impl DenseLayer {
    pub fn new_seeded<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-limit..=limit));
        Self {
            weights,
            bias: Array1::zeros(out_dim),
            activation,
            layer_norm: layer_norm.then(|| LayerNormParams::identity(out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn check_shapes(&self) -> Result<()> {
        if self.bias.len() != self.out_dim() {
            return Err(Error::input(format!(
                "bias length {} does not match out_dim {}",
                self.bias.len(),
                self.out_dim()
            )));
        }
        if let Some(ln) = &self.layer_norm {
            if ln.gain.len() != self.out_dim() || ln.shift.len() != self.out_dim() {
                return Err(Error::input("layer norm parameters do not match out_dim"));
            }
            if self.out_dim() < 2 {
                return Err(Error::input("layer norm requires out_dim >= 2"));
            }
        }
        Ok(())
    }

    fn forward_inner(&self, x: &Array2<f64>, keep: bool) -> (Array2<f64>, Option<LayerCache>) {
        let mut z = matmul(&x.view(), &self.weights.t());
        z += &self.bias;
        let norm = match &self.layer_norm {
            Some(ln) => {
                let gain = ln.gain.as_slice().expect("contiguous gain");
                let shift = ln.shift.as_slice().expect("contiguous shift");
                let mut x_hat = Array2::zeros(z.raw_dim());
                let mut inv = Array1::zeros(z.nrows());
                for ((mut row, mut hat), inv_std) in z
                    .outer_iter_mut()
                    .zip(x_hat.outer_iter_mut())
                    .zip(inv.iter_mut())
                {
                    *inv_std = norm_row(
                        row.as_slice_mut().expect("row-major"),
                        hat.as_slice_mut().expect("row-major"),
                        gain,
                        shift,
                    );
                }
                Some((x_hat, inv))
            }
            None => None,
        };
        let act = self.activation;
        let out = z.mapv(|v| act.apply(v));
        let cache = keep.then(|| LayerCache {
            input: x.clone(),
            norm,
            pre_activation: z,
        });
        (out, cache)
    }

    fn backward(&self, cache: &LayerCache, d_out: &Array2<f64>, grads: &mut LayerGrads) -> Array2<f64> {
        // through activation
        let mut d_pre = d_out.clone();
        if self.activation == Activation::Relu {
            Zip::from(&mut d_pre)
                .and(&cache.pre_activation)
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
        }
        // through layer norm
        let d_z = match (&self.layer_norm, &cache.norm) {
            (Some(ln), Some((x_hat, inv))) => {
                let n = self.out_dim() as f64;
                let g_gain = grads.gain.as_mut().expect("gain grads");
                let g_shift = grads.shift.as_mut().expect("shift grads");
                *g_gain += &(&d_pre * x_hat).sum_axis(Axis(0));
                *g_shift += &d_pre.sum_axis(Axis(0));
                let mut d_z = Array2::zeros(d_pre.raw_dim());
                for (r, mut out_row) in d_z.outer_iter_mut().enumerate() {
                    let dy = d_pre.row(r);
                    let hat = x_hat.row(r);
                    let d_hat: Vec<f64> = dy.iter().zip(ln.gain.iter()).map(|(a, g)| a * g).collect();
                    let sum_d: f64 = d_hat.iter().sum();
                    let sum_dh: f64 = d_hat.iter().zip(hat.iter()).map(|(a, h)| a * h).sum();
                    let scale = inv[r] / n;
                    for k in 0..d_hat.len() {
                        out_row[k] = scale * (n * d_hat[k] - sum_d - hat[k] * sum_dh);
                    }
                }
                d_z
            }
            _ => d_pre,
        };
        grads.weights += &matmul(&d_z.t(), &cache.input.view());
        grads.bias += &d_z.sum_axis(Axis(0));
        matmul(&d_z.view(), &self.weights.view())
    }

    fn zero_grads(&self) -> LayerGrads {
        LayerGrads {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            gain: self.layer_norm.as_ref().map(|ln| Array1::zeros(ln.gain.len())),
            shift: self.layer_norm.as_ref().map(|ln| Array1::zeros(ln.shift.len())),
        }
    }
}

/// Gradients for every layer of an [`Mlp`], same layout as its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<LayerGrads>);

impl Gradients {
    /// Flat views in the same order as [`Mlp::params_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.0 {
            out.push(g.weights.as_slice().expect("contiguous"));
            out.push(g.bias.as_slice().expect("contiguous"));
            if let (Some(gain), Some(shift)) = (&g.gain, &g.shift) {
                out.push(gain.as_slice().expect("contiguous"));
                out.push(shift.as_slice().expect("contiguous"));
            }
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.0 {
            g.weights *= factor;
            g.bias *= factor;
            if let Some(v) = g.gain.as_mut() {
                *v *= factor;
            }
            if let Some(v) = g.shift.as_mut() {
                *v *= factor;
            }
        }
    }
}

/// Continuation point returned by [`Mlp::forward_split`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resume {
    split_layer: usize,
}

impl Resume {
    pub fn split_layer(&self) -> usize {
        self.split_layer
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub shuffle_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::input("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::input("epochs must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::input(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Architecture and training schedule of a regression model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub layer_norm: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, output_dim: usize, seed: u64) -> Result<Mlp> {
        Mlp::new(input_dim, &self.hidden, output_dim, self.layer_norm, seed)
    }

    pub fn train_config(&self, shuffle_seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            shuffle_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(0).validate()?;
        if self.hidden.contains(&0) {
            return Err(Error::input("hidden widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mixing of hidden representations inside one minibatch.
///
/// Each entry of `pairs` is `(a, b, lambda)` indexing the plan's rows; it
/// produces one output row `lambda * h[a] + (1 - lambda) * h[b]` at the input
/// of layer `split_layer`, with the targets mixed the same way.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenMix {
    pub split_layer: usize,
    pub pairs: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    /// Dataset rows fed through the network.
    pub rows: Vec<usize>,
    pub mix: Option<HiddenMix>,
}

/// Decides what each training minibatch looks like.
pub trait BatchAugmenter {
    fn plan(&mut self, batch: &[usize]) -> Result<BatchPlan>;
}

/// Plain minibatch training.
pub struct NoAugment;

impl BatchAugmenter for NoAugment {
    fn plan(&mut self, batch: &[usize]) -> Result<BatchPlan> {
        Ok(BatchPlan {
            rows: batch.to_vec(),
            mix: None,
        })
    }
}

impl Mlp {
    /// ReLU hidden layers (optionally layer-normalized) and an identity output layer.
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, layer_norm: bool, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::input("layer widths must be positive"));
        }
        if layer_norm && hidden.contains(&1) {
            return Err(Error::input("layer norm needs hidden widths >= 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &width in hidden {
            layers.push(DenseLayer::new_seeded(prev, width, Activation::Relu, layer_norm, &mut rng));
            prev = width;
        }
        layers.push(DenseLayer::new_seeded(prev, output_dim, Activation::Identity, false, &mut rng));
        Ok(Self { layers, seed })
    }

    pub fn from_layers(layers: Vec<DenseLayer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::input("a network needs at least one layer"));
        }
        for l in &layers {
            l.check_shapes()?;
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::input(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, seed })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weights.len() + l.bias.len() + l.layer_norm.as_ref().map_or(0, |ln| ln.gain.len() + ln.shift.len())
            })
            .sum()
    }

    fn check_input(&self, batch: &Array2<f64>, layer: usize) -> Result<()> {
        let expected = self.layers[layer].in_dim();
        if batch.ncols() != expected {
            return Err(Error::input(format!(
                "batch has {} columns, layer {} expects {}",
                batch.ncols(),
                layer,
                expected
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(batch, 0)?;
        Ok(self.run_layers(batch, 0, self.layers.len()))
    }

    fn run_layers(&self, batch: &Array2<f64>, from: usize, to: usize) -> Array2<f64> {
        let mut h = batch.clone();
        for layer in &self.layers[from..to] {
            h = layer.forward_inner(&h, false).0;
        }
        h
    }

    /// Runs the first `split_layer` layers. `split_layer == 0` returns the input.
    pub fn forward_split(&self, batch: &Array2<f64>, split_layer: usize) -> Result<(Array2<f64>, Resume)> {
        if split_layer >= self.layers.len() {
            return Err(Error::input(format!(
                "split layer {} out of range for a {}-layer network",
                split_layer,
                self.layers.len()
            )));
        }
        self.check_input(batch, 0)?;
        Ok((self.run_layers(batch, 0, split_layer), Resume { split_layer }))
    }

    pub fn forward_resume(&self, resume: &Resume, hidden: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(hidden, resume.split_layer)?;
        Ok(self.run_layers(hidden, resume.split_layer, self.layers.len()))
    }

    /// Forward over layers `from..to`, keeping caches for [`Mlp::backward_range`].
    pub fn forward_cached(&self, batch: &Array2<f64>, from: usize, to: usize) -> (Array2<f64>, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(to - from);
        let mut h = batch.clone();
        for layer in &self.layers[from..to] {
            let (out, cache) = layer.forward_inner(&h, true);
            caches.push(cache.expect("cache requested"));
            h = out;
        }
        (h, caches)
    }

    /// Accumulates parameter gradients for layers `from..from + caches.len()`
    /// and returns the gradient with respect to that range's input.
    pub fn backward_range(
        &self,
        from: usize,
        caches: &[LayerCache],
        d_out: &Array2<f64>,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let mut d = d_out.clone();
        for (offset, cache) in caches.iter().enumerate().rev() {
            let idx = from + offset;
            d = self.layers[idx].backward(cache, &d, &mut grads.0[idx]);
        }
        d
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.layers.iter().map(DenseLayer::zero_grads).collect())
    }

    /// Mutable flat parameter views: per layer weights, bias, then gain/shift if present.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("contiguous"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
            if let Some(ln) = l.layer_norm.as_mut() {
                out.push(ln.gain.as_slice_mut().expect("contiguous"));
                out.push(ln.shift.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    pub fn params_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite())
                && l.layer_norm
                    .as_ref()
                    .is_none_or(|ln| ln.gain.iter().chain(ln.shift.iter()).all(|v| v.is_finite()))
        })
    }

    /// MSE gradient of the network on `(x, y)`; returns the loss too.
    pub fn loss_and_grads(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Gradients)> {
        self.check_input(x, 0)?;
        let (pred, caches) = self.forward_cached(x, 0, self.layers.len());
        let loss = mse_loss(&pred, y)?;
        let d_out = mse_grad(&pred, y);
        let mut grads = self.zero_grads();
        self.backward_range(0, &caches, &d_out, &mut grads);
        Ok((loss, grads))
    }

    pub fn train(&mut self, x: &Array2<f64>, y: &Array2<f64>, cfg: &TrainConfig) -> Result<TrainReport> {
        self.train_with(x, y, cfg, &mut NoAugment)
    }

    /// Minibatch Adam on MSE: `epochs * ceil(rows / batch_size)` steps.
    pub fn train_with(
        &mut self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        cfg: &TrainConfig,
        augmenter: &mut dyn BatchAugmenter,
    ) -> Result<TrainReport> {
        cfg.validate()?;
        if x.nrows() == 0 {
            return Err(Error::input("cannot train on an empty dataset"));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::input(format!("{} feature rows but {} label rows", x.nrows(), y.nrows())));
        }
        self.check_input(x, 0)?;
        if y.ncols() != self.output_dim() {
            return Err(Error::input(format!(
                "labels have {} columns, network outputs {}",
                y.ncols(),
                self.output_dim()
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
        let mut adam = Adam::new(cfg.lr, &self.zero_grads().tensors().iter().map(|t| t.len()).collect::<Vec<_>>());
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut step = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for batch in order.chunks(cfg.batch_size) {
                let plan = augmenter.plan(batch)?;
                let (loss, grads) = self.plan_loss_and_grads(x, y, &plan)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { step, loss });
                }
                adam.step(self.params_mut(), &grads.tensors());
                step += 1;
                total += loss;
                batches += 1;
            }
            epoch_losses.push(total / batches as f64);
        }
        if !self.params_finite() {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
        Ok(TrainReport {
            steps: step,
            epoch_losses,
        })
    }

    /// MSE loss and gradients for one planned minibatch, hidden mixing included.
    pub fn plan_loss_and_grads(&self, x: &Array2<f64>, y: &Array2<f64>, plan: &BatchPlan) -> Result<(f64, Gradients)> {
        let xb = x.select(Axis(0), &plan.rows);
        let yb = y.select(Axis(0), &plan.rows);
        let Some(mix) = &plan.mix else {
            return self.loss_and_grads(&xb, &yb);
        };
        let n_layers = self.layers.len();
        if mix.split_layer >= n_layers {
            return Err(Error::input(format!("mix layer {} out of range", mix.split_layer)));
        }
        for &(a, b, lam) in &mix.pairs {
            if a >= plan.rows.len() || b >= plan.rows.len() || !(0.0..=1.0).contains(&lam) {
                return Err(Error::input("hidden mix pair out of range"));
            }
        }
        let (hidden, head_caches) = self.forward_cached(&xb, 0, mix.split_layer);
        let mixed_h = mix_rows(&hidden, &mix.pairs);
        let mixed_y = mix_rows(&yb, &mix.pairs);
        let (pred, tail_caches) = self.forward_cached(&mixed_h, mix.split_layer, n_layers);
        let loss = mse_loss(&pred, &mixed_y)?;
        let mut grads = self.zero_grads();
        let d_mixed = self.backward_range(mix.split_layer, &tail_caches, &mse_grad(&pred, &mixed_y), &mut grads);
        if mix.split_layer > 0 {
            let mut d_hidden = Array2::zeros(hidden.raw_dim());
            for (r, &(a, b, lam)) in mix.pairs.iter().enumerate() {
                let g = d_mixed.row(r);
                d_hidden.row_mut(a).scaled_add(lam, &g);
                d_hidden.row_mut(b).scaled_add(1.0 - lam, &g);
            }
            self.backward_range(0, &head_caches, &d_hidden, &mut grads);
        }
        Ok((loss, grads))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            model: self.clone(),
        };
        let text = serde_json::to_string(&ckpt)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::input(format!("{} is not a model checkpoint", path.display())));
        }
        Mlp::from_layers(ckpt.model.layers, ckpt.model.seed)
    }
}

const CHECKPOINT_FORMAT: &str = "mixr-mlp";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Mlp,
}

const SMALL_MATMUL_WORK: usize = 1 << 16;

/// `a · b` in standard layout. Small products use a plain row-axpy loop,
/// which avoids the packing overhead that dominates tiny GEMMs.
fn matmul(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.ncols();
    if m * n * k == 0 {
        return Array2::zeros((m, n));
    }
    if m * n * k > SMALL_MATMUL_WORK {
        let out = a.dot(b);
        return if out.is_standard_layout() {
            out
        } else {
            out.as_standard_layout().into_owned()
        };
    }
    let a = a.as_standard_layout();
    let a = a.as_slice().expect("standard layout");
    let b = b.as_standard_layout();
    let b = b.as_slice().expect("standard layout");
    let mut out = Array2::zeros((m, n));
    let o = out.as_slice_mut().expect("fresh array");
    for (row, a_row) in o.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&s, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if s == 0.0 {
                continue;
            }
            for (r, &v) in row.iter_mut().zip(b_row) {
                *r += s * v;
            }
        }
    }
    out
}

/// Row `r` of the result is `lam * m[a] + (1 - lam) * m[b]` for `pairs[r] = (a, b, lam)`.
pub fn mix_rows(m: &Array2<f64>, pairs: &[(usize, usize, f64)]) -> Array2<f64> {
    let mut out = Array2::zeros((pairs.len(), m.ncols()));
    for (mut row, &(a, b, lam)) in out.outer_iter_mut().zip(pairs) {
        Zip::from(&mut row)
            .and(&m.row(a))
            .and(&m.row(b))
            .for_each(|o, &u, &v| *o = lam * u + (1.0 - lam) * v);
    }
    out
}

/// Mean squared error over every entry.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::input(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::input("mse of an empty batch"));
    }
    let sum: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

fn mse_grad(pred: &Array2<f64>, target: &Array2<f64>) -> Array2<f64> {
    let scale = 2.0 / pred.len() as f64;
    (pred - target) * scale
}

/// Adam with bias correction. `step_count` advances by one per [`Adam::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, tensor_sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(lr: f64, model: &Mlp) -> Self {
        let sizes: Vec<usize> = model.zero_grads().tensors().iter().map(|t| t.len()).collect();
        Self::new(lr, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn identity_layer(dim: usize) -> DenseLayer {
        DenseLayer {
            weights: Array2::eye(dim),
            bias: Array1::zeros(dim),
            activation: Activation::Identity,
            layer_norm: None,
        }
    }

    #[test]
    fn zero_model_outputs_zeros() {
        let mut m = Mlp::new(3, &[4], 2, false, 7).unwrap();
        for p in m.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = m.forward(&array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input() {
        let m = Mlp::from_layers(vec![identity_layer(2)], 0).unwrap();
        assert_eq!(m.forward(&array![[1.0, 2.0]]).unwrap(), array![[1.0, 2.0]]);
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let m = Mlp::new(3, &[4], 1, false, 0).unwrap();
        assert!(matches!(m.forward(&array![[1.0, 2.0]]), Err(Error::Input(_))));
        let bad = Mlp::from_layers(vec![identity_layer(2), identity_layer(3)], 0);
        assert!(matches!(bad, Err(Error::Input(_))));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&array![[1.0, 2.0]], &array![[1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(mse_loss(&array![[0.0]], &array![[2.0]]).unwrap(), 4.0);
        assert_eq!(mse_loss(&array![[1.0, 1.0]], &array![[0.0, 2.0]]).unwrap(), 1.0);
        assert!(mse_loss(&array![[1.0]], &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);
        let out = layer_norm(&[4.0, -1.0, 2.5], &[0.0; 3], &[0.3, -0.2, 1.0]).unwrap();
        assert_eq!(out, vec![0.3, -0.2, 1.0]);
        // constant input normalizes to zeros before gain/shift
        let out = layer_norm(&[2.0, 2.0, 2.0], &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        assert!(layer_norm(&[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn layer_norm_random_vector_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        let out = layer_norm(&x, &[1.0; 64], &[0.0; 64]).unwrap();
        let mean = out.iter().sum::<f64>() / 64.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn split_zero_returns_input_and_resume_is_exact() {
        let m = Mlp::new(3, &[5, 4], 2, true, 11).unwrap();
        let x = array![[0.1, -0.4, 2.0], [1.0, 0.0, -1.0]];
        let (h, r) = m.forward_split(&x, 0).unwrap();
        assert_eq!(h, x);
        let full = m.forward(&x).unwrap();
        for split in 0..m.layer_count() {
            let (h, r2) = m.forward_split(&x, split).unwrap();
            assert_eq!(m.forward_resume(&r2, &h).unwrap(), full);
        }
        assert_eq!(m.forward_resume(&r, &h).unwrap(), full);
        assert!(m.forward_split(&x, 3).is_err());
    }

    #[test]
    fn lr_zero_leaves_model_unchanged() {
        let mut m = Mlp::new(2, &[4], 1, true, 5).unwrap();
        let before = m.clone();
        let x = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]];
        let y = array![[1.0], [0.0], [3.0]];
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 1,
            lr: 0.0,
            shuffle_seed: 1,
        };
        let report = m.train(&x, &y, &cfg).unwrap();
        assert_eq!(report.steps, 2);
        assert_eq!(m, before);
    }

    #[test]
    fn first_adam_step_moves_by_lr_sign() {
        let lr = 0.01;
        let mut adam = Adam::new(lr, &[3]);
        let mut p = vec![1.0, 1.0, 1.0];
        adam.step(vec![p.as_mut_slice()], &[&[0.5, -3.0, 1e-3]]);
        assert_eq!(adam.step_count(), 1);
        assert!((p[0] - (1.0 - lr)).abs() < 1e-6 * lr);
        assert!((p[1] - (1.0 + lr)).abs() < 1e-6 * lr);
        assert!((p[2] - (1.0 - lr)).abs() < 1e-4 * lr);
    }

    #[test]
    fn train_rejects_bad_config() {
        let mut m = Mlp::new(1, &[], 1, false, 0).unwrap();
        let x = array![[1.0]];
        let cfg = TrainConfig {
            batch_size: 1,
            epochs: 0,
            lr: 0.1,
            shuffle_seed: 0,
        };
        assert!(m.train(&x, &x, &cfg).is_err());
    }

    #[test]
    fn divergence_names_the_step() {
        let mut m = Mlp::new(1, &[], 1, false, 0).unwrap();
        let x = array![[1.0], [2.0]];
        let y = array![[f64::NAN], [1.0]];
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 1,
            lr: 0.1,
            shuffle_seed: 0,
        };
        match m.train(&x, &y, &cfg) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let m = Mlp::new(4, &[7, 3], 2, true, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save_json(&path).unwrap();
        let back = Mlp::load_json(&path).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.layers().iter().zip(m.layers()) {
            assert!(a.weights.iter().zip(b.weights.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}
