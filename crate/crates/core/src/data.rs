//! Datasets, CSV ingestion, standardization, splitting and synthetic generators.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature matrix `(S, d)` and label matrix `(S, e)` with column names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Array2<f64>,
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
    /// Set when the features (and possibly labels) have been standardized.
    pub standardization: Option<Standardizer>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Array2<f64>) -> Result<Self> {
        let feature_names = (0..features.ncols()).map(|j| format!("x{j}")).collect();
        let label_names = (0..labels.ncols()).map(|j| format!("y{j}")).collect();
        Self::with_names(features, labels, feature_names, label_names)
    }

    pub fn with_names(
        features: Array2<f64>,
        labels: Array2<f64>,
        feature_names: Vec<String>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.nrows() {
            return Err(Error::input(format!(
                "{} feature rows but {} label rows",
                features.nrows(),
                labels.nrows()
            )));
        }
        if feature_names.len() != features.ncols() || label_names.len() != labels.ncols() {
            return Err(Error::input("column names do not match matrix widths"));
        }
        if features.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input("dataset contains NaN or infinite values"));
        }
        Ok(Self {
            features,
            labels,
            feature_names,
            label_names,
            standardization: None,
        })
    }

    /// Zero rows with the same columns as `self`.
    pub fn empty_like(&self) -> Self {
        Self {
            features: Array2::zeros((0, self.dim())),
            labels: Array2::zeros((0, self.label_dim())),
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label_dim(&self) -> usize {
        self.labels.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: self.labels.select(Axis(0), rows),
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.dim() != other.dim() || self.label_dim() != other.label_dim() {
            return Err(Error::input("cannot concatenate datasets with different widths"));
        }
        Ok(Self {
            features: concatenate![Axis(0), self.features, other.features],
            labels: concatenate![Axis(0), self.labels, other.labels],
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
            standardization: self.standardization.clone(),
        })
    }
}

/// Reads a header-first CSV. Label columns are taken by name; every other
/// column becomes a feature, in file order.
pub fn load_csv(path: &Path, label_columns: &[String]) -> Result<Dataset> {
    load_csv_ignoring(path, label_columns, &[])
}

/// Like [`load_csv`], skipping the named columns (e.g. provenance columns).
pub fn load_csv_ignoring(path: &Path, label_columns: &[String], ignore: &[&str]) -> Result<Dataset> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Parse {
            path: shown,
            row: 1,
            column: String::new(),
            message: "missing header row".into(),
        });
    }
    let mut label_idx = Vec::with_capacity(label_columns.len());
    for name in label_columns {
        match header.iter().position(|h| h == name) {
            Some(i) => label_idx.push(i),
            None => {
                return Err(Error::Parse {
                    path: shown,
                    row: 1,
                    column: name.clone(),
                    message: format!("label column `{name}` not found in header"),
                })
            }
        }
    }
    if label_idx.is_empty() {
        return Err(Error::input("at least one label column is required"));
    }
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|i| !label_idx.contains(i) && !ignore.contains(&header[*i].as_str()))
        .collect();

    let mut feats = Vec::new();
    let mut labs = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                path: shown,
                row: line,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let mut values = Vec::with_capacity(record.len());
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: shown.clone(),
                row: line,
                column: header[c].clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: shown,
                    row: line,
                    column: header[c].clone(),
                    message: format!("`{cell}` is not a finite number"),
                });
            }
            values.push(v);
        }
        feats.extend(feature_idx.iter().map(|&i| values[i]));
        labs.extend(label_idx.iter().map(|&i| values[i]));
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            path: shown,
            row: 2,
            column: String::new(),
            message: "no data rows".into(),
        });
    }
    let features = Array2::from_shape_vec((rows, feature_idx.len()), feats).expect("shape");
    let labels = Array2::from_shape_vec((rows, label_idx.len()), labs).expect("shape");
    Dataset::with_names(
        features,
        labels,
        feature_idx.iter().map(|&i| header[i].clone()).collect(),
        label_idx.iter().map(|&i| header[i].clone()).collect(),
    )
}

/// Extra per-row columns appended after features and labels.
pub struct ExtraColumns<'a> {
    pub names: Vec<String>,
    pub rows: &'a [Vec<String>],
}

/// Writes features then labels. Values use the shortest representation that
/// parses back to the same `f64`.
pub fn write_csv(data: &Dataset, path: &Path, extra: Option<ExtraColumns<'_>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = data.feature_names.iter().chain(&data.label_names).cloned().collect();
    if let Some(ex) = &extra {
        if ex.rows.len() != data.len() {
            return Err(Error::input("extra column rows do not match dataset rows"));
        }
        header.extend(ex.names.iter().cloned());
    }
    w.write_record(&header)?;
    for r in 0..data.len() {
        let mut rec: Vec<String> = data
            .features
            .row(r)
            .iter()
            .chain(data.labels.row(r).iter())
            .map(|v| v.to_string())
            .collect();
        if let Some(ex) = &extra {
            rec.extend(ex.rows[r].iter().cloned());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-column mean/std fitted on one dataset (normally the training split)
/// and applied to any other with the same columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Feature columns kept; constant columns are dropped.
    pub kept_columns: Vec<usize>,
    pub input_dim: usize,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn column_stats(m: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    let mean: Vec<f64> = m.axis_iter(Axis(1)).map(|c| c.sum() / n).collect();
    let std = m
        .axis_iter(Axis(1))
        .zip(&mean)
        .map(|(c, mu)| (c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

impl Standardizer {
    pub fn fit(data: &Dataset, standardize_labels: bool) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::input("cannot standardize an empty dataset"));
        }
        let (mean, std) = column_stats(&data.features);
        let mut kept = Vec::new();
        for (j, s) in std.iter().enumerate() {
            if *s > 0.0 {
                kept.push(j);
            } else {
                log::warn!("dropping constant feature column `{}`", data.feature_names[j]);
            }
        }
        if kept.is_empty() {
            return Err(Error::input("every feature column is constant"));
        }
        let label_stats = if standardize_labels {
            let (lm, ls) = column_stats(&data.labels);
            if ls.contains(&0.0) {
                return Err(Error::input("cannot standardize a constant label column"));
            }
            Some((lm, ls))
        } else {
            None
        };
        Ok(Self {
            feature_mean: kept.iter().map(|&j| mean[j]).collect(),
            feature_std: kept.iter().map(|&j| std[j]).collect(),
            kept_columns: kept,
            input_dim: data.dim(),
            label_stats,
        })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim() != self.input_dim {
            return Err(Error::input(format!(
                "standardizer fitted on {} features, dataset has {}",
                self.input_dim,
                data.dim()
            )));
        }
        let mut features = data.features.select(Axis(1), &self.kept_columns);
        for (j, mut col) in features.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, sd) = (self.feature_mean[j], self.feature_std[j]);
            col.mapv_inplace(|v| (v - mu) / sd);
        }
        let mut labels = data.labels.clone();
        if let Some((lm, ls)) = &self.label_stats {
            for (j, mut col) in labels.axis_iter_mut(Axis(1)).enumerate() {
                col.mapv_inplace(|v| (v - lm[j]) / ls[j]);
            }
        }
        Ok(Dataset {
            features,
            labels,
            feature_names: self.kept_columns.iter().map(|&j| data.feature_names[j].clone()).collect(),
            label_names: data.label_names.clone(),
            standardization: Some(self.clone()),
        })
    }

    /// Maps standardized data back to raw units. Dropped constant columns
    /// come back as their (constant) training mean.
    pub fn inverse(&self, data: &Dataset, dropped_values: &[f64]) -> Result<Dataset> {
        if data.dim() != self.kept_columns.len() {
            return Err(Error::input("dataset does not match this standardizer"));
        }
        let mut features = Array2::zeros((data.len(), self.input_dim));
        let mut dropped = dropped_values.iter();
        for j in 0..self.input_dim {
            match self.kept_columns.iter().position(|&k| k == j) {
                Some(p) => {
                    let (mu, sd) = (self.feature_mean[p], self.feature_std[p]);
                    features.column_mut(j).assign(&data.features.column(p).mapv(|v| v * sd + mu));
                }
                None => {
                    let v = *dropped.next().ok_or_else(|| Error::input("missing value for dropped column"))?;
                    features.column_mut(j).fill(v);
                }
            }
        }
        let labels = self.inverse_labels(&data.labels);
        let mut names = vec![String::new(); self.input_dim];
        for (p, &j) in self.kept_columns.iter().enumerate() {
            names[j] = data.feature_names[p].clone();
        }
        for (j, n) in names.iter_mut().enumerate() {
            if n.is_empty() {
                *n = format!("x{j}");
            }
        }
        Ok(Dataset {
            features,
            labels,
            feature_names: names,
            label_names: data.label_names.clone(),
            standardization: None,
        })
    }

    pub fn inverse_labels(&self, labels: &Array2<f64>) -> Array2<f64> {
        let mut out = labels.clone();
        if let Some((lm, ls)) = &self.label_stats {
            for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
                col.mapv_inplace(|v| v * ls[j] + lm[j]);
            }
        }
        out
    }
}

/// Fits on `data` and returns the standardized copy.
pub fn standardize(data: &Dataset, standardize_labels: bool) -> Result<Dataset> {
    Standardizer::fit(data, standardize_labels)?.apply(data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub indices: SplitIndices,
}

/// Seeded shuffle, then consecutive train / validation / test slices.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let total = spec.train_size + spec.val_size + spec.test_size;
    if total > data.len() {
        return Err(Error::input(format!(
            "split sizes {}/{}/{} need {} rows, dataset has {}",
            spec.train_size,
            spec.val_size,
            spec.test_size,
            total,
            data.len()
        )));
    }
    if spec.train_size == 0 {
        return Err(Error::input("train split must be nonempty"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let train = order[..spec.train_size].to_vec();
    let val = order[spec.train_size..spec.train_size + spec.val_size].to_vec();
    let test = order[spec.train_size + spec.val_size..total].to_vec();
    Ok(Splits {
        train: data.select(&train),
        val: data.select(&val),
        test: data.select(&test),
        indices: SplitIndices { train, val, test },
    })
}

/// JSON sidecar describing a dataset on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
    pub standardization: Option<Standardizer>,
    pub split: Option<SplitIndices>,
}

impl DatasetMeta {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticKind {
    /// Four training points on `sin(2.5x) + 0.5x` over `[0, 2.5]`.
    Toy1d,
    /// Uniform 1-D inputs on `[0, 1]` under a random continuous piecewise-linear curve.
    Piecewise { n_train: usize, segments: usize },
    /// Uniform inputs on `[-1, 1]^dim`, separable polynomial labels.
    Polynomial {
        n_train: usize,
        dim: usize,
        degree: usize,
        #[serde(default = "one")]
        outputs: usize,
    },
    /// Tight blocks of `block_size` training points along a line, with a
    /// continuous piecewise-linear target whose kinks sit in the gaps between
    /// blocks. Mixing an example with at most `block_size - 1` neighbors
    /// stays inside its block, where the target is exactly linear.
    ///
    /// Block `c` has slope `slope_step * (c - center) + zigzag * (-1)^c`:
    /// a convex trend plus an alternating component that makes mixes across
    /// a gap land far from the target.
    Planted {
        blocks: usize,
        block_size: usize,
        spacing: f64,
        gap: f64,
        slope_step: f64,
        #[serde(default)]
        zigzag: f64,
        /// Draw validation and test inputs from the blocks only, instead of
        /// the whole span including the gaps.
        #[serde(default)]
        eval_in_blocks: bool,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: SyntheticKind,
    pub n_val: usize,
    pub n_test: usize,
    /// Std of Gaussian noise added to training labels. Validation and test
    /// labels are always the clean target.
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The planted-neighborhood defaults: 8 blocks of 5 (S = 40, k* = 4).
    pub fn planted(seed: u64) -> Self {
        Self {
            generator: SyntheticKind::Planted {
                blocks: 8,
                block_size: 5,
                spacing: 0.1,
                gap: 0.6,
                slope_step: 0.5,
                zigzag: 2.0,
                eval_in_blocks: false,
            },
            n_val: 100,
            n_test: 200,
            noise: 0.0,
            seed,
        }
    }

    pub fn toy1d(seed: u64) -> Self {
        Self {
            generator: SyntheticKind::Toy1d,
            n_val: 0,
            n_test: 20,
            noise: 0.0,
            seed,
        }
    }
}

/// A noise-free target function.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Toy1d,
    /// Linear interpolation through knots, linear extrapolation outside.
    PiecewiseLinear { xs: Vec<f64>, ys: Vec<f64> },
    /// `y_o = bias_o + sum_j sum_p coef[o][j][p-1] * x_j^p`
    Polynomial { coef: Vec<Vec<Vec<f64>>>, bias: Vec<f64> },
}

impl Target {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Target::Toy1d => vec![(2.5 * x[0]).sin() + 0.5 * x[0]],
            Target::PiecewiseLinear { xs, ys } => vec![piecewise_eval(xs, ys, x[0])],
            Target::Polynomial { coef, bias } => coef
                .iter()
                .zip(bias)
                .map(|(per_dim, b)| {
                    b + per_dim
                        .iter()
                        .zip(x)
                        .map(|(cs, &xj)| cs.iter().enumerate().map(|(p, c)| c * xj.powi(p as i32 + 1)).sum::<f64>())
                        .sum::<f64>()
                })
                .collect(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Target::Polynomial { bias, .. } => bias.len(),
            _ => 1,
        }
    }

    pub fn eval_rows(&self, features: &Array2<f64>) -> Array2<f64> {
        let flat: Vec<f64> = features.outer_iter().flat_map(|r| self.eval(&r.to_vec())).collect();
        Array2::from_shape_vec((features.nrows(), self.outputs()), flat).expect("shape")
    }
}

fn piecewise_eval(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let seg = match xs.iter().position(|&k| k > x) {
        Some(0) => 0,
        Some(i) => i - 1,
        None => xs.len() - 2,
    };
    let t = (x - xs[seg]) / (xs[seg + 1] - xs[seg]);
    ys[seg] + t * (ys[seg + 1] - ys[seg])
}

pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub target: Target,
    /// For the planted kind: the largest k whose neighbors all share the example's linear piece.
    pub planted_k: Option<usize>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::input("noise level must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // domain: per input dimension, equal-width intervals sampled uniformly
    let (train_x, target, domain, planted_k): (Array2<f64>, Target, Vec<Vec<(f64, f64)>>, Option<usize>) = match &spec.generator {
        SyntheticKind::Toy1d => {
            let xs = [0.1, 0.7, 1.0, 2.3];
            (
                Array2::from_shape_vec((4, 1), xs.to_vec()).expect("shape"),
                Target::Toy1d,
                vec![vec![(0.0, 2.5)]],
                None,
            )
        }
        SyntheticKind::Piecewise { n_train, segments } => {
            if *n_train == 0 || *segments == 0 {
                return Err(Error::input("piecewise needs n_train >= 1 and segments >= 1"));
            }
            let mut xs: Vec<f64> = (1..*segments).map(|_| rng.random_range(0.05..0.95)).collect();
            xs.push(0.0);
            xs.push(1.0);
            xs.sort_by(f64::total_cmp);
            let ys = xs.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let train = Array2::from_shape_fn((*n_train, 1), |_| rng.random_range(0.0..1.0));
            (train, Target::PiecewiseLinear { xs, ys }, vec![vec![(0.0, 1.0)]], None)
        }
        SyntheticKind::Polynomial {
            n_train,
            dim,
            degree,
            outputs,
        } => {
            if *n_train == 0 || *dim == 0 || *degree == 0 || *outputs == 0 {
                return Err(Error::input("polynomial needs positive n_train, dim, degree and outputs"));
            }
            let coef = (0..*outputs)
                .map(|_| {
                    (0..*dim)
                        .map(|_| (0..*degree).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .collect()
                })
                .collect();
            let bias = (0..*outputs).map(|_| rng.random_range(-1.0..1.0)).collect();
            let train = Array2::from_shape_fn((*n_train, *dim), |_| rng.random_range(-1.0..1.0));
            (train, Target::Polynomial { coef, bias }, vec![vec![(-1.0, 1.0)]; *dim], None)
        }
        SyntheticKind::Planted {
            blocks,
            block_size,
            spacing,
            gap,
            slope_step,
            zigzag,
            eval_in_blocks,
        } => {
            if *blocks < 2 || *block_size < 2 {
                return Err(Error::input("planted needs at least 2 blocks of at least 2 points"));
            }
            let width = (*block_size - 1) as f64 * spacing;
            if !(*spacing > 0.0 && *gap > width) {
                return Err(Error::input(
                    "planted needs spacing > 0 and a gap wider than a block, or neighbors leak across blocks",
                ));
            }
            let period = width + gap;
            let mut xs = Vec::with_capacity(blocks * block_size);
            for c in 0..*blocks {
                for p in 0..*block_size {
                    xs.push(c as f64 * period + p as f64 * spacing);
                }
            }
            // knots: left end, one kink per gap center, right end
            let mut knot_x = vec![0.0];
            knot_x.extend((0..blocks - 1).map(|c| c as f64 * period + width + gap / 2.0));
            knot_x.push((*blocks - 1) as f64 * period + width);
            let center = (*blocks - 1) as f64 / 2.0;
            let mut knot_y = vec![0.0];
            for s in 0..knot_x.len() - 1 {
                let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
                let slope = slope_step * (s as f64 - center) + zigzag * sign;
                knot_y.push(knot_y[s] + slope * (knot_x[s + 1] - knot_x[s]));
            }
            let hi = knot_x[knot_x.len() - 1];
            let support = if *eval_in_blocks {
                (0..*blocks).map(|c| (c as f64 * period, c as f64 * period + width)).collect()
            } else {
                vec![(0.0, hi)]
            };
            (
                Array2::from_shape_vec((xs.len(), 1), xs).expect("shape"),
                Target::PiecewiseLinear { xs: knot_x, ys: knot_y },
                vec![support],
                Some(block_size - 1),
            )
        }
    };

    let sample = |n: usize, rng: &mut ChaCha8Rng| -> Array2<f64> {
        Array2::from_shape_fn((n, domain.len()), |(_, j)| {
            let (lo, hi) = domain[j][rng.random_range(0..domain[j].len())];
            rng.random_range(lo..=hi)
        })
    };
    let val_x = sample(spec.n_val, &mut rng);
    let test_x = sample(spec.n_test, &mut rng);

    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut train_y = target.eval_rows(&train_x);
    if spec.noise > 0.0 {
        train_y.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    let val_y = target.eval_rows(&val_x);
    let test_y = target.eval_rows(&test_x);
    Ok(SyntheticData {
        train: Dataset::new(train_x, train_y)?,
        val: Dataset::new(val_x, val_y)?,
        test: Dataset::new(test_x, test_y)?,
        target,
        planted_k,
    })
}

/// Column means, used to restore dropped constant columns.
pub fn column_means(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(m.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_features_and_labels() {
        let f = write_tmp("a,y,b\n1,10,2\n3,30,4\n5,50,6\n");
        let d = load_csv(f.path(), &["y".into()]).unwrap();
        assert_eq!((d.len(), d.dim(), d.label_dim()), (3, 2, 1));
        assert_eq!(d.feature_names, vec!["a", "b"]);
        assert_eq!(d.features, array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(d.labels, array![[10.0], [30.0], [50.0]]);
    }

    #[test]
    fn missing_label_column_is_named() {
        let f = write_tmp("a,b\n1,2\n");
        let err = load_csv(f.path(), &["target".into()]).unwrap_err();
        assert!(err.to_string().contains("target"), "{err}");
    }

    #[test]
    fn nan_cell_is_a_parse_error() {
        let f = write_tmp("a,y\n1,2\nnan,3\n");
        match load_csv(f.path(), &["y".into()]) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "a");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_and_non_numeric_rows_fail() {
        let f = write_tmp("a,y\n1,2\n3\n");
        assert!(matches!(load_csv(f.path(), &["y".into()]), Err(Error::Parse { row: 3, .. })));
        let f = write_tmp("a,y\n1,two\n");
        assert!(matches!(load_csv(f.path(), &["y".into()]), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn standardize_examples() {
        let d = Dataset::new(array![[0.0], [2.0]], array![[5.0], [7.0]]).unwrap();
        let s = standardize(&d, false).unwrap();
        assert_eq!(s.features, array![[-1.0], [1.0]]);
        assert_eq!(s.labels, d.labels);
        let again = standardize(&s, false).unwrap();
        for (a, b) in again.features.iter().zip(s.features.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(standardize(&d.empty_like(), false).is_err());
    }

    #[test]
    fn validation_uses_train_statistics() {
        let train = Dataset::new(array![[0.0], [2.0]], array![[0.0], [0.0]]).unwrap();
        let val = Dataset::new(array![[4.0], [6.0]], array![[0.0], [0.0]]).unwrap();
        let st = Standardizer::fit(&train, false).unwrap();
        assert_eq!(st.apply(&val).unwrap().features, array![[3.0], [5.0]]);
    }

    #[test]
    fn constant_columns_are_dropped_and_restored() {
        let d = Dataset::new(array![[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]], array![[0.0], [1.0], [2.0]]).unwrap();
        let st = Standardizer::fit(&d, true).unwrap();
        let s = st.apply(&d).unwrap();
        assert_eq!(s.dim(), 1);
        let back = st.inverse(&s, &[5.0]).unwrap();
        for (a, b) in back.features.iter().zip(d.features.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in back.labels.iter().zip(d.labels.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn split_partitions_and_is_seeded() {
        let d = Dataset::new(Array2::from_shape_fn((10, 1), |(i, _)| i as f64), Array2::zeros((10, 1))).unwrap();
        let spec = SplitSpec {
            train_size: 6,
            val_size: 2,
            test_size: 2,
            seed: 4,
        };
        let a = split(&d, &spec).unwrap();
        let b = split(&d, &spec).unwrap();
        assert_eq!(a.indices, b.indices);
        let mut all: Vec<usize> = a.indices.train.iter().chain(&a.indices.val).chain(&a.indices.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let bad = SplitSpec { val_size: 3, ..spec };
        assert!(split(&d, &bad).is_err());
    }

    #[test]
    fn toy1d_is_noise_free_target() {
        let g = generate_synthetic(&SyntheticSpec::toy1d(1)).unwrap();
        assert_eq!(g.train.len(), 4);
        assert_eq!(g.test.len(), 20);
        for (x, y) in g.train.features.iter().zip(g.train.labels.iter()) {
            assert_eq!(*y, (2.5 * x).sin() + 0.5 * x);
        }
    }

    #[test]
    fn degree_one_polynomial_is_affine() {
        let spec = SyntheticSpec {
            generator: SyntheticKind::Polynomial {
                n_train: 30,
                dim: 3,
                degree: 1,
                outputs: 2,
            },
            n_val: 0,
            n_test: 5,
            noise: 0.0,
            seed: 2,
        };
        let g = generate_synthetic(&spec).unwrap();
        let t = &g.target;
        let a = g.train.features.row(0).to_vec();
        let b = g.train.features.row(1).to_vec();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 0.5 * u + 0.5 * v).collect();
        let (ya, yb, ym) = (t.eval(&a), t.eval(&b), t.eval(&mid));
        for o in 0..2 {
            assert!((0.5 * ya[o] + 0.5 * yb[o] - ym[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_blocks_keep_neighbors_inside() {
        let g = generate_synthetic(&SyntheticSpec::planted(0)).unwrap();
        assert_eq!(g.train.len(), 40);
        assert_eq!(g.planted_k, Some(4));
        assert_eq!(g.val.len(), 100);
        assert!(matches!(
            generate_synthetic(&SyntheticSpec {
                generator: SyntheticKind::Planted {
                    blocks: 3,
                    block_size: 5,
                    spacing: 0.1,
                    gap: 0.3,
                    slope_step: 1.0,
                    zigzag: 0.0,
                    eval_in_blocks: false,
                },
                ..SyntheticSpec::planted(0)
            }),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn unknown_kind_is_rejected_by_schema() {
        let bad = r#"{"generator":{"kind":"spiral"},"n_val":1,"n_test":1,"seed":0}"#;
        assert!(serde_json::from_str::<SyntheticSpec>(bad).is_err());
        let extra = r#"{"generator":{"kind":"toy1d"},"n_val":1,"n_test":1,"seed":0,"colour":1}"#;
        assert!(serde_json::from_str::<SyntheticSpec>(extra).is_err());
        let ok = r#"{"generator":{"kind":"toy1d"},"n_val":1,"n_test":1,"seed":0}"#;
        assert!(serde_json::from_str::<SyntheticSpec>(ok).is_ok());
        assert!(serde_json::from_str::<SyntheticSpec>(bad).is_err());
    }
}
