//! Metrics, distance studies, policy histograms, and report rendering.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::mixing::{mix_distance_band, mix_pair, Band, DistanceScale, MixPolicy};
use crate::neighbors::KnnIndex;
use crate::nn::{ModelSpec, Mlp};

pub const PAIR_CAP_PER_BAND: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub r2: f64,
    pub rmse_per_dim: Vec<f64>,
    pub r2_per_dim: Vec<f64>,
    pub n: usize,
    /// Set when R² fell below zero; values are reported unclipped.
    pub r2_negative: bool,
}

fn check_shapes(y: &Array2<f64>, pred: &Array2<f64>) -> Result<()> {
    if y.dim() != pred.dim() {
        return Err(Error::input(format!("label shape {:?} vs prediction shape {:?}", y.dim(), pred.dim())));
    }
    if y.is_empty() {
        return Err(Error::input("metrics need at least one value"));
    }
    Ok(())
}

/// Pooled over every label entry.
pub fn rmse(y: &Array2<f64>, pred: &Array2<f64>) -> Result<f64> {
    check_shapes(y, pred)?;
    let sse: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

fn r2_columns(y: &Array2<f64>, pred: &Array2<f64>) -> Result<Vec<f64>> {
    check_shapes(y, pred)?;
    y.columns()
        .into_iter()
        .zip(pred.columns())
        .enumerate()
        .map(|(d, (yc, pc))| {
            let mean = yc.mean().expect("nonempty column");
            let ss_tot: f64 = yc.iter().map(|v| (v - mean).powi(2)).sum();
            if ss_tot == 0.0 {
                return Err(Error::input(format!("label column {d} is constant; R² is undefined")));
            }
            let ss_res: f64 = yc.iter().zip(pc).map(|(a, b)| (a - b).powi(2)).sum();
            Ok(1.0 - ss_res / ss_tot)
        })
        .collect()
}

/// `1 - SS_res / SS_tot` per label column, averaged. Not clipped at zero.
pub fn r_squared(y: &Array2<f64>, pred: &Array2<f64>) -> Result<f64> {
    let per = r2_columns(y, pred)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn metrics(y: &Array2<f64>, pred: &Array2<f64>) -> Result<Metrics> {
    let r2_per_dim = r2_columns(y, pred)?;
    let rmse_per_dim = y
        .columns()
        .into_iter()
        .zip(pred.columns())
        .map(|(yc, pc)| (yc.iter().zip(pc).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / yc.len() as f64).sqrt())
        .collect();
    let r2 = r2_per_dim.iter().sum::<f64>() / r2_per_dim.len() as f64;
    Ok(Metrics {
        rmse: rmse(y, pred)?,
        r2,
        rmse_per_dim,
        r2_per_dim,
        n: y.nrows(),
        r2_negative: r2 < 0.0,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // ties share their average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::input("spearman needs two equal-length series of at least 2 values"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::input("spearman is undefined for a constant series"));
    }
    Ok(cov / (va * vb).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub band: Band,
    pub n: usize,
    /// Mean label error or model RMSE; NaN when `n == 0` for label-error studies.
    pub value: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStudy {
    pub bands: Vec<BandResult>,
    pub normalization: f64,
    /// Reference RMSE without augmentation, for model studies.
    pub baseline: Option<f64>,
}

impl DistanceStudy {
    pub fn values(&self) -> Vec<f64> {
        self.bands.iter().map(|b| b.value).collect()
    }

    /// `band_lo,band_hi,n,value,std`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["band_lo", "band_hi", "n", "value", "std"])?;
        for b in &self.bands {
            w.write_record([
                b.band.lo.to_string(),
                b.band.hi.to_string(),
                b.n.to_string(),
                b.value.to_string(),
                b.std.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// For pairs in each normalized-distance band, compares the midpoint's
/// interpolated label against the model's prediction at the midpoint.
/// At most [`PAIR_CAP_PER_BAND`] pairs per band, sampled with `seed`.
pub fn label_error_vs_distance(
    model: &Mlp,
    data: &Dataset,
    index: &KnnIndex,
    bands: &[Band],
    seed: u64,
) -> Result<DistanceStudy> {
    if index.len() != data.len() {
        return Err(Error::input("index does not match dataset"));
    }
    let norm = index.max_distance();
    let all = index.pairs();
    let mut results = Vec::with_capacity(bands.len());
    for (b, band) in bands.iter().enumerate() {
        let mut pairs: Vec<(usize, usize)> = all
            .iter()
            .filter(|&&(_, _, d)| norm > 0.0 && band.contains(d / norm))
            .map(|&(i, j, _)| (i, j))
            .collect();
        if pairs.len() > PAIR_CAP_PER_BAND {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b as u64]));
            pairs.shuffle(&mut rng);
            pairs.truncate(PAIR_CAP_PER_BAND);
        }
        if pairs.is_empty() {
            results.push(BandResult {
                band: *band,
                n: 0,
                value: f64::NAN,
                std: f64::NAN,
            });
            continue;
        }
        let mut x = Array2::zeros((pairs.len(), data.dim()));
        let mut y = Array2::zeros((pairs.len(), data.label_dim()));
        for (r, &(i, j)) in pairs.iter().enumerate() {
            let (xm, ym) = mix_pair(
                data.features.row(i),
                data.labels.row(i),
                data.features.row(j),
                data.labels.row(j),
                0.5,
            )?;
            x.row_mut(r).assign(&xm);
            y.row_mut(r).assign(&ym);
        }
        let pred = model.forward(&x)?;
        let per_pair: Vec<f64> = y
            .rows()
            .into_iter()
            .zip(pred.rows())
            .map(|(a, p)| a.iter().zip(p).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64)
            .collect();
        let mse = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
        let sd = (per_pair.iter().map(|e| (e.sqrt() - mse.sqrt()).powi(2)).sum::<f64>() / per_pair.len() as f64).sqrt();
        results.push(BandResult {
            band: *band,
            n: pairs.len(),
            value: mse.sqrt(),
            std: sd,
        });
    }
    Ok(DistanceStudy {
        bands: results,
        normalization: norm,
        baseline: None,
    })
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Test RMSE of a model trained on `train` (plus `extra` when given).
pub fn train_and_score(train: &Dataset, extra: Option<&Dataset>, test: &Dataset, spec: &ModelSpec, seed: u64) -> Result<f64> {
    let data = match extra {
        Some(e) if !e.is_empty() => train.concat(e)?,
        _ => train.clone(),
    };
    let mut model = spec.build(data.dim(), data.label_dim(), seed)?;
    model.train(&data.features, &data.labels, &spec.train_config(derive_seed(seed, &[1])))?;
    rmse(&test.labels, &model.forward(&test.features)?)
}

/// For each normalized-distance band, trains `seeds` models on the train set
/// plus every midpoint mix from that band and records mean test RMSE.
/// A band with no pairs trains on the raw set, so it equals the baseline.
pub fn distance_band_model_study(
    train: &Dataset,
    test: &Dataset,
    bands: &[Band],
    spec: &ModelSpec,
    seeds: usize,
    seed: u64,
) -> Result<DistanceStudy> {
    if seeds == 0 {
        return Err(Error::input("band study needs at least one seed"));
    }
    let index = KnnIndex::build(train)?;
    let model_seeds: Vec<u64> = (0..seeds as u64).map(|s| derive_seed(seed, &[s])).collect();
    let score = |extra: Option<&Dataset>| -> Result<Vec<f64>> {
        model_seeds
            .par_iter()
            .map(|&s| train_and_score(train, extra, test, spec, s))
            .collect()
    };
    let (baseline, _) = mean_std(&score(None)?);
    let mut results = Vec::with_capacity(bands.len());
    for band in bands {
        let aug = mix_distance_band(train, &index, band, DistanceScale::NormalizedByMax, 0.5)?;
        let (value, std) = mean_std(&score(Some(&aug.data))?);
        results.push(BandResult {
            band: *band,
            n: aug.len(),
            value,
            std,
        });
    }
    Ok(DistanceStudy {
        bands: results,
        normalization: index.max_distance(),
        baseline: Some(baseline),
    })
}

/// Count of examples choosing each option, in option order.
pub fn policy_histogram(policy: &MixPolicy) -> Vec<(usize, usize)> {
    let opts = policy.options().values();
    let mut counts = vec![0; opts.len()];
    for &c in policy.choices() {
        counts[c] += 1;
    }
    opts.iter().copied().zip(counts).collect()
}

pub fn write_histogram_csv(hist: &[(usize, usize)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "count"])?;
    for (k, c) in hist {
        w.write_record([k.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub runtime_mins: f64,
    /// Set when the method failed; the numeric columns are then meaningless.
    pub error: Option<String>,
}

/// Fixed-width table: method, RMSE ± std, R² ± std, runtime in minutes.
pub fn render_table(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>19}  {:>19}  {:>14}", "Method", "RMSE", "R2", "Runtime (mins)");
    for r in rows {
        match &r.error {
            Some(e) => {
                let _ = writeln!(out, "{:<width$}  failed: {e}", r.method);
            }
            None => {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>19}  {:>19}  {:>14.2}",
                    r.method,
                    format!("{:.4}±{:.4}", r.rmse_mean, r.rmse_std),
                    format!("{:.4}±{:.4}", r.r2_mean, r.r2_std),
                    r.runtime_mins
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rmse_examples() {
        let y = array![[0.0], [2.0]];
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(rmse(&y, &array![[1.0], [1.0]]).unwrap(), 1.0);
        assert!(rmse(&y, &array![[1.0, 0.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn r2_examples() {
        let y = array![[1.0], [2.0], [3.0]];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&y, &array![[2.0], [2.0], [2.0]]).unwrap(), 0.0);
        assert_eq!(r_squared(&y, &array![[1.0], [2.0], [5.0]]).unwrap(), -1.0);
        assert!(r_squared(&array![[1.0], [1.0]], &array![[1.0], [2.0]]).is_err());
        let m = metrics(&y, &array![[1.0], [2.0], [5.0]]).unwrap();
        assert!(m.r2_negative);
    }

    #[test]
    fn r2_averages_columns() {
        let y = array![[1.0, 0.0], [2.0, 1.0], [3.0, 2.0]];
        let p = array![[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]];
        assert_eq!(r_squared(&y, &p).unwrap(), 0.5);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn histogram_counts() {
        let opts = crate::neighbors::KnnOptions::new(vec![0, 1, 2]).unwrap();
        let p = MixPolicy::from_ks(&[0, 2, 2, 1, 2], opts).unwrap();
        assert_eq!(policy_histogram(&p), vec![(0, 1), (1, 1), (2, 3)]);
    }

    #[test]
    fn table_has_one_line_per_row() {
        let row = TableRow {
            method: "none".into(),
            rmse_mean: 0.5,
            rmse_std: 0.01,
            r2_mean: 0.9,
            r2_std: 0.0,
            runtime_mins: 0.1,
            error: None,
        };
        let t = render_table(&[row]);
        assert_eq!(t.lines().count(), 2);
        assert!(t.contains("0.5000±0.0100"));
    }
}
