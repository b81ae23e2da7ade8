//! Example mixing: pair interpolation and the augmentations built on it.
//!
//! Every constructor returns an [`Augmented`] set holding only the synthetic
//! rows together with their provenance; callers train on `D ∪ Mix(D, P)` via
//! [`Augmented::union_with`].

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExtraColumns};
use crate::error::{Error, Result};
use crate::neighbors::{KnnIndex, KnnOptions};

/// Per-example choice of how many nearest neighbors to mix with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPolicy {
    /// Index into `options` for every training example.
    choice: Vec<usize>,
    options: KnnOptions,
}

impl MixPolicy {
    pub fn new(choice: Vec<usize>, options: KnnOptions) -> Result<Self> {
        if let Some(bad) = choice.iter().find(|&&c| c >= options.len()) {
            return Err(Error::input(format!(
                "policy choice {bad} out of range for {} options",
                options.len()
            )));
        }
        Ok(Self { choice, options })
    }

    /// Every example uses option `option_index`.
    pub fn constant(len: usize, option_index: usize, options: KnnOptions) -> Result<Self> {
        Self::new(vec![option_index; len], options)
    }

    /// From explicit k values, each of which must be one of the options.
    pub fn from_ks(ks: &[usize], options: KnnOptions) -> Result<Self> {
        let choice = ks
            .iter()
            .map(|k| {
                options
                    .values()
                    .iter()
                    .position(|v| v == k)
                    .ok_or_else(|| Error::input(format!("k = {k} is not one of the kNN options")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(choice, options)
    }

    pub fn len(&self) -> usize {
        self.choice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choice.is_empty()
    }

    pub fn choices(&self) -> &[usize] {
        &self.choice
    }

    pub fn options(&self) -> &KnnOptions {
        &self.options
    }

    pub fn k(&self, i: usize) -> usize {
        self.options.values()[self.choice[i]]
    }

    pub fn ks(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.k(i)).collect()
    }

    pub fn total_mixes(&self) -> usize {
        (0..self.len()).map(|i| self.k(i)).sum()
    }

    /// `example_id,chosen_k,probability`. `probabilities` are the controller's
    /// probabilities of each chosen option, when known.
    pub fn save_csv(&self, path: &Path, probabilities: Option<&[f64]>) -> Result<()> {
        if probabilities.is_some_and(|p| p.len() != self.len()) {
            return Err(Error::input("probability column length does not match policy"));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["example_id", "chosen_k", "probability"])?;
        for i in 0..self.len() {
            let p = probabilities.map_or(String::new(), |p| p[i].to_string());
            w.write_record([i.to_string(), self.k(i).to_string(), p])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path, options: KnnOptions) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut ks = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parse = |col: usize, name: &str| -> Result<usize> {
                rec.get(col).and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    row: row + 2,
                    column: name.to_string(),
                    message: "expected a non-negative integer".into(),
                })
            };
            let id = parse(0, "example_id")?;
            if id != ks.len() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    row: row + 2,
                    column: "example_id".into(),
                    message: format!("expected example {} next, found {id}", ks.len()),
                });
            }
            ks.push(parse(1, "chosen_k")?);
        }
        Self::from_ks(&ks, options)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaMode {
    Fixed(f64),
    /// `lambda ~ Beta(alpha, alpha)`, drawn per mixed example.
    Beta(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub lambda: LambdaMode,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaMode::Fixed(0.5),
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        match self.lambda {
            LambdaMode::Fixed(l) if !(0.0..=1.0).contains(&l) => {
                Err(Error::input(format!("lambda must lie in [0, 1], got {l}")))
            }
            LambdaMode::Beta(a) if !(a > 0.0 && a.is_finite()) => {
                Err(Error::input(format!("Beta alpha must be positive, got {a}")))
            }
            _ => Ok(()),
        }
    }
}

/// Draws λ per call; fixed mode ignores the generator.
pub(crate) struct LambdaSampler {
    mode: LambdaMode,
    beta: Option<Beta<f64>>,
}

impl LambdaSampler {
    pub(crate) fn new(mode: LambdaMode) -> Result<Self> {
        MixConfig { lambda: mode }.validate()?;
        let beta = match mode {
            LambdaMode::Beta(a) => Some(Beta::new(a, a).map_err(|e| Error::input(e.to_string()))?),
            LambdaMode::Fixed(_) => None,
        };
        Ok(Self { mode, beta })
    }

    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match (self.mode, &self.beta) {
            (LambdaMode::Fixed(l), _) => l,
            (_, Some(b)) => b.sample(rng),
            _ => unreachable!("beta mode always carries a distribution"),
        }
    }
}

/// `(λ xi + (1-λ) xj, λ yi + (1-λ) yj)`
pub fn mix_pair(
    xi: ArrayView1<'_, f64>,
    yi: ArrayView1<'_, f64>,
    xj: ArrayView1<'_, f64>,
    yj: ArrayView1<'_, f64>,
    lambda: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if xi.len() != xj.len() || yi.len() != yj.len() {
        return Err(Error::input("mixed examples must have matching shapes"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let x = &xi * lambda + &xj * (1.0 - lambda);
    let y = &yi * lambda + &yj * (1.0 - lambda);
    Ok((x, y))
}

/// Where a synthetic row came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: usize,
    pub partner: usize,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub data: Dataset,
    pub provenance: Vec<Provenance>,
}

impl Augmented {
    fn build(base: &Dataset, pairs: Vec<Provenance>) -> Self {
        let n = pairs.len();
        let mut x = Array2::zeros((n, base.dim()));
        let mut y = Array2::zeros((n, base.label_dim()));
        for (r, p) in pairs.iter().enumerate() {
            let l = p.lambda;
            let xi = base.features.row(p.source);
            let xj = base.features.row(p.partner);
            x.row_mut(r).assign(&(&xi * l + &xj * (1.0 - l)));
            let yi = base.labels.row(p.source);
            let yj = base.labels.row(p.partner);
            y.row_mut(r).assign(&(&yi * l + &yj * (1.0 - l)));
        }
        let mut data = base.empty_like();
        data.features = x;
        data.labels = y;
        Self {
            data,
            provenance: pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// `base` rows followed by the synthetic rows.
    pub fn union_with(&self, base: &Dataset) -> Result<Dataset> {
        base.concat(&self.data)
    }

    /// Writes `base ∪ self` with `mix_source,mix_partner,mix_lambda` columns;
    /// original rows carry `(i, i, 1)`.
    pub fn write_union_csv(&self, base: &Dataset, path: &Path) -> Result<()> {
        let all = self.union_with(base)?;
        let mut rows: Vec<Vec<String>> = (0..base.len())
            .map(|i| vec![i.to_string(), i.to_string(), "1".to_string()])
            .collect();
        rows.extend(
            self.provenance
                .iter()
                .map(|p| vec![p.source.to_string(), p.partner.to_string(), p.lambda.to_string()]),
        );
        crate::data::write_csv(
            &all,
            path,
            Some(ExtraColumns {
                names: PROVENANCE_COLUMNS.iter().map(|s| s.to_string()).collect(),
                rows: &rows,
            }),
        )
    }
}

pub const PROVENANCE_COLUMNS: [&str; 3] = ["mix_source", "mix_partner", "mix_lambda"];

/// `Mix(D, P)`: example `i` is mixed once with each of its `k_i` nearest
/// neighbors, ordered by `(i, neighbor rank)`.
pub fn mix_with_policy(
    data: &Dataset,
    index: &KnnIndex,
    policy: &MixPolicy,
    cfg: &MixConfig,
    seed: u64,
) -> Result<Augmented> {
    if policy.len() != data.len() || index.len() != data.len() {
        return Err(Error::input(format!(
            "policy covers {} examples, index {}, dataset has {}",
            policy.len(),
            index.len(),
            data.len()
        )));
    }
    let sampler = LambdaSampler::new(cfg.lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(policy.total_mixes());
    for i in 0..data.len() {
        for &j in index.knn(i, policy.k(i))? {
            pairs.push(Provenance {
                source: i,
                partner: j,
                lambda: sampler.draw(&mut rng),
            });
        }
    }
    Ok(Augmented::build(data, pairs))
}

/// Original Mixup: `n_pairs` ordered pairs drawn uniformly with replacement,
/// `λ ~ Beta(α, α)` per pair.
pub fn original_mixup(data: &Dataset, n_pairs: usize, alpha: f64, seed: u64) -> Result<Augmented> {
    if n_pairs == 0 {
        return Err(Error::input("original mixup needs n_pairs >= 1"));
    }
    if data.is_empty() {
        return Err(Error::input("cannot mix an empty dataset"));
    }
    let sampler = LambdaSampler::new(LambdaMode::Beta(alpha))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = data.len();
    let pairs = (0..n_pairs)
        .map(|_| {
            let source = rng.random_range(0..s);
            let partner = rng.random_range(0..s);
            Provenance {
                source,
                partner,
                lambda: sampler.draw(&mut rng),
            }
        })
        .collect();
    Ok(Augmented::build(data, pairs))
}

/// A distance interval `[lo, hi)`, or `[lo, hi]` when `closed` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub closed: bool,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::input(format!("band needs lo < hi, got [{lo}, {hi})")));
        }
        Ok(Self { lo, hi, closed: false })
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.lo && (d < self.hi || (self.closed && d == self.hi))
    }

    /// `n` equal-width bands covering `[0, 1]`, the last one closed.
    pub fn uniform(n: usize) -> Result<Vec<Band>> {
        Self::from_edges(&(0..=n).map(|i| i as f64 / n as f64).collect::<Vec<_>>())
    }

    /// Consecutive bands between sorted edges; the last is closed.
    pub fn from_edges(edges: &[f64]) -> Result<Vec<Band>> {
        if edges.len() < 2 {
            return Err(Error::input("need at least two band edges"));
        }
        let mut bands = edges.windows(2).map(|w| Band::new(w[0], w[1])).collect::<Result<Vec<_>>>()?;
        if let Some(last) = bands.last_mut() {
            last.closed = true;
        }
        Ok(bands)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceScale {
    Raw,
    /// Divide by the largest pairwise distance in the dataset.
    NormalizedByMax,
}

/// One mix per unordered pair whose (optionally normalized) distance falls in `band`.
pub fn mix_distance_band(
    data: &Dataset,
    index: &KnnIndex,
    band: &Band,
    scale: DistanceScale,
    lambda: f64,
) -> Result<Augmented> {
    if index.len() != data.len() {
        return Err(Error::input("index does not match dataset"));
    }
    if !(band.lo < band.hi) {
        return Err(Error::input("band needs lo < hi"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let norm = match scale {
        DistanceScale::Raw => 1.0,
        DistanceScale::NormalizedByMax => index.max_distance(),
    };
    let pairs = index
        .pairs()
        .into_iter()
        .filter(|&(_, _, d)| norm > 0.0 && band.contains(d / norm))
        .map(|(i, j, _)| Provenance {
            source: i,
            partner: j,
            lambda,
        })
        .collect();
    Ok(Augmented::build(data, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn line_data() -> (Dataset, KnnIndex) {
        let d = Dataset::new(array![[0.0], [1.0], [2.0]], array![[0.0], [1.0], [2.0]]).unwrap();
        let idx = KnnIndex::build(&d).unwrap();
        (d, idx)
    }

    #[test]
    fn mix_pair_examples() {
        let (x, y) = mix_pair(
            array![0.0, 0.0].view(),
            array![0.0].view(),
            array![2.0, 2.0].view(),
            array![4.0].view(),
            0.5,
        )
        .unwrap();
        assert_eq!(x, array![1.0, 1.0]);
        assert_eq!(y, array![2.0]);
        let (x, y) = mix_pair(array![3.0].view(), array![1.0].view(), array![9.0].view(), array![2.0].view(), 1.0).unwrap();
        assert_eq!((x, y), (array![3.0], array![1.0]));
        assert!(mix_pair(array![1.0].view(), array![1.0].view(), array![1.0, 2.0].view(), array![1.0].view(), 0.5).is_err());
    }

    #[test]
    fn zero_policy_emits_nothing() {
        let (d, idx) = line_data();
        let opts = KnnOptions::new(vec![0, 1, 2]).unwrap();
        let p = MixPolicy::constant(3, 0, opts).unwrap();
        assert!(mix_with_policy(&d, &idx, &p, &MixConfig::default(), 0).unwrap().is_empty());
    }

    #[test]
    fn single_neighbor_mix_on_a_line() {
        let (d, idx) = line_data();
        let opts = KnnOptions::new(vec![0, 1]).unwrap();
        let p = MixPolicy::from_ks(&[1, 0, 0], opts).unwrap();
        let aug = mix_with_policy(&d, &idx, &p, &MixConfig::default(), 0).unwrap();
        assert_eq!(aug.data.features, array![[0.5]]);
        assert_eq!(aug.data.labels, array![[0.5]]);
        assert_eq!(aug.union_with(&d).unwrap().len(), 4);
    }

    #[test]
    fn policy_validates_choices() {
        let opts = KnnOptions::new(vec![0, 1]).unwrap();
        assert!(MixPolicy::new(vec![0, 2], opts.clone()).is_err());
        assert!(MixPolicy::from_ks(&[3], opts).is_err());
    }

    #[test]
    fn beta_one_lambda_is_uniform() {
        let sampler = LambdaSampler::new(LambdaMode::Beta(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mean = (0..10_000).map(|_| sampler.draw(&mut rng)).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn two_point_mixup_stays_on_segment() {
        let d = Dataset::new(array![[0.0, 1.0], [2.0, 5.0]], array![[1.0], [3.0]]).unwrap();
        let aug = original_mixup(&d, 200, 0.4, 3).unwrap();
        for (x, y) in aug.data.features.outer_iter().zip(aug.data.labels.outer_iter()) {
            let t = x[0] / 2.0;
            assert!((0.0..=1.0).contains(&t));
            assert!((x[1] - (1.0 + 4.0 * t)).abs() < 1e-12);
            assert!((y[0] - (1.0 + 2.0 * t)).abs() < 1e-12);
        }
        assert!(original_mixup(&d, 0, 1.0, 0).is_err());
    }

    #[test]
    fn fixed_half_mixup_gives_midpoints() {
        let (d, idx) = line_data();
        let all = mix_distance_band(&d, &idx, &Band::new(0.0, 10.0).unwrap(), DistanceScale::Raw, 0.5).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all.data.features, array![[0.5], [1.0], [1.5]]);
    }

    #[test]
    fn band_edges() {
        let (d, idx) = line_data();
        let empty = mix_distance_band(&d, &idx, &Band::new(0.0, 1.0).unwrap(), DistanceScale::Raw, 0.5).unwrap();
        assert!(empty.is_empty());
        let bands = Band::uniform(2).unwrap();
        let far = mix_distance_band(&d, &idx, &bands[1], DistanceScale::NormalizedByMax, 0.5).unwrap();
        // distances 1, 1, 2 normalize to 0.5, 0.5, 1.0; the closed last band takes all three
        assert_eq!(far.len(), 3);
        assert!(Band::new(1.0, 1.0).is_err());
    }

    #[test]
    fn policy_csv_round_trip() {
        let opts = KnnOptions::new(vec![0, 2, 4]).unwrap();
        let p = MixPolicy::from_ks(&[0, 4, 2, 2], opts.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.csv");
        p.save_csv(&path, Some(&[0.5, 0.25, 1.0, 0.75])).unwrap();
        assert_eq!(MixPolicy::load_csv(&path, opts).unwrap(), p);
    }
}
