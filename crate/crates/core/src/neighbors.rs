//! Exact Euclidean k-nearest-neighbor index and kNN option menus.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// For every example, all other examples sorted by ascending distance
/// (ties by ascending index).
#[derive(Clone, Debug, PartialEq)]
pub struct KnnIndex {
    neighbor_ids: Vec<Vec<usize>>,
    distances: Vec<Vec<f64>>,
}

impl KnnIndex {
    pub fn build(data: &Dataset) -> Result<Self> {
        Self::from_features(&data.features)
    }

    pub fn from_features(x: &Array2<f64>) -> Result<Self> {
        let s = x.nrows();
        if s < 2 {
            return Err(Error::input(format!("a kNN index needs at least 2 examples, got {s}")));
        }
        // upper triangle once, mirrored, so dist(a, b) == dist(b, a) bit for bit
        let mut dist = vec![0.0; s * s];
        let upper: Vec<Vec<f64>> = (0..s)
            .into_par_iter()
            .map(|a| ((a + 1)..s).map(|b| euclidean(x.row(a), x.row(b))).collect())
            .collect();
        for (a, row) in upper.iter().enumerate() {
            for (off, &d) in row.iter().enumerate() {
                let b = a + 1 + off;
                dist[a * s + b] = d;
                dist[b * s + a] = d;
            }
        }
        let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..s)
            .into_par_iter()
            .map(|i| {
                let mut ids: Vec<usize> = (0..s).filter(|&j| j != i).collect();
                ids.sort_by(|&a, &b| dist[i * s + a].total_cmp(&dist[i * s + b]).then(a.cmp(&b)));
                let ds = ids.iter().map(|&j| dist[i * s + j]).collect();
                (ids, ds)
            })
            .collect();
        let (neighbor_ids, distances) = rows.into_iter().unzip();
        Ok(Self {
            neighbor_ids,
            distances,
        })
    }

    pub fn len(&self) -> usize {
        self.neighbor_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbor_ids[i]
    }

    pub fn row_distances(&self, i: usize) -> &[f64] {
        &self.distances[i]
    }

    /// The `k` nearest neighbors of example `i`.
    pub fn knn(&self, i: usize, k: usize) -> Result<&[usize]> {
        if i >= self.len() {
            return Err(Error::input(format!("example {i} out of range for {} examples", self.len())));
        }
        if k > self.len() - 1 {
            return Err(Error::input(format!("k = {k} exceeds S - 1 = {}", self.len() - 1)));
        }
        Ok(&self.neighbor_ids[i][..k])
    }

    /// Every unordered pair `(i, j, distance)` with `i < j`, ordered by `(i, j)`.
    pub fn pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.len() * (self.len() - 1) / 2);
        for i in 0..self.len() {
            let mut row: Vec<(usize, f64)> = self.neighbor_ids[i]
                .iter()
                .zip(&self.distances[i])
                .filter(|(&j, _)| j > i)
                .map(|(&j, &d)| (j, d))
                .collect();
            row.sort_by_key(|&(j, _)| j);
            out.extend(row.into_iter().map(|(j, d)| (i, j, d)));
        }
        out
    }

    pub fn max_distance(&self) -> f64 {
        self.distances
            .iter()
            .filter_map(|r| r.last().copied())
            .fold(0.0, f64::max)
    }

    /// Writes `example,rank,neighbor,distance` rows after a `# sha256=` line
    /// identifying the feature matrix.
    pub fn save_cache(&self, path: &Path, feature_hash: &str) -> Result<()> {
        let mut out = format!("# sha256={feature_hash}\nexample,rank,neighbor,distance\n");
        for (i, (ids, ds)) in self.neighbor_ids.iter().zip(&self.distances).enumerate() {
            for (rank, (j, d)) in ids.iter().zip(ds).enumerate() {
                out.push_str(&format!("{i},{rank},{j},{d}\n"));
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache written by [`KnnIndex::save_cache`]; `None` when it was
    /// built for different features.
    pub fn load_cache(path: &Path, feature_hash: &str) -> Result<Option<Self>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let Some(first) = text.lines().next() else {
            return Ok(None);
        };
        if first.trim() != format!("# sha256={feature_hash}") {
            return Ok(None);
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut neighbor_ids: Vec<Vec<usize>> = Vec::new();
        let mut distances: Vec<Vec<f64>> = Vec::new();
        for rec in reader.deserialize::<(usize, usize, usize, f64)>() {
            let (i, rank, j, d) = rec?;
            if i == neighbor_ids.len() {
                neighbor_ids.push(Vec::new());
                distances.push(Vec::new());
            }
            if i + 1 != neighbor_ids.len() || rank != neighbor_ids[i].len() {
                return Err(Error::input(format!("{} is not a well-formed index cache", path.display())));
            }
            neighbor_ids[i].push(j);
            distances[i].push(d);
        }
        Ok(Some(Self {
            neighbor_ids,
            distances,
        }))
    }
}

/// SHA-256 over the feature matrix shape and raw bits.
pub fn feature_hash(x: &Array2<f64>) -> String {
    let mut h = Sha256::new();
    h.update((x.nrows() as u64).to_le_bytes());
    h.update((x.ncols() as u64).to_le_bytes());
    for v in x.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// The menu of k values a policy may pick from. Always starts at 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct KnnOptions {
    values: Vec<usize>,
}

impl KnnOptions {
    pub fn new(values: Vec<usize>) -> Result<Self> {
        if values.first() != Some(&0) {
            return Err(Error::input("kNN options must start with 0"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("kNN options must be strictly increasing"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.values.last().expect("options are never empty")
    }

    /// Checks that every option is usable on a training set of `s` examples.
    pub fn check_cap(&self, s: usize) -> Result<()> {
        if self.max() + 1 > s {
            return Err(Error::input(format!(
                "largest kNN option {} exceeds S - 1 = {}",
                self.max(),
                s.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for KnnOptions {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        KnnOptions::new(v)
    }
}

impl From<KnnOptions> for Vec<usize> {
    fn from(o: KnnOptions) -> Self {
        o.values
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "series", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptionSeries {
    /// `{0} ∪ {base^i | i in [0, max_exp]}`
    Exponential { base: usize, max_exp: u32 },
    /// `{0} ∪ {step * i | i in [1, count]}`
    Linear { step: usize, count: usize },
    Explicit { values: Vec<usize> },
}

/// Generates the series, clips it at `cap` (normally `S - 1`), dedups and sorts.
pub fn option_series(series: &OptionSeries, cap: usize) -> Result<KnnOptions> {
    let mut values: Vec<usize> = match series {
        OptionSeries::Exponential { base, max_exp } => {
            if *base < 2 {
                return Err(Error::input("exponential series needs base >= 2"));
            }
            (0..=*max_exp).filter_map(|i| base.checked_pow(i)).collect()
        }
        OptionSeries::Linear { step, count } => {
            if *step == 0 || *count == 0 {
                return Err(Error::input("linear series needs positive step and count"));
            }
            (1..=*count).map(|i| step * i).collect()
        }
        OptionSeries::Explicit { values } => values.clone(),
    };
    values.retain(|&v| v > 0 && v <= cap);
    if values.is_empty() {
        return Err(Error::input(format!("no nonzero kNN option survives the cap of {cap}")));
    }
    values.push(0);
    values.sort_unstable();
    values.dedup();
    KnnOptions::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_dimensional_neighbors() {
        let idx = KnnIndex::from_features(&array![[0.0], [1.0], [3.0], [7.0]]).unwrap();
        assert_eq!(idx.row(0), &[1, 2, 3]);
        assert_eq!(idx.row_distances(0), &[1.0, 3.0, 7.0]);
        assert_eq!(idx.row(2), &[1, 0, 3]);
    }

    #[test]
    fn duplicates_tie_by_index() {
        let idx = KnnIndex::from_features(&array![[1.0], [5.0], [1.0], [1.0]]).unwrap();
        assert_eq!(idx.row(2), &[0, 3, 1]);
        assert_eq!(idx.row_distances(2)[..2], [0.0, 0.0]);
    }

    #[test]
    fn knn_bounds() {
        let idx = KnnIndex::from_features(&array![[0.0], [1.0], [3.0]]).unwrap();
        assert!(idx.knn(1, 0).unwrap().is_empty());
        assert_eq!(idx.knn(1, 2).unwrap(), &[0, 2]);
        assert!(idx.knn(1, 3).is_err());
        assert!(KnnIndex::from_features(&array![[0.0]]).is_err());
    }

    #[test]
    fn series_examples() {
        let e = |b, m| option_series(&OptionSeries::Exponential { base: b, max_exp: m }, 10_000).unwrap();
        assert_eq!(e(2, 7).values(), &[0, 1, 2, 4, 8, 16, 32, 64, 128]);
        assert_eq!(e(4, 4).values(), &[0, 1, 4, 16, 64, 256]);
        let lin = option_series(&OptionSeries::Linear { step: 10, count: 19 }, 10_000).unwrap();
        let expected: Vec<usize> = (0..=19).map(|i| 10 * i).collect();
        assert_eq!(lin.values(), expected.as_slice());
    }

    #[test]
    fn series_clips_at_cap() {
        let o = option_series(&OptionSeries::Exponential { base: 2, max_exp: 7 }, 39).unwrap();
        assert_eq!(o.values(), &[0, 1, 2, 4, 8, 16, 32]);
        assert!(option_series(&OptionSeries::Linear { step: 50, count: 2 }, 10).is_err());
    }

    #[test]
    fn options_validate() {
        assert!(KnnOptions::new(vec![1, 2]).is_err());
        assert!(KnnOptions::new(vec![0, 2, 2]).is_err());
        assert!(serde_json::from_str::<KnnOptions>("[0, 4, 2]").is_err());
        let o: KnnOptions = serde_json::from_str("[0, 2, 4]").unwrap();
        assert!(o.check_cap(5).is_ok());
        assert!(o.check_cap(4).is_err());
    }

    #[test]
    fn cache_round_trip_and_hash_mismatch() {
        let x = array![[0.0, 1.0], [2.0, 2.0], [5.0, -1.0]];
        let idx = KnnIndex::from_features(&x).unwrap();
        let h = feature_hash(&x);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("idx.csv");
        idx.save_cache(&p, &h).unwrap();
        assert_eq!(KnnIndex::load_cache(&p, &h).unwrap(), Some(idx));
        assert_eq!(KnnIndex::load_cache(&p, "other").unwrap(), None);
    }
}
