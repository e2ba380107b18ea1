use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the adaptation problem a feature set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// A dense n x d matrix of feature vectors tagged with its domain.
///
/// Rows are samples. All entries are finite; construction rejects NaN and
/// infinities so downstream numerics never have to re-check.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    data: Array2<f64>,
    domain: Domain,
}

impl FeatureSet {
    pub fn new(data: Array2<f64>, domain: Domain) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidFeatures(format!(
                "shape {n}x{d}: need at least one row and one column"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatures(
                "non-finite entry (NaN or infinity)".into(),
            ));
        }
        Ok(Self { data, domain })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, domain: Domain) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidFeatures("no rows".into()));
        }
        let d = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidFeatures(format!(
                    "row {i} has {} columns, expected {d}",
                    row.len()
                )));
            }
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let data = Array2::from_shape_vec((n, d), flat)
            .expect("row-major buffer matches declared shape");
        Self::new(data, domain)
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Row i as a contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        let flat = self
            .data
            .as_slice()
            .expect("feature storage is contiguous row-major");
        &flat[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    /// Mean feature vector over all samples.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let d = self.dim();
        let mut mu = vec![0.0; d];
        for row in self.rows() {
            for (m, v) in mu.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mu {
            *m /= n;
        }
        mu
    }

    /// Sample covariance with the 1/(n-1) normalizer. Requires n >= 2.
    pub fn covariance(&self) -> Result<Array2<f64>> {
        let n = self.len();
        if n < 2 {
            return Err(Error::TooFewSamples { need: 2, got: n });
        }
        let d = self.dim();
        let mu = self.mean();
        let mut cov = Array2::zeros((d, d));
        for row in self.rows() {
            for a in 0..d {
                let da = row[a] - mu[a];
                for b in 0..d {
                    cov[(a, b)] += da * (row[b] - mu[b]);
                }
            }
        }
        cov /= (n - 1) as f64;
        Ok(cov)
    }

    /// Copy with every row shifted by -center. Used by the covariance-map
    /// kernel, which is defined on centered inputs.
    pub(crate) fn centered(&self, center: &[f64]) -> FeatureSet {
        let mut data = self.data.clone();
        for mut row in data.rows_mut() {
            for (v, c) in row.iter_mut().zip(center) {
                *v -= c;
            }
        }
        FeatureSet {
            data,
            domain: self.domain,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(FeatureSet::from_rows(vec![], Domain::Source).is_err());
        assert!(FeatureSet::new(arr2(&[[1.0, f64::NAN]]), Domain::Source).is_err());
        assert!(FeatureSet::new(arr2(&[[1.0, f64::INFINITY]]), Domain::Target).is_err());
    }

    #[test]
    fn rejects_ragged_rows() {
        let rows = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(FeatureSet::from_rows(rows, Domain::Source).is_err());
    }

    #[test]
    fn row_access_and_mean() {
        let fs = FeatureSet::from_rows(
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            Domain::Source,
        )
        .unwrap();
        assert_eq!(fs.len(), 2);
        assert_eq!(fs.dim(), 2);
        assert_eq!(fs.row(1), &[3.0, 4.0]);
        assert_eq!(fs.mean(), vec![2.0, 3.0]);
    }

    #[test]
    fn covariance_matches_hand_computation() {
        // Rows (0,0), (2,0), (0,2): mean (2/3, 2/3).
        let fs = FeatureSet::from_rows(
            vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]],
            Domain::Source,
        )
        .unwrap();
        let c = fs.covariance().unwrap();
        // Var(x) = ((2/3)^2 + (4/3)^2 + (2/3)^2) / 2 = 4/3.
        assert!((c[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        assert!((c[(1, 1)] - 4.0 / 3.0).abs() < 1e-12);
        // Cov(x,y) = ((-2/3)(-2/3) + (4/3)(-2/3) + (-2/3)(4/3)) / 2 = -2/3.
        assert!((c[(0, 1)] + 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c[(0, 1)], c[(1, 0)]);
    }

    #[test]
    fn covariance_needs_two_samples() {
        let fs = FeatureSet::from_rows(vec![vec![1.0]], Domain::Source).unwrap();
        assert!(matches!(
            fs.covariance(),
            Err(Error::TooFewSamples { need: 2, got: 1 })
        ));
    }
}
