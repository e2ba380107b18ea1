//! Kernel evaluations and Gram matrices.
//!
//! Three kernels cover the discrepancy estimators: the linear kernel, a
//! mixture of RBF kernels summed over a bandwidth grid, and the
//! covariance-map kernel whose feature map sends a centered vector to its
//! outer product. For the covariance map the Frobenius inner product of two
//! mapped vectors collapses to the squared dot product of the centered
//! inputs, so Gram construction never materializes d x d blocks.

use std::borrow::Cow;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::types::FeatureSet;
use crate::util::{dot, squared_distance};

/// Bandwidth grid used when no explicit mixture is configured.
pub const DEFAULT_RBF_GAMMAS: [f64; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// k(a, b) = <a, b>.
    Linear,
    /// k(a, b) = sum_g exp(-g * |a - b|^2) over the bandwidth grid.
    RbfMixture { gammas: Vec<f64> },
    /// k(a, b) = <a, b>^2 on centered inputs; the feature map is the outer
    /// product of the centered vector. [`gram`] centers each side by its own
    /// set mean before evaluating.
    CoralMap,
}

impl KernelSpec {
    pub fn rbf_mixture_default() -> Self {
        KernelSpec::RbfMixture {
            gammas: DEFAULT_RBF_GAMMAS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let KernelSpec::RbfMixture { gammas } = self {
            if gammas.is_empty() {
                return Err(Error::InvalidKernel("RBF mixture needs at least one bandwidth".into()));
            }
            if let Some(g) = gammas.iter().find(|g| !g.is_finite() || **g <= 0.0) {
                return Err(Error::InvalidKernel(format!(
                    "RBF bandwidth {g} is not a positive finite number"
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelSpec::Linear => write!(f, "linear"),
            KernelSpec::RbfMixture { gammas } => write!(f, "rbf_mixture{gammas:?}"),
            KernelSpec::CoralMap => write!(f, "coral_map"),
        }
    }
}

pub(crate) fn eval_raw(spec: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    match spec {
        KernelSpec::Linear => dot(a, b),
        KernelSpec::RbfMixture { gammas } => {
            let sq = squared_distance(a, b);
            gammas.iter().map(|g| (-g * sq).exp()).sum()
        }
        KernelSpec::CoralMap => {
            let ip = dot(a, b);
            ip * ip
        }
    }
}

/// Evaluates the kernel on a single pair of vectors.
///
/// For [`KernelSpec::CoralMap`] the caller is responsible for centering; the
/// value is the Frobenius inner product of the outer-product maps of `a` and
/// `b` as-is.
pub fn eval_kernel(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    spec.validate()?;
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidFeatures("zero-dimensional input".into()));
    }
    Ok(eval_raw(spec, a, b))
}

/// Feature map of the covariance-map kernel: (z - mean)(z - mean)^T.
pub fn coral_map(z: &[f64], mean: &[f64]) -> Result<Array2<f64>> {
    if z.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            left: z.len(),
            right: mean.len(),
        });
    }
    let d = z.len();
    if d == 0 {
        return Err(Error::InvalidFeatures("zero-dimensional input".into()));
    }
    let centered: Vec<f64> = z.iter().zip(mean).map(|(v, m)| v - m).collect();
    let mut out = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            out[(i, j)] = centered[i] * centered[j];
        }
    }
    Ok(out)
}

/// Dense kernel matrix between two feature sets.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    values: Array2<f64>,
}

impl GramMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.n_rows() == self.n_cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Row i as a contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_cols();
        let flat = self
            .values
            .as_slice()
            .expect("gram storage is contiguous row-major");
        &flat[i * w..(i + 1) * w]
    }
}

/// Centers a set by its own mean when the kernel demands it.
pub(crate) fn prepared_inputs<'a>(spec: &KernelSpec, fs: &'a FeatureSet) -> Cow<'a, FeatureSet> {
    match spec {
        KernelSpec::CoralMap => Cow::Owned(fs.centered(&fs.mean())),
        _ => Cow::Borrowed(fs),
    }
}

/// Kernel matrix with `rows` indexing the first set and `cols` the second.
///
/// Evaluating the same set on both sides yields an exactly symmetric matrix
/// because each entry's arithmetic is order-independent.
pub fn gram(spec: &KernelSpec, rows: &FeatureSet, cols: &FeatureSet) -> Result<GramMatrix> {
    spec.validate()?;
    if rows.dim() != cols.dim() {
        return Err(Error::DimensionMismatch {
            left: rows.dim(),
            right: cols.dim(),
        });
    }
    let a = prepared_inputs(spec, rows);
    let b = prepared_inputs(spec, cols);
    let (n, m) = (a.len(), b.len());
    let row_values = map_indexed(n, |i| {
        let ri = a.row(i);
        let mut out = Vec::with_capacity(m);
        for j in 0..m {
            out.push(eval_raw(spec, ri, b.row(j)));
        }
        out
    });
    let flat: Vec<f64> = row_values.into_iter().flatten().collect();
    let values =
        Array2::from_shape_vec((n, m), flat).expect("row buffers match declared shape");
    Ok(GramMatrix { values })
}
