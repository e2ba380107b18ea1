//! Reference and stochastic domain-discrepancy estimators.
//!
//! The reference values are full-data quantities: the squared RKHS distance
//! between domain mean embeddings, and the squared Frobenius distance
//! between domain covariances. The stochastic estimators evaluate the same
//! quantities from one minibatch holding a single sample per stratum, with
//! each sample weighted by its stratum size so the weighted mean embedding
//! stays unbiased. Plain subsample estimators are included as the
//! unstratified baseline.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{eval_raw, prepared_inputs, KernelSpec};
use crate::parallel::map_indexed;
use crate::stratify::Stratification;
use crate::types::FeatureSet;
use crate::util::{kahan_total, KahanSum};

pub use crate::types::Domain;

/// One sample index per stratum plus the containing stratum's size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawWeightedBatch")]
pub struct WeightedBatch {
    indices: Vec<usize>,
    weights: Vec<usize>,
}

#[derive(Deserialize)]
struct RawWeightedBatch {
    indices: Vec<usize>,
    weights: Vec<usize>,
}

impl TryFrom<RawWeightedBatch> for WeightedBatch {
    type Error = Error;

    fn try_from(raw: RawWeightedBatch) -> Result<Self> {
        WeightedBatch::new(raw.indices, raw.weights)
    }
}

impl WeightedBatch {
    pub fn new(indices: Vec<usize>, weights: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidConfig("batch is empty".into()));
        }
        if indices.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                left: indices.len(),
                right: weights.len(),
            });
        }
        if weights.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("batch weights must be positive".into()));
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("batch indices must be distinct".into()));
        }
        Ok(Self { indices, weights })
    }

    /// Batch for a stratification: entry h is the drawn index for stratum h,
    /// weighted by that stratum's size.
    pub fn from_draws(strat: &Stratification, drawn: &[usize]) -> Result<Self> {
        if drawn.len() != strat.k() {
            return Err(Error::DimensionMismatch {
                left: drawn.len(),
                right: strat.k(),
            });
        }
        for (h, &i) in drawn.iter().enumerate() {
            if i >= strat.n() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: strat.n(),
                });
            }
            if strat.stratum_of(i) != h {
                return Err(Error::InvalidConfig(format!(
                    "index {i} drawn for stratum {h} but belongs to stratum {}",
                    strat.stratum_of(i)
                )));
            }
        }
        Self::new(drawn.to_vec(), strat.sizes().to_vec())
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[usize] {
        &self.weights
    }

    fn check_against(&self, fs: &FeatureSet) -> Result<()> {
        for &i in &self.indices {
            if i >= fs.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: fs.len(),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn replace_index(&mut self, position: usize, index: usize) {
        self.indices[position] = index;
    }
}

/// Reference value plus per-minibatch estimates and their squared errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub reference: f64,
    pub estimates: Vec<f64>,
    pub squared_errors: Vec<f64>,
    pub mean_squared_error: f64,
}

impl DiscrepancyReport {
    pub fn new(reference: f64, estimates: Vec<f64>) -> Self {
        let squared_errors: Vec<f64> = estimates
            .iter()
            .map(|e| (e - reference) * (e - reference))
            .collect();
        let mean_squared_error = if squared_errors.is_empty() {
            0.0
        } else {
            kahan_total(squared_errors.iter().copied()) / squared_errors.len() as f64
        };
        Self {
            reference,
            estimates,
            squared_errors,
            mean_squared_error,
        }
    }
}

/// Clamps a squared-norm expansion: tiny negative values are cancellation
/// noise; anything beyond the guard band indicates a broken invariant.
fn clamp_squared_norm(v: f64, scale: f64) -> f64 {
    debug_assert!(
        v >= -1e-10 * scale.max(1.0),
        "squared norm {v} below the cancellation guard (scale {scale})"
    );
    v.max(0.0)
}

/// Full-data squared RKHS distance between the two domain mean embeddings.
pub fn reference_mmd(spec: &KernelSpec, source: &FeatureSet, target: &FeatureSet) -> Result<f64> {
    spec.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            left: source.dim(),
            right: target.dim(),
        });
    }
    let s = prepared_inputs(spec, source);
    let t = prepared_inputs(spec, target);
    let ss = pairwise_mean(spec, &s, &s);
    let tt = pairwise_mean(spec, &t, &t);
    let st = pairwise_mean(spec, &s, &t);
    let scale = ss.abs() + tt.abs() + 2.0 * st.abs();
    Ok(clamp_squared_norm(ss + tt - 2.0 * st, scale))
}

/// (1/(|A| |B|)) sum over all cross pairs of kernel values.
fn pairwise_mean(spec: &KernelSpec, a: &FeatureSet, b: &FeatureSet) -> f64 {
    let row_sums = map_indexed(a.len(), |i| {
        let ra = a.row(i);
        let mut acc = KahanSum::default();
        for j in 0..b.len() {
            acc.add(eval_raw(spec, ra, b.row(j)));
        }
        acc.value()
    });
    kahan_total(row_sums) / (a.len() as f64 * b.len() as f64)
}

/// Weighted single-sample-per-stratum estimate of the squared RKHS distance.
///
/// Each batch entry stands in for its whole stratum, so pair (p, q)
/// contributes w_p w_q kernel values and the prefactors stay the full-data
/// 1/n^2 ones.
pub fn stochastic_mmd(
    spec: &KernelSpec,
    source: &FeatureSet,
    target: &FeatureSet,
    batch_s: &WeightedBatch,
    batch_t: &WeightedBatch,
) -> Result<f64> {
    spec.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            left: source.dim(),
            right: target.dim(),
        });
    }
    batch_s.check_against(source)?;
    batch_t.check_against(target)?;
    let s = prepared_inputs(spec, source);
    let t = prepared_inputs(spec, target);
    let (ns, nt) = (s.len() as f64, t.len() as f64);
    let ss = weighted_pair_sum(spec, &s, batch_s, &s, batch_s) / (ns * ns);
    let tt = weighted_pair_sum(spec, &t, batch_t, &t, batch_t) / (nt * nt);
    let st = weighted_pair_sum(spec, &s, batch_s, &t, batch_t) / (ns * nt);
    let scale = ss.abs() + tt.abs() + 2.0 * st.abs();
    Ok(clamp_squared_norm(ss + tt - 2.0 * st, scale))
}

fn weighted_pair_sum(
    spec: &KernelSpec,
    a: &FeatureSet,
    ba: &WeightedBatch,
    b: &FeatureSet,
    bb: &WeightedBatch,
) -> f64 {
    let mut total = KahanSum::default();
    for (&p, &wp) in ba.indices().iter().zip(ba.weights()) {
        let rp = a.row(p);
        let mut row = KahanSum::default();
        for (&q, &wq) in bb.indices().iter().zip(bb.weights()) {
            row.add(wp as f64 * wq as f64 * eval_raw(spec, rp, b.row(q)));
        }
        total.add(row.value());
    }
    total.value()
}

/// Full-data squared Frobenius distance between domain covariances, both
/// with the 1/(n-1) normalizer.
pub fn reference_coral(source: &FeatureSet, target: &FeatureSet) -> Result<f64> {
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            left: source.dim(),
            right: target.dim(),
        });
    }
    let cs = source.covariance()?;
    let ct = target.covariance()?;
    Ok(frobenius_sq_diff(&cs, &ct))
}

fn frobenius_sq_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut acc = KahanSum::default();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc.add(d * d);
    }
    acc.value()
}

/// Weighted single-sample-per-stratum estimate of the covariance distance.
///
/// The weighted batch mean uses the 1/n prefactor of the full-data mean and
/// the covariances keep the 1/(n-1) normalizer.
pub fn stochastic_coral(
    source: &FeatureSet,
    target: &FeatureSet,
    batch_s: &WeightedBatch,
    batch_t: &WeightedBatch,
) -> Result<f64> {
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            left: source.dim(),
            right: target.dim(),
        });
    }
    batch_s.check_against(source)?;
    batch_t.check_against(target)?;
    let cs = weighted_batch_covariance(source, batch_s)?;
    let ct = weighted_batch_covariance(target, batch_t)?;
    Ok(frobenius_sq_diff(&cs, &ct))
}

pub(crate) fn weighted_batch_covariance(
    fs: &FeatureSet,
    batch: &WeightedBatch,
) -> Result<Array2<f64>> {
    let n = fs.len();
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    let d = fs.dim();
    let mut mu = vec![0.0f64; d];
    for (&i, &w) in batch.indices().iter().zip(batch.weights()) {
        let row = fs.row(i);
        for (m, v) in mu.iter_mut().zip(row) {
            *m += w as f64 * v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = Array2::zeros((d, d));
    for (&i, &w) in batch.indices().iter().zip(batch.weights()) {
        let row = fs.row(i);
        for a in 0..d {
            let da = row[a] - mu[a];
            for b in 0..d {
                cov[(a, b)] += w as f64 * da * (row[b] - mu[b]);
            }
        }
    }
    cov /= (n - 1) as f64;
    Ok(cov)
}

/// Plain subsample estimate of the squared RKHS distance: the minibatch is
/// treated as the whole dataset. With the covariance-map kernel, centering
/// uses the subsample means.
pub fn minibatch_mmd(
    spec: &KernelSpec,
    source: &FeatureSet,
    target: &FeatureSet,
    idx_s: &[usize],
    idx_t: &[usize],
) -> Result<f64> {
    let s = subsample(source, idx_s)?;
    let t = subsample(target, idx_t)?;
    reference_mmd(spec, &s, &t)
}

/// Plain subsample estimate of the covariance distance.
pub fn minibatch_coral(
    source: &FeatureSet,
    target: &FeatureSet,
    idx_s: &[usize],
    idx_t: &[usize],
) -> Result<f64> {
    let s = subsample(source, idx_s)?;
    let t = subsample(target, idx_t)?;
    reference_coral(&s, &t)
}

fn subsample(fs: &FeatureSet, indices: &[usize]) -> Result<FeatureSet> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("subsample is empty".into()));
    }
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= fs.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: fs.len(),
            });
        }
        rows.push(fs.row(i).to_vec());
    }
    FeatureSet::from_rows(rows, fs.domain())
}
