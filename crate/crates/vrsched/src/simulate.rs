//! Monte Carlo harness comparing minibatch samplers by estimator variance,
//! plus the minimum-size study for the constrained assignment heuristics.
//!
//! Three samplers are measured. `Uniform` draws each minibatch uniformly
//! from the full data. `Stratified` draws one member per stratum,
//! independently per minibatch, and applies the size-weighted estimators.
//! `Ordered` draws M-blocks per stratum and greedily reorders them so every
//! minibatch estimate tracks the full-data reference.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::discrepancy::{
    minibatch_coral, minibatch_mmd, reference_coral, reference_mmd, stochastic_coral,
    stochastic_mmd, WeightedBatch,
};
use crate::error::{Error, Result};
use crate::kernel::{gram, GramMatrix, KernelSpec};
use crate::parallel;
use crate::schedule::{
    draw_tuples, greedy_reorder_with_reference, LossKind, ReplacementMode,
};
use crate::seed::{mix_stream, stream_rng};
use crate::stratify::{
    clustering_objective, kernel_kmeans, AssignmentRule, IterationOptions, Stratification,
};
use crate::types::{Domain, FeatureSet};
use crate::util::KahanSum;

const STREAM_DATA: u64 = 11;
const STREAM_STRAT: u64 = 12;
const STREAM_REPLICATE: u64 = 13;
const STREAM_BOOTSTRAP: u64 = 14;
const STREAM_NMIN: u64 = 15;

const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Minibatch selection strategy under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Uniform,
    Stratified,
    Ordered,
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Sampler::Uniform => "uniform",
            Sampler::Stratified => "stratified",
            Sampler::Ordered => "ordered",
        };
        f.write_str(name)
    }
}

/// Where the source and target feature matrices come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Fresh draws from a 2D standard normal, seeded from the config.
    StandardNormal2d,
    /// Feature files on disk, either CSV or the binary format.
    FromFile { source: PathBuf, target: PathBuf },
}

/// Full description of one sweep: data, sampler, loss, and sweep axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_s: usize,
    pub n_t: usize,
    pub d: usize,
    pub distribution: DataSource,
    pub sampler: Sampler,
    pub loss_kind: LossKind,
    pub kernel: KernelSpec,
    /// Stratum counts swept by [`run_variance_sweep`].
    pub k_values: Vec<usize>,
    /// Minibatches per scheduling block.
    pub m: usize,
    pub n_min: usize,
    pub replacement: ReplacementMode,
    pub replicates: usize,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s == 0 || self.n_t == 0 {
            return Err(Error::InvalidConfig("datasets must be non-empty".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("d must be at least 1".into()));
        }
        if self.distribution == DataSource::StandardNormal2d && self.d != 2 {
            return Err(Error::InvalidConfig(format!(
                "the 2D normal generator requires d = 2, got d = {}",
                self.d
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidConfig(
                "replicates must be at least 1".into(),
            ));
        }
        if self.k_values.is_empty() {
            return Err(Error::InvalidConfig("k_values must be non-empty".into()));
        }
        if self.k_values.contains(&0) {
            return Err(Error::InvalidConfig("every k must be at least 1".into()));
        }
        self.kernel.validate()
    }
}

/// One swept value with its pooled estimator statistics.
///
/// Infeasible points carry an error message and NaN statistics; the sweep
/// itself still succeeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Swept value: k for the stratum sweep, M for the block sweep.
    pub x: usize,
    /// Pooled sample variance of the estimates across batches and replicates.
    pub variance: f64,
    /// Bootstrap standard error of the variance (replicate-level resampling).
    pub stderr: f64,
    /// Mean squared deviation of the estimates from the full-data reference.
    pub mse: f64,
    pub wall_ms: f64,
    pub error: Option<String>,
}

/// Sweep output for a single sampler, with the config echoed alongside.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceCurve {
    pub sampler: Sampler,
    pub points: Vec<SweepPoint>,
    pub config: SimulationConfig,
}

/// Running mean and scatter, mergeable across replicates in index order.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
    err_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64, reference: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        let e = x - reference;
        self.err_sq += e * e;
    }

    fn merge(self, other: Moments) -> Moments {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * (other.count as f64 / count as f64);
        let m2 = self.m2
            + other.m2
            + delta * delta * (self.count as f64 * other.count as f64 / count as f64);
        Moments {
            count,
            mean,
            m2,
            err_sq: self.err_sq + other.err_sq,
        }
    }

    fn variance(&self) -> f64 {
        debug_assert!(self.count >= 2);
        self.m2 / (self.count - 1) as f64
    }

    fn mse(&self) -> f64 {
        debug_assert!(self.count >= 1);
        self.err_sq / self.count as f64
    }
}

fn standard_normal_features(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    domain: Domain,
) -> FeatureSet {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    FeatureSet::from_rows(rows, domain).expect("normal draws are finite and rectangular")
}

fn domain_tag(domain: Domain) -> u64 {
    match domain {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

/// Materializes the configured source and target feature sets.
///
/// Generated data depends only on the seed, so every sweep point and sampler
/// sees the same dataset.
pub fn generate_dataset(cfg: &SimulationConfig) -> Result<(FeatureSet, FeatureSet)> {
    match &cfg.distribution {
        DataSource::StandardNormal2d => {
            let mut rng_s = stream_rng(cfg.seed, mix_stream(&[STREAM_DATA, 0]));
            let mut rng_t = stream_rng(cfg.seed, mix_stream(&[STREAM_DATA, 1]));
            Ok((
                standard_normal_features(&mut rng_s, cfg.n_s, cfg.d, Domain::Source),
                standard_normal_features(&mut rng_t, cfg.n_t, cfg.d, Domain::Target),
            ))
        }
        DataSource::FromFile { source, target } => {
            let s = crate::io::read_features(source, Domain::Source)?;
            let t = crate::io::read_features(target, Domain::Target)?;
            for (name, fs, n) in [("source", &s, cfg.n_s), ("target", &t, cfg.n_t)] {
                if fs.len() != n || fs.dim() != cfg.d {
                    return Err(Error::InvalidConfig(format!(
                        "{name} file is {}x{} but the config declares {}x{}",
                        fs.len(),
                        fs.dim(),
                        n,
                        cfg.d
                    )));
                }
            }
            Ok((s, t))
        }
    }
}

fn reference_value(cfg: &SimulationConfig, source: &FeatureSet, target: &FeatureSet) -> Result<f64> {
    match cfg.loss_kind {
        LossKind::Mmd => reference_mmd(&cfg.kernel, source, target),
        LossKind::Coral => reference_coral(source, target),
    }
}

fn stratify_domain(cfg: &SimulationConfig, fs: &FeatureSet, k: usize) -> Result<Stratification> {
    let g = gram(&cfg.kernel, fs, fs)?;
    let opts = IterationOptions {
        max_iters: 100,
        seed: mix_stream(&[cfg.seed, STREAM_STRAT, domain_tag(fs.domain()), k as u64]),
        ..IterationOptions::default()
    };
    Ok(kernel_kmeans(&g, k, cfg.n_min, &opts)?.stratification)
}

fn replicate_seed(cfg: &SimulationConfig, k: usize, m: usize, r: usize, lane: u64) -> u64 {
    mix_stream(&[
        cfg.seed,
        STREAM_REPLICATE,
        k as u64,
        m as u64,
        r as u64,
        lane,
    ])
}

fn uniform_replicate(
    cfg: &SimulationConfig,
    source: &FeatureSet,
    target: &FeatureSet,
    reference: f64,
    k: usize,
    m: usize,
    r: usize,
) -> Result<Moments> {
    let mut rng = stream_rng(replicate_seed(cfg, k, m, r, 0), 0);
    let mut acc = Moments::default();
    for _ in 0..m {
        let idx_s = rand::seq::index::sample(&mut rng, source.len(), k).into_vec();
        let idx_t = rand::seq::index::sample(&mut rng, target.len(), k).into_vec();
        let est = match cfg.loss_kind {
            LossKind::Mmd => minibatch_mmd(&cfg.kernel, source, target, &idx_s, &idx_t)?,
            LossKind::Coral => minibatch_coral(source, target, &idx_s, &idx_t)?,
        };
        acc.push(est, reference);
    }
    Ok(acc)
}

fn stratified_replicate(
    cfg: &SimulationConfig,
    source: &FeatureSet,
    target: &FeatureSet,
    strats: &(Stratification, Stratification),
    members: &(Vec<Vec<usize>>, Vec<Vec<usize>>),
    reference: f64,
    k: usize,
    m: usize,
    r: usize,
) -> Result<Moments> {
    let mut rng = stream_rng(replicate_seed(cfg, k, m, r, 0), 0);
    let mut acc = Moments::default();
    let weights_s: Vec<usize> = strats.0.sizes().to_vec();
    let weights_t: Vec<usize> = strats.1.sizes().to_vec();
    for _ in 0..m {
        let idx_s: Vec<usize> = members
            .0
            .iter()
            .map(|hs| hs[rng.random_range(0..hs.len())])
            .collect();
        let idx_t: Vec<usize> = members
            .1
            .iter()
            .map(|ht| ht[rng.random_range(0..ht.len())])
            .collect();
        let batch_s = WeightedBatch::new(idx_s, weights_s.clone())?;
        let batch_t = WeightedBatch::new(idx_t, weights_t.clone())?;
        let est = match cfg.loss_kind {
            LossKind::Mmd => stochastic_mmd(&cfg.kernel, source, target, &batch_s, &batch_t)?,
            LossKind::Coral => stochastic_coral(source, target, &batch_s, &batch_t)?,
        };
        acc.push(est, reference);
    }
    Ok(acc)
}

fn ordered_replicate(
    cfg: &SimulationConfig,
    source: &FeatureSet,
    target: &FeatureSet,
    strats: &(Stratification, Stratification),
    reference: f64,
    k: usize,
    m: usize,
    r: usize,
) -> Result<Moments> {
    let draw_s = draw_tuples(
        &strats.0,
        m,
        cfg.replacement,
        replicate_seed(cfg, k, m, r, 1),
    )?;
    let draw_t = draw_tuples(
        &strats.1,
        m,
        cfg.replacement,
        replicate_seed(cfg, k, m, r, 2),
    )?;
    let result = greedy_reorder_with_reference(
        &draw_s,
        &draw_t,
        source,
        target,
        &cfg.kernel,
        cfg.loss_kind,
        reference,
        replicate_seed(cfg, k, m, r, 3),
    )?;
    let mut acc = Moments::default();
    for &est in &result.estimates {
        acc.push(est, reference);
    }
    Ok(acc)
}

fn bootstrap_stderr(per_replicate: &[Moments], rng: &mut ChaCha8Rng) -> f64 {
    if per_replicate.len() < 2 {
        return 0.0;
    }
    let mut values = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut acc = Moments::default();
        for _ in 0..per_replicate.len() {
            let pick = per_replicate[rng.random_range(0..per_replicate.len())];
            acc = acc.merge(pick);
        }
        if acc.count >= 2 {
            values.push(acc.variance());
        }
    }
    if values.len() < 2 {
        return 0.0;
    }
    let mut mean = KahanSum::default();
    for &v in &values {
        mean.add(v);
    }
    let mean = mean.value() / values.len() as f64;
    let mut scatter = KahanSum::default();
    for &v in &values {
        scatter.add((v - mean) * (v - mean));
    }
    (scatter.value() / (values.len() - 1) as f64).sqrt()
}

struct PointStats {
    variance: f64,
    stderr: f64,
    mse: f64,
}

fn run_point(
    cfg: &SimulationConfig,
    source: &FeatureSet,
    target: &FeatureSet,
    reference: f64,
    shared_strats: Option<&(Stratification, Stratification)>,
    k: usize,
    m: usize,
) -> Result<PointStats> {
    if cfg.replicates * m < 2 {
        return Err(Error::InvalidConfig(
            "need at least two pooled estimates to measure variance".into(),
        ));
    }
    if cfg.loss_kind == LossKind::Coral && k < 2 {
        return Err(Error::TooFewSamples { need: 2, got: k });
    }

    let owned_strats;
    let strats = match cfg.sampler {
        Sampler::Uniform => {
            if k > source.len() || k > target.len() {
                return Err(Error::InvalidConfig(format!(
                    "cannot draw {k} distinct examples from {} source / {} target",
                    source.len(),
                    target.len()
                )));
            }
            None
        }
        Sampler::Stratified | Sampler::Ordered => Some(match shared_strats {
            Some(s) => s,
            None => {
                owned_strats = (
                    stratify_domain(cfg, source, k)?,
                    stratify_domain(cfg, target, k)?,
                );
                &owned_strats
            }
        }),
    };
    let members = strats.map(|s| (s.0.members(), s.1.members()));

    let per_replicate: Vec<Result<Moments>> = parallel::map_indexed(cfg.replicates, |r| {
        match cfg.sampler {
            Sampler::Uniform => uniform_replicate(cfg, source, target, reference, k, m, r),
            Sampler::Stratified => stratified_replicate(
                cfg,
                source,
                target,
                strats.expect("stratified sampler has strata"),
                members.as_ref().expect("stratified sampler has members"),
                reference,
                k,
                m,
                r,
            ),
            Sampler::Ordered => ordered_replicate(
                cfg,
                source,
                target,
                strats.expect("ordered sampler has strata"),
                reference,
                k,
                m,
                r,
            ),
        }
    });
    let mut moments = Vec::with_capacity(cfg.replicates);
    for outcome in per_replicate {
        moments.push(outcome?);
    }
    let pooled = moments
        .iter()
        .copied()
        .fold(Moments::default(), Moments::merge);
    let mut boot_rng = stream_rng(
        cfg.seed,
        mix_stream(&[STREAM_BOOTSTRAP, k as u64, m as u64]),
    );
    Ok(PointStats {
        variance: pooled.variance(),
        stderr: bootstrap_stderr(&moments, &mut boot_rng),
        mse: pooled.mse(),
    })
}

fn error_point(x: usize, wall_ms: f64, err: Error) -> SweepPoint {
    SweepPoint {
        x,
        variance: f64::NAN,
        stderr: f64::NAN,
        mse: f64::NAN,
        wall_ms,
        error: Some(err.to_string()),
    }
}

/// Sweeps the configured sampler over `k_values` on one fixed dataset.
///
/// Each point pools the per-batch estimates of all replicates; infeasible
/// points are marked rather than failing the sweep.
pub fn run_variance_sweep(cfg: &SimulationConfig) -> Result<VarianceCurve> {
    cfg.validate()?;
    let (source, target) = generate_dataset(cfg)?;
    let reference = reference_value(cfg, &source, &target)?;
    let mut points = Vec::with_capacity(cfg.k_values.len());
    for &k in &cfg.k_values {
        let start = Instant::now();
        let outcome = run_point(cfg, &source, &target, reference, None, k, cfg.m);
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        points.push(match outcome {
            Ok(stats) => SweepPoint {
                x: k,
                variance: stats.variance,
                stderr: stats.stderr,
                mse: stats.mse,
                wall_ms,
                error: None,
            },
            Err(e) => error_point(k, wall_ms, e),
        });
    }
    Ok(VarianceCurve {
        sampler: cfg.sampler,
        points,
        config: cfg.clone(),
    })
}

/// Sweeps the ordered sampler over block sizes `m_values` at fixed k.
///
/// The dataset and the stratification are computed once and shared across
/// the sweep, so points differ only in scheduling freedom.
pub fn run_m_sweep(cfg: &SimulationConfig, m_values: &[usize]) -> Result<VarianceCurve> {
    cfg.validate()?;
    if cfg.sampler != Sampler::Ordered {
        return Err(Error::InvalidConfig(
            "the block-size sweep is defined for the ordered sampler".into(),
        ));
    }
    if cfg.k_values.len() != 1 {
        return Err(Error::InvalidConfig(
            "the block-size sweep needs exactly one k".into(),
        ));
    }
    if m_values.is_empty() {
        return Err(Error::InvalidConfig("m_values must be non-empty".into()));
    }
    let k = cfg.k_values[0];
    let (source, target) = generate_dataset(cfg)?;
    let reference = reference_value(cfg, &source, &target)?;
    let strats = (
        stratify_domain(cfg, &source, k)?,
        stratify_domain(cfg, &target, k)?,
    );
    let mut points = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let start = Instant::now();
        let outcome = if m == 0 {
            Err(Error::InvalidConfig("m must be at least 1".into()))
        } else {
            run_point(cfg, &source, &target, reference, Some(&strats), k, m)
        };
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        points.push(match outcome {
            Ok(stats) => SweepPoint {
                x: m,
                variance: stats.variance,
                stderr: stats.stderr,
                mse: stats.mse,
                wall_ms,
                error: None,
            },
            Err(e) => error_point(m, wall_ms, e),
        });
    }
    Ok(VarianceCurve {
        sampler: cfg.sampler,
        points,
        config: cfg.clone(),
    })
}

/// Constrained-assignment optimizer under study in the minimum-size sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assigner {
    GreedyWeighted,
    UnweightedLp,
}

impl Assigner {
    fn rule(self) -> AssignmentRule {
        match self {
            Assigner::GreedyWeighted => AssignmentRule::GreedyWeighted,
            Assigner::UnweightedLp => AssignmentRule::UnweightedLp,
        }
    }
}

impl fmt::Display for Assigner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Assigner::GreedyWeighted => "greedy",
            Assigner::UnweightedLp => "unweighted_lp",
        };
        f.write_str(name)
    }
}

/// One minimum-size value with the mean weighted objective per assigner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NminRow {
    pub n_min: usize,
    /// Mean size-weighted scatter objective, aligned with the table's
    /// assigner list.
    pub objectives: Vec<f64>,
    /// Standard errors of those means.
    pub stderrs: Vec<f64>,
    pub error: Option<String>,
}

/// Output of [`run_nmin_sweep`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NminTable {
    pub n: usize,
    pub k: usize,
    pub replicates: usize,
    pub seed: u64,
    pub assigners: Vec<Assigner>,
    pub rows: Vec<NminRow>,
}

/// Compares assignment rules across minimum-size constraints.
///
/// Every replicate draws n points from a 2D standard normal and clusters
/// them with the full Lloyd loop once per (assigner, n_min) cell. The
/// greedy arm shuffles the row order on each pass so the best visited
/// iterate is not tied to one processing order; the transportation arm is
/// order-free. Both are scored on the size-weighted scatter of the returned
/// clustering, and replicates are paired across cells.
pub fn run_nmin_sweep(
    n: usize,
    k: usize,
    n_min_values: &[usize],
    assigners: &[Assigner],
    replicates: usize,
    seed: u64,
) -> Result<NminTable> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidConfig("n and k must be at least 1".into()));
    }
    if n_min_values.is_empty() || assigners.is_empty() {
        return Err(Error::InvalidConfig(
            "n_min_values and assigners must be non-empty".into(),
        ));
    }
    if replicates == 0 {
        return Err(Error::InvalidConfig(
            "replicates must be at least 1".into(),
        ));
    }

    // One 2D point cloud per replicate, shared across every (n_min, assigner)
    // cell so the comparisons are paired. The linear kernel makes the
    // clustering plain Euclidean k-means.
    let grams: Vec<Result<GramMatrix>> = parallel::map_indexed(replicates, |r| {
        let mut rng = stream_rng(seed, mix_stream(&[STREAM_NMIN, r as u64]));
        let data = ndarray::Array2::from_shape_fn((n, 2), |_| rng.sample(StandardNormal));
        let fs = FeatureSet::new(data, Domain::Source)?;
        gram(&KernelSpec::Linear, &fs, &fs)
    });
    let grams: Vec<GramMatrix> = grams.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(n_min_values.len());
    for &n_min in n_min_values {
        if k * n_min > n {
            rows.push(NminRow {
                n_min,
                objectives: vec![f64::NAN; assigners.len()],
                stderrs: vec![f64::NAN; assigners.len()],
                error: Some(format!(
                    "infeasible: k = {k} strata of at least {n_min} need more than {n} samples"
                )),
            });
            continue;
        }
        let mut objectives = Vec::with_capacity(assigners.len());
        let mut stderrs = Vec::with_capacity(assigners.len());
        for &assigner in assigners {
            let values: Vec<f64> = parallel::map_indexed(replicates, |r| {
                let opts = IterationOptions {
                    max_iters: 100,
                    seed: mix_stream(&[STREAM_NMIN, r as u64, 1]),
                    randomize_row_order: true,
                    assignment: assigner.rule(),
                };
                let outcome = kernel_kmeans(&grams[r], k, n_min, &opts)?;
                clustering_objective(&grams[r], &outcome.stratification)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let mut mean = KahanSum::default();
            for &v in &values {
                mean.add(v);
            }
            let mean = mean.value() / values.len() as f64;
            let stderr = if values.len() < 2 {
                0.0
            } else {
                let mut scatter = KahanSum::default();
                for &v in &values {
                    scatter.add((v - mean) * (v - mean));
                }
                (scatter.value() / ((values.len() - 1) as f64 * values.len() as f64)).sqrt()
            };
            objectives.push(mean);
            stderrs.push(stderr);
        }
        rows.push(NminRow {
            n_min,
            objectives,
            stderrs,
            error: None,
        });
    }
    Ok(NminTable {
        n,
        k,
        replicates,
        seed,
        assigners: assigners.to_vec(),
        rows,
    })
}

/// Spearman rank correlation with average ranks for ties.
///
/// Returns NaN when either input has no rank variation or fewer than two
/// entries.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "rank correlation needs paired samples");
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..n {
        let dx = rx[i] - mean;
        let dy = ry[i] - mean;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return f64::NAN;
    }
    cov / (var_x * var_y).sqrt()
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn format_stat(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

/// Writes sweep curves as CSV: one row per sampler and sweep point.
///
/// All columns except wall_ms are deterministic for a fixed config and seed.
pub fn write_variance_csv(path: impl AsRef<Path>, curves: &[VarianceCurve]) -> Result<()> {
    let file = File::create(path)?;
    let mut wtr = csv::Writer::from_writer(BufWriter::new(file));
    wtr.write_record(["sampler", "x", "variance", "stderr", "mse", "wall_ms", "error"])
        .map_err(csv_io)?;
    for curve in curves {
        for p in &curve.points {
            wtr.write_record([
                curve.sampler.to_string(),
                p.x.to_string(),
                format_stat(p.variance),
                format_stat(p.stderr),
                format_stat(p.mse),
                format_stat(p.wall_ms),
                p.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_io)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Writes the minimum-size study as CSV, one row per n_min with one
/// objective and stderr column pair per assigner.
pub fn write_nmin_csv(path: impl AsRef<Path>, table: &NminTable) -> Result<()> {
    let file = File::create(path)?;
    let mut wtr = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["n_min".to_string()];
    for a in &table.assigners {
        header.push(format!("{a}_objective"));
        header.push(format!("{a}_stderr"));
    }
    header.push("error".to_string());
    wtr.write_record(&header).map_err(csv_io)?;
    for row in &table.rows {
        let mut record = vec![row.n_min.to_string()];
        for i in 0..table.assigners.len() {
            record.push(format_stat(row.objectives[i]));
            record.push(format_stat(row.stderrs[i]));
        }
        record.push(row.error.clone().unwrap_or_default());
        wtr.write_record(&record).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("csv write failed: {other:?}")),
    }
}

#[derive(Serialize)]
struct Sidecar<'a, T: Serialize> {
    schema_version: u32,
    metadata: &'a T,
}

/// Writes a JSON sidecar echoing the run's full configuration.
pub fn write_sidecar<T: Serialize>(path: impl AsRef<Path>, metadata: &T) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(
        &mut w,
        &Sidecar {
            schema_version: 1,
            metadata,
        },
    )
    .map_err(|e| Error::InvalidConfig(format!("sidecar serialization failed: {e}")))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(sampler: Sampler) -> SimulationConfig {
        SimulationConfig {
            n_s: 48,
            n_t: 48,
            d: 2,
            distribution: DataSource::StandardNormal2d,
            sampler,
            loss_kind: LossKind::Mmd,
            kernel: KernelSpec::Linear,
            k_values: vec![3],
            m: 4,
            n_min: 4,
            replacement: ReplacementMode::WithoutReplacement,
            replicates: 6,
            seed: 9,
        }
    }

    #[test]
    fn full_batch_uniform_variance_is_zero() {
        let mut cfg = base_config(Sampler::Uniform);
        cfg.n_s = 6;
        cfg.n_t = 6;
        cfg.k_values = vec![6];
        cfg.m = 5;
        cfg.replicates = 4;
        let curve = run_variance_sweep(&cfg).unwrap();
        let p = &curve.points[0];
        assert!(p.error.is_none());
        // Every draw is the whole dataset, so only summation order varies.
        assert!(p.variance < 1e-28, "variance {}", p.variance);
    }

    #[test]
    fn sweep_is_deterministic_and_marks_infeasible_points() {
        let mut cfg = base_config(Sampler::Stratified);
        cfg.k_values = vec![3, 64];
        let a = run_variance_sweep(&cfg).unwrap();
        let b = run_variance_sweep(&cfg).unwrap();
        assert_eq!(a.points.len(), 2);
        assert!(a.points[0].error.is_none());
        assert!(a.points[1].error.is_some());
        assert!(a.points[1].variance.is_nan());
        for (pa, pb) in a.points.iter().zip(&b.points) {
            assert_eq!(pa.x, pb.x);
            assert_eq!(pa.variance.to_bits(), pb.variance.to_bits());
            assert_eq!(pa.stderr.to_bits(), pb.stderr.to_bits());
            assert_eq!(pa.mse.to_bits(), pb.mse.to_bits());
            assert_eq!(pa.error, pb.error);
        }
    }

    #[test]
    fn coral_needs_batches_of_two() {
        let mut cfg = base_config(Sampler::Uniform);
        cfg.loss_kind = LossKind::Coral;
        cfg.k_values = vec![1, 3];
        let curve = run_variance_sweep(&cfg).unwrap();
        assert!(curve.points[0].error.is_some());
        assert!(curve.points[1].error.is_none());
    }

    #[test]
    fn ordered_single_batch_matches_stratified_variance() {
        let mut cfg = base_config(Sampler::Ordered);
        cfg.n_s = 90;
        cfg.n_t = 90;
        cfg.k_values = vec![3];
        cfg.n_min = 10;
        cfg.m = 1;
        cfg.replicates = 3000;
        let ordered = run_variance_sweep(&cfg).unwrap();
        cfg.sampler = Sampler::Stratified;
        let stratified = run_variance_sweep(&cfg).unwrap();
        let (po, ps) = (&ordered.points[0], &stratified.points[0]);
        assert!(po.error.is_none() && ps.error.is_none());
        let gap = (po.variance - ps.variance).abs();
        let scale = (po.stderr * po.stderr + ps.stderr * ps.stderr).sqrt();
        assert!(
            gap <= 3.0 * scale,
            "variances {} vs {} differ beyond noise {}",
            po.variance,
            ps.variance,
            scale
        );
    }

    #[test]
    fn m_sweep_requires_ordered_sampler_and_single_k() {
        let cfg = base_config(Sampler::Stratified);
        assert!(run_m_sweep(&cfg, &[2, 4]).is_err());
        let mut cfg = base_config(Sampler::Ordered);
        cfg.k_values = vec![2, 3];
        assert!(run_m_sweep(&cfg, &[2, 4]).is_err());
    }

    #[test]
    fn m_sweep_shares_data_across_points() {
        let mut cfg = base_config(Sampler::Ordered);
        cfg.k_values = vec![3];
        let curve = run_m_sweep(&cfg, &[1, 2, 4]).unwrap();
        assert_eq!(curve.points.len(), 3);
        for p in &curve.points {
            assert!(p.error.is_none(), "{:?}", p.error);
            assert!(p.variance.is_finite());
        }
        // A block too large for the smallest stratum is marked, not fatal.
        let wide = run_m_sweep(&cfg, &[2, 1000]).unwrap();
        assert!(wide.points[0].error.is_none());
        assert!(wide.points[1].error.is_some());
    }

    #[test]
    fn from_file_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("s.csv");
        let tp = dir.path().join("t.csv");
        let mut cfg = base_config(Sampler::Uniform);
        let (s, t) = generate_dataset(&cfg).unwrap();
        crate::io::write_features_csv(&sp, &s).unwrap();
        crate::io::write_features_csv(&tp, &t).unwrap();
        cfg.distribution = DataSource::FromFile {
            source: sp,
            target: tp,
        };
        let (s2, t2) = generate_dataset(&cfg).unwrap();
        assert_eq!(s2.len(), s.len());
        assert_eq!(t2.dim(), t.dim());
        cfg.n_s = 5;
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = base_config(Sampler::Uniform);
        cfg.replicates = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config(Sampler::Uniform);
        cfg.k_values.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = base_config(Sampler::Uniform);
        cfg.d = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nmin_sweep_is_deterministic_and_marks_infeasible_rows() {
        let assigners = [Assigner::GreedyWeighted, Assigner::UnweightedLp];
        let a = run_nmin_sweep(20, 4, &[1, 5, 6], &assigners, 3, 17).unwrap();
        let b = run_nmin_sweep(20, 4, &[1, 5, 6], &assigners, 3, 17).unwrap();
        // NaN markers defeat PartialEq; JSON maps them to null on both sides.
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert!(a.rows[0].error.is_none());
        assert!(a.rows[1].error.is_none());
        assert!(a.rows[2].error.is_some());
        for row in &a.rows[..2] {
            for &v in &row.objectives {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }

    #[test]
    fn spearman_oracles() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        let tied = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 3.0]);
        let expected = 3.0 / 10.0f64.sqrt();
        assert!((tied - expected).abs() < 1e-12, "{tied} vs {expected}");
        assert!(spearman(&[1.0, 2.0], &[5.0, 5.0]).is_nan());
    }

    #[test]
    fn csv_outputs_are_stable_modulo_wall_time() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(Sampler::Stratified);
        cfg.k_values = vec![3, 64];
        let path_a = dir.path().join("a.csv");
        let path_b = dir.path().join("b.csv");
        write_variance_csv(&path_a, &[run_variance_sweep(&cfg).unwrap()]).unwrap();
        write_variance_csv(&path_b, &[run_variance_sweep(&cfg).unwrap()]).unwrap();
        let mask = |text: &str| -> String {
            text.lines()
                .map(|line| {
                    let fields: Vec<&str> = line.split(',').collect();
                    let mut fields: Vec<String> =
                        fields.iter().map(|s| s.to_string()).collect();
                    if fields.len() >= 6 && fields[5] != "wall_ms" {
                        fields[5] = "-".into();
                    }
                    fields.join(",")
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let a = mask(&std::fs::read_to_string(&path_a).unwrap());
        let b = mask(&std::fs::read_to_string(&path_b).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("sampler,x,variance,stderr,mse,wall_ms,error"));

        let table = run_nmin_sweep(12, 3, &[1, 4], &[Assigner::GreedyWeighted], 2, 3).unwrap();
        let npath = dir.path().join("n.csv");
        write_nmin_csv(&npath, &table).unwrap();
        let text = std::fs::read_to_string(&npath).unwrap();
        assert!(text.starts_with("n_min,greedy_objective,greedy_stderr,error"));

        let spath = dir.path().join("meta.json");
        write_sidecar(&spath, &cfg).unwrap();
        let text = std::fs::read_to_string(&spath).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["metadata"]["sampler"], "stratified");
    }
}
