//! Minibatch drawing and greedy reordering.
//!
//! A schedule holds M minibatches per domain, each with one sample per
//! stratum. Drawing happens per stratum, either without replacement or by
//! concatenating reshuffled full passes. The greedy reorder then sweeps
//! positions in order and, for every stratum and domain, swaps the current
//! entry with the later position that most reduces the summed squared gap
//! between each minibatch's stochastic discrepancy and the full-data
//! reference. Per-batch caches make one candidate evaluation O(k) kernel
//! applications for the RKHS loss and O(d^2) for the covariance loss.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discrepancy::{reference_coral, reference_mmd, stochastic_coral, stochastic_mmd, WeightedBatch};
use crate::error::{Error, Result};
use crate::kernel::{eval_raw, prepared_inputs, KernelSpec};
use crate::parallel::map_indexed;
use crate::seed::{mix_stream, stream_rng};
use crate::stratify::Stratification;
use crate::types::{Domain, FeatureSet};
use crate::util::{kahan_total, KahanSum};

/// How per-stratum index sequences are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementMode {
    /// m distinct indices per stratum; requires every stratum to hold at
    /// least m samples.
    WithoutReplacement,
    /// Concatenated independent full shuffles of the stratum, truncated to
    /// m; indices repeat once a pass is exhausted.
    ShuffleCycle,
}

/// Which discrepancy the scheduler minimizes the per-batch error of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mmd,
    Coral,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Mmd => write!(f, "mmd"),
            LossKind::Coral => write!(f, "coral"),
        }
    }
}

/// m drawn indices for each stratum of one domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTupleDraw")]
pub struct TupleDraw {
    per_stratum: Vec<Vec<usize>>,
    stratum_sizes: Vec<usize>,
    m: usize,
    mode: ReplacementMode,
}

#[derive(Deserialize)]
struct RawTupleDraw {
    per_stratum: Vec<Vec<usize>>,
    stratum_sizes: Vec<usize>,
    m: usize,
    mode: ReplacementMode,
}

impl TryFrom<RawTupleDraw> for TupleDraw {
    type Error = Error;

    fn try_from(raw: RawTupleDraw) -> Result<Self> {
        TupleDraw::from_parts(raw.per_stratum, raw.stratum_sizes, raw.m, raw.mode)
    }
}

impl TupleDraw {
    fn from_parts(
        per_stratum: Vec<Vec<usize>>,
        stratum_sizes: Vec<usize>,
        m: usize,
        mode: ReplacementMode,
    ) -> Result<Self> {
        if per_stratum.is_empty() {
            return Err(Error::InvalidConfig("draw has no strata".into()));
        }
        if per_stratum.len() != stratum_sizes.len() {
            return Err(Error::DimensionMismatch {
                left: per_stratum.len(),
                right: stratum_sizes.len(),
            });
        }
        if m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        for (h, list) in per_stratum.iter().enumerate() {
            if list.len() != m {
                return Err(Error::InvalidConfig(format!(
                    "stratum {h} has {} draws, expected m = {m}",
                    list.len()
                )));
            }
        }
        if let Some(h) = stratum_sizes.iter().position(|&s| s == 0) {
            return Err(Error::EmptyStratum { stratum: h });
        }
        Ok(Self {
            per_stratum,
            stratum_sizes,
            m,
            mode,
        })
    }

    pub fn k(&self) -> usize {
        self.per_stratum.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn mode(&self) -> ReplacementMode {
        self.mode
    }

    pub fn per_stratum(&self) -> &[Vec<usize>] {
        &self.per_stratum
    }

    pub fn stratum_sizes(&self) -> &[usize] {
        &self.stratum_sizes
    }

    /// Copy with each stratum's sequence independently shuffled.
    fn shuffled(&self, seed: u64, domain: Domain) -> TupleDraw {
        let mut out = self.clone();
        for (h, list) in out.per_stratum.iter_mut().enumerate() {
            let mut rng = stream_rng(seed, mix_stream(&[domain_tag(domain), h as u64]));
            list.shuffle(&mut rng);
        }
        out
    }
}

fn domain_tag(domain: Domain) -> u64 {
    match domain {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

/// Draws m indices from every stratum. Stratum h consumes its own RNG
/// stream, so draws are independent across strata and deterministic in
/// (seed, h) regardless of k.
pub fn draw_tuples(
    strat: &Stratification,
    m: usize,
    mode: ReplacementMode,
    seed: u64,
) -> Result<TupleDraw> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be at least 1".into()));
    }
    let members = strat.members();
    let mut per_stratum = Vec::with_capacity(strat.k());
    for (h, stratum) in members.iter().enumerate() {
        if stratum.is_empty() {
            return Err(Error::EmptyStratum { stratum: h });
        }
        let mut rng = stream_rng(seed, h as u64);
        let list = match mode {
            ReplacementMode::WithoutReplacement => {
                if stratum.len() < m {
                    return Err(Error::StratumTooSmall {
                        stratum: h,
                        size: stratum.len(),
                        m,
                    });
                }
                let mut pool = stratum.clone();
                for i in 0..m {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                }
                pool.truncate(m);
                pool
            }
            ReplacementMode::ShuffleCycle => {
                let mut list = Vec::with_capacity(m + stratum.len());
                while list.len() < m {
                    let mut pass = stratum.clone();
                    pass.shuffle(&mut rng);
                    list.extend(pass);
                }
                list.truncate(m);
                list
            }
        };
        per_stratum.push(list);
    }
    TupleDraw::from_parts(per_stratum, strat.sizes().to_vec(), m, mode)
}

/// An ordered sequence of M weighted minibatches per domain.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawSchedulePlan")]
pub struct SchedulePlan {
    source_batches: Vec<WeightedBatch>,
    target_batches: Vec<WeightedBatch>,
    /// Schedule objective after the initial arrangement and after each
    /// accepted swap; empty until a reorder runs.
    objective_trace: Vec<f64>,
    loss_kind: LossKind,
    #[serde(default)]
    revision: u64,
}

#[derive(Deserialize)]
struct RawSchedulePlan {
    source_batches: Vec<WeightedBatch>,
    target_batches: Vec<WeightedBatch>,
    #[serde(default)]
    objective_trace: Vec<f64>,
    loss_kind: LossKind,
    #[serde(default)]
    revision: u64,
}

impl TryFrom<RawSchedulePlan> for SchedulePlan {
    type Error = Error;

    fn try_from(raw: RawSchedulePlan) -> Result<Self> {
        let plan = SchedulePlan {
            source_batches: raw.source_batches,
            target_batches: raw.target_batches,
            objective_trace: raw.objective_trace,
            loss_kind: raw.loss_kind,
            revision: raw.revision,
        };
        plan.validate()?;
        Ok(plan)
    }
}

impl SchedulePlan {
    /// Pairs the two domains' draws position by position.
    pub fn from_draws(source: &TupleDraw, target: &TupleDraw, loss_kind: LossKind) -> Result<Self> {
        if source.m() != target.m() {
            return Err(Error::DimensionMismatch {
                left: source.m(),
                right: target.m(),
            });
        }
        let build = |draw: &TupleDraw| -> Result<Vec<WeightedBatch>> {
            (0..draw.m())
                .map(|m| {
                    let indices: Vec<usize> =
                        draw.per_stratum().iter().map(|list| list[m]).collect();
                    WeightedBatch::new(indices, draw.stratum_sizes().to_vec())
                })
                .collect()
        };
        let plan = SchedulePlan {
            source_batches: build(source)?,
            target_batches: build(target)?,
            objective_trace: Vec::new(),
            loss_kind,
            revision: 0,
        };
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&self) -> Result<()> {
        if self.source_batches.is_empty() || self.source_batches.len() != self.target_batches.len()
        {
            return Err(Error::InvalidConfig(format!(
                "plan needs matching non-empty batch lists, got {} source and {} target",
                self.source_batches.len(),
                self.target_batches.len()
            )));
        }
        for (domain, batches) in [
            (Domain::Source, &self.source_batches),
            (Domain::Target, &self.target_batches),
        ] {
            let k = batches[0].len();
            let weights = batches[0].weights().to_vec();
            for b in batches.iter() {
                if b.len() != k || b.weights() != weights {
                    return Err(Error::InvalidConfig(format!(
                        "{domain} batches disagree on stratum count or weights"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.source_batches.len()
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn batches(&self, domain: Domain) -> &[WeightedBatch] {
        match domain {
            Domain::Source => &self.source_batches,
            Domain::Target => &self.target_batches,
        }
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    pub fn initial_objective(&self) -> Option<f64> {
        self.objective_trace.first().copied()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }

    fn batches_mut(&mut self, domain: Domain) -> &mut Vec<WeightedBatch> {
        match domain {
            Domain::Source => &mut self.source_batches,
            Domain::Target => &mut self.target_batches,
        }
    }

    /// Exchanges the stratum entry between two positions and bumps the
    /// revision so existing caches detect staleness.
    fn swap_entries(&mut self, domain: Domain, stratum: usize, m1: usize, m2: usize) {
        let batches = self.batches_mut(domain);
        let a = batches[m1].indices()[stratum];
        let b = batches[m2].indices()[stratum];
        batches[m1].replace_index(stratum, b);
        batches[m2].replace_index(stratum, a);
        self.revision += 1;
    }
}

/// Schedule objective by full recomputation: the sum over positions of the
/// squared gap between the batch estimate and the reference value.
pub fn plan_objective(
    plan: &SchedulePlan,
    source: &FeatureSet,
    target: &FeatureSet,
    spec: &KernelSpec,
    reference: f64,
) -> Result<f64> {
    let estimates = plan_estimates(plan, source, target, spec)?;
    Ok(kahan_total(
        estimates.iter().map(|e| (e - reference) * (e - reference)),
    ))
}

/// Per-position stochastic estimates by full recomputation.
pub fn plan_estimates(
    plan: &SchedulePlan,
    source: &FeatureSet,
    target: &FeatureSet,
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    let results = map_indexed(plan.m(), |m| match plan.loss_kind() {
        LossKind::Mmd => stochastic_mmd(
            spec,
            source,
            target,
            &plan.batches(Domain::Source)[m],
            &plan.batches(Domain::Target)[m],
        ),
        LossKind::Coral => stochastic_coral(
            source,
            target,
            &plan.batches(Domain::Source)[m],
            &plan.batches(Domain::Target)[m],
        ),
    });
    results.into_iter().collect()
}

/// Per-domain second-moment state for one batch under the covariance loss.
#[derive(Clone, Debug)]
struct Moments {
    /// sum_p w_p z_p z_p^T
    outer: Array2<f64>,
    /// sum_p w_p z_p
    linear: Vec<f64>,
    /// sum_p w_p
    weight: f64,
}

impl Moments {
    fn from_batch(fs: &FeatureSet, batch: &WeightedBatch) -> Self {
        let d = fs.dim();
        let mut outer = Array2::zeros((d, d));
        let mut linear = vec![0.0f64; d];
        let mut weight = 0.0f64;
        for (&i, &w) in batch.indices().iter().zip(batch.weights()) {
            let row = fs.row(i);
            let wf = w as f64;
            weight += wf;
            for a in 0..d {
                linear[a] += wf * row[a];
                for b in 0..d {
                    outer[(a, b)] += wf * row[a] * row[b];
                }
            }
        }
        Self {
            outer,
            linear,
            weight,
        }
    }

    /// Replaces row `from` with row `to` at weight w.
    fn replace(&mut self, fs: &FeatureSet, from: usize, to: usize, w: f64) {
        let d = fs.dim();
        let zf = fs.row(from);
        let zt = fs.row(to);
        for a in 0..d {
            self.linear[a] += w * (zt[a] - zf[a]);
            for b in 0..d {
                self.outer[(a, b)] += w * (zt[a] * zt[b] - zf[a] * zf[b]);
            }
        }
    }

    /// Weighted covariance with the full-data 1/n mean prefactor and the
    /// 1/(n-1) normalizer.
    fn covariance(&self, n: f64) -> Array2<f64> {
        let d = self.linear.len();
        let mut cov = self.outer.clone();
        let factor = 2.0 / n - self.weight / (n * n);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] -= factor * self.linear[a] * self.linear[b];
            }
        }
        cov /= n - 1.0;
        cov
    }
}

fn coral_estimate(src: &Moments, tgt: &Moments, ns: f64, nt: f64) -> f64 {
    let cs = src.covariance(ns);
    let ct = tgt.covariance(nt);
    let mut acc = KahanSum::default();
    for (a, b) in cs.iter().zip(ct.iter()) {
        let d = a - b;
        acc.add(d * d);
    }
    acc.value()
}

fn mmd_estimate(q_ss: f64, q_tt: f64, q_st: f64, ns: f64, nt: f64) -> f64 {
    // Squared-norm expansion; tiny negatives are cancellation noise.
    (q_ss / (ns * ns) + q_tt / (nt * nt) - 2.0 * q_st / (ns * nt)).max(0.0)
}

fn pair_sum(
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

#[derive(Clone, Debug)]
enum CacheKind {
    Mmd {
        q_ss: Vec<f64>,
        q_tt: Vec<f64>,
        q_st: Vec<f64>,
    },
    Coral {
        src: Vec<Moments>,
        tgt: Vec<Moments>,
    },
}

/// Incremental per-batch state backing O(k) swap evaluation.
///
/// Holds the loss-specific sufficient statistics of every position plus the
/// current estimates and objective. A revision counter ties the caches to
/// the plan state they were computed from; mutating the plan through
/// anything but [`apply_swap`] leaves them detectably stale.
#[derive(Clone, Debug)]
pub struct PlanCaches {
    kind: CacheKind,
    estimates: Vec<f64>,
    objective: f64,
    reference: f64,
    revision: u64,
    spec: KernelSpec,
    prepared_s: FeatureSet,
    prepared_t: FeatureSet,
    ns: f64,
    nt: f64,
}

impl PlanCaches {
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    pub fn reference(&self) -> f64 {
        self.reference
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    fn check_sync(&self, plan: &SchedulePlan) -> Result<()> {
        if plan.revision != self.revision {
            return Err(Error::StaleCaches {
                plan: plan.revision,
                caches: self.revision,
            });
        }
        Ok(())
    }

    fn recompute_objective(&mut self) {
        self.objective = kahan_total(
            self.estimates
                .iter()
                .map(|e| (e - self.reference) * (e - self.reference)),
        );
    }
}

/// Builds the per-batch caches for a plan against a precomputed reference
/// value.
pub fn build_caches(
    plan: &SchedulePlan,
    source: &FeatureSet,
    target: &FeatureSet,
    spec: &KernelSpec,
    reference: f64,
) -> Result<PlanCaches> {
    spec.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            left: source.dim(),
            right: target.dim(),
        });
    }
    check_plan_bounds(plan, Domain::Source, source.len())?;
    check_plan_bounds(plan, Domain::Target, target.len())?;
    let (ns, nt) = (source.len() as f64, target.len() as f64);
    let m_count = plan.m();

    let (kind, estimates, prepared_s, prepared_t) = match plan.loss_kind() {
        LossKind::Mmd => {
            let s = prepared_inputs(spec, source).into_owned();
            let t = prepared_inputs(spec, target).into_owned();
            let per_batch: Vec<(f64, f64, f64)> = map_indexed(m_count, |m| {
                let bs = &plan.batches(Domain::Source)[m];
                let bt = &plan.batches(Domain::Target)[m];
                (
                    pair_sum(spec, &s, bs, &s, bs),
                    pair_sum(spec, &t, bt, &t, bt),
                    pair_sum(spec, &s, bs, &t, bt),
                )
            });
            let q_ss: Vec<f64> = per_batch.iter().map(|x| x.0).collect();
            let q_tt: Vec<f64> = per_batch.iter().map(|x| x.1).collect();
            let q_st: Vec<f64> = per_batch.iter().map(|x| x.2).collect();
            let estimates: Vec<f64> = (0..m_count)
                .map(|m| mmd_estimate(q_ss[m], q_tt[m], q_st[m], ns, nt))
                .collect();
            (CacheKind::Mmd { q_ss, q_tt, q_st }, estimates, s, t)
        }
        LossKind::Coral => {
            if source.len() < 2 || target.len() < 2 {
                return Err(Error::TooFewSamples {
                    need: 2,
                    got: source.len().min(target.len()),
                });
            }
            let src: Vec<Moments> = plan
                .batches(Domain::Source)
                .iter()
                .map(|b| Moments::from_batch(source, b))
                .collect();
            let tgt: Vec<Moments> = plan
                .batches(Domain::Target)
                .iter()
                .map(|b| Moments::from_batch(target, b))
                .collect();
            let estimates: Vec<f64> = (0..m_count)
                .map(|m| coral_estimate(&src[m], &tgt[m], ns, nt))
                .collect();
            (
                CacheKind::Coral { src, tgt },
                estimates,
                source.clone(),
                target.clone(),
            )
        }
    };

    let mut caches = PlanCaches {
        kind,
        estimates,
        objective: 0.0,
        reference,
        revision: plan.revision,
        spec: spec.clone(),
        prepared_s,
        prepared_t,
        ns,
        nt,
    };
    caches.recompute_objective();
    Ok(caches)
}

fn check_plan_bounds(plan: &SchedulePlan, domain: Domain, n: usize) -> Result<()> {
    for b in plan.batches(domain) {
        if let Some(&bad) = b.indices().iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
    }
    Ok(())
}

/// The state a candidate swap would move the two touched positions into.
struct SwapEval {
    delta: f64,
    update: SwapUpdate,
}

enum SwapUpdate {
    Mmd {
        q_own: [f64; 2],
        q_cross: [f64; 2],
        est: [f64; 2],
    },
    Coral {
        moments: [Moments; 2],
        est: [f64; 2],
    },
}

fn evaluate_swap(
    plan: &SchedulePlan,
    caches: &PlanCaches,
    domain: Domain,
    stratum: usize,
    m1: usize,
    m2: usize,
) -> Result<SwapEval> {
    caches.check_sync(plan)?;
    let m_count = plan.m();
    if m1 >= m_count || m2 >= m_count {
        return Err(Error::IndexOutOfRange {
            index: m1.max(m2),
            len: m_count,
        });
    }
    let own_batches = plan.batches(domain);
    if stratum >= own_batches[0].len() {
        return Err(Error::IndexOutOfRange {
            index: stratum,
            len: own_batches[0].len(),
        });
    }
    let a = own_batches[m1].indices()[stratum];
    let b = own_batches[m2].indices()[stratum];
    let w = own_batches[m1].weights()[stratum] as f64;

    let (own_fs, other_fs) = match domain {
        Domain::Source => (&caches.prepared_s, &caches.prepared_t),
        Domain::Target => (&caches.prepared_t, &caches.prepared_s),
    };
    let other_domain = match domain {
        Domain::Source => Domain::Target,
        Domain::Target => Domain::Source,
    };

    let (update, est_new) = match &caches.kind {
        CacheKind::Mmd { q_ss, q_tt, q_st } => {
            let spec = &caches.spec;
            let q_own = match domain {
                Domain::Source => q_ss,
                Domain::Target => q_tt,
            };
            // Weighted kernel sums of a and b against each touched batch on
            // the swapped domain, and against the opposite-domain batches.
            let own_sum = |m: usize, x: usize| -> f64 {
                let batch = &own_batches[m];
                let rx = own_fs.row(x);
                let mut acc = KahanSum::default();
                for (&p, &wp) in batch.indices().iter().zip(batch.weights()) {
                    acc.add(wp as f64 * eval_raw(spec, own_fs.row(p), rx));
                }
                acc.value()
            };
            let cross_sum = |m: usize, x: usize| -> f64 {
                let batch = &plan.batches(other_domain)[m];
                let rx = own_fs.row(x);
                let mut acc = KahanSum::default();
                for (&q, &wq) in batch.indices().iter().zip(batch.weights()) {
                    acc.add(wq as f64 * eval_raw(spec, rx, other_fs.row(q)));
                }
                acc.value()
            };
            let k_aa = eval_raw(spec, own_fs.row(a), own_fs.row(a));
            let k_bb = eval_raw(spec, own_fs.row(b), own_fs.row(b));
            let k_ab = eval_raw(spec, own_fs.row(a), own_fs.row(b));
            let self_term = w * w * (k_aa + k_bb - 2.0 * k_ab);

            let q_own_1 = q_own[m1] + 2.0 * w * (own_sum(m1, b) - own_sum(m1, a)) + self_term;
            let q_own_2 = q_own[m2] + 2.0 * w * (own_sum(m2, a) - own_sum(m2, b)) + self_term;
            let q_cross_1 = q_st[m1] + w * (cross_sum(m1, b) - cross_sum(m1, a));
            let q_cross_2 = q_st[m2] + w * (cross_sum(m2, a) - cross_sum(m2, b));

            let est = |q_own_new: f64, q_cross_new: f64, m: usize| -> f64 {
                match domain {
                    Domain::Source => {
                        mmd_estimate(q_own_new, q_tt[m], q_cross_new, caches.ns, caches.nt)
                    }
                    Domain::Target => {
                        mmd_estimate(q_ss[m], q_own_new, q_cross_new, caches.ns, caches.nt)
                    }
                }
            };
            let est1 = est(q_own_1, q_cross_1, m1);
            let est2 = est(q_own_2, q_cross_2, m2);
            (
                SwapUpdate::Mmd {
                    q_own: [q_own_1, q_own_2],
                    q_cross: [q_cross_1, q_cross_2],
                    est: [est1, est2],
                },
                [est1, est2],
            )
        }
        CacheKind::Coral { src, tgt } => {
            let (own_m, other_m) = match domain {
                Domain::Source => (src, tgt),
                Domain::Target => (tgt, src),
            };
            let mut m1_new = own_m[m1].clone();
            m1_new.replace(own_fs, a, b, w);
            let mut m2_new = own_m[m2].clone();
            m2_new.replace(own_fs, b, a, w);
            let est_of = |own_new: &Moments, m: usize| -> f64 {
                match domain {
                    Domain::Source => coral_estimate(own_new, &other_m[m], caches.ns, caches.nt),
                    Domain::Target => coral_estimate(&other_m[m], own_new, caches.ns, caches.nt),
                }
            };
            let est1 = est_of(&m1_new, m1);
            let est2 = est_of(&m2_new, m2);
            (
                SwapUpdate::Coral {
                    moments: [m1_new, m2_new],
                    est: [est1, est2],
                },
                [est1, est2],
            )
        }
    };

    let d0 = caches.reference;
    let sq = |e: f64| (e - d0) * (e - d0);
    let delta = sq(est_new[0]) + sq(est_new[1]) - sq(caches.estimates[m1]) - sq(caches.estimates[m2]);
    Ok(SwapEval { delta, update })
}

/// Change in the schedule objective if the stratum entries of positions m1
/// and m2 were exchanged in the given domain. The plan is not modified.
pub fn swap_delta(
    plan: &SchedulePlan,
    caches: &PlanCaches,
    domain: Domain,
    stratum: usize,
    m1: usize,
    m2: usize,
) -> Result<f64> {
    if m1 == m2 {
        caches.check_sync(plan)?;
        return Ok(0.0);
    }
    Ok(evaluate_swap(plan, caches, domain, stratum, m1, m2)?.delta)
}

/// Applies the swap to the plan and folds the same change into the caches,
/// returning the objective delta.
pub fn apply_swap(
    plan: &mut SchedulePlan,
    caches: &mut PlanCaches,
    domain: Domain,
    stratum: usize,
    m1: usize,
    m2: usize,
) -> Result<f64> {
    if m1 == m2 {
        caches.check_sync(plan)?;
        return Ok(0.0);
    }
    let eval = evaluate_swap(plan, caches, domain, stratum, m1, m2)?;
    plan.swap_entries(domain, stratum, m1, m2);
    match (&mut caches.kind, eval.update) {
        (CacheKind::Mmd { q_ss, q_tt, q_st }, SwapUpdate::Mmd { q_own, q_cross, est }) => {
            let q_own_vec = match domain {
                Domain::Source => q_ss,
                Domain::Target => q_tt,
            };
            q_own_vec[m1] = q_own[0];
            q_own_vec[m2] = q_own[1];
            q_st[m1] = q_cross[0];
            q_st[m2] = q_cross[1];
            caches.estimates[m1] = est[0];
            caches.estimates[m2] = est[1];
        }
        (CacheKind::Coral { src, tgt }, SwapUpdate::Coral { moments, est }) => {
            let own = match domain {
                Domain::Source => src,
                Domain::Target => tgt,
            };
            let [mm1, mm2] = moments;
            own[m1] = mm1;
            own[m2] = mm2;
            caches.estimates[m1] = est[0];
            caches.estimates[m2] = est[1];
        }
        _ => unreachable!("cache kind is fixed at construction"),
    }
    caches.revision = plan.revision;
    caches.recompute_objective();
    Ok(eval.delta)
}

/// Output of the greedy reorder.
#[derive(Clone, Debug)]
pub struct ReorderResult {
    pub plan: SchedulePlan,
    /// Candidate pairs examined; always (k_s + k_t) * M * (M - 1) / 2.
    pub comparisons: u64,
    /// Reference discrepancy the schedule was optimized against.
    pub reference: f64,
    /// Final per-position estimates.
    pub estimates: Vec<f64>,
}

/// Greedy position-by-position reorder of freshly shuffled draws, computing
/// the reference value from the full data first.
pub fn greedy_reorder(
    source_draw: &TupleDraw,
    target_draw: &TupleDraw,
    source: &FeatureSet,
    target: &FeatureSet,
    spec: &KernelSpec,
    loss_kind: LossKind,
    seed: u64,
) -> Result<ReorderResult> {
    let reference = match loss_kind {
        LossKind::Mmd => reference_mmd(spec, source, target)?,
        LossKind::Coral => reference_coral(source, target)?,
    };
    greedy_reorder_with_reference(
        source_draw,
        target_draw,
        source,
        target,
        spec,
        loss_kind,
        reference,
        seed,
    )
}

/// Greedy reorder against a caller-supplied reference value.
///
/// Starts from an independent random permutation of every stratum sequence,
/// then makes a single pass over positions m. At each (m, stratum) it picks
/// the best exchange with a later position, source list first and target
/// list second, accepting an exchange only if it strictly lowers the
/// objective. Ties keep the current arrangement. The accepted objective
/// values land in the plan's trace, which is non-increasing.
#[allow(clippy::too_many_arguments)]
pub fn greedy_reorder_with_reference(
    source_draw: &TupleDraw,
    target_draw: &TupleDraw,
    source: &FeatureSet,
    target: &FeatureSet,
    spec: &KernelSpec,
    loss_kind: LossKind,
    reference: f64,
    seed: u64,
) -> Result<ReorderResult> {
    let shuffled_s = source_draw.shuffled(seed, Domain::Source);
    let shuffled_t = target_draw.shuffled(seed, Domain::Target);
    let mut plan = SchedulePlan::from_draws(&shuffled_s, &shuffled_t, loss_kind)?;
    let mut caches = build_caches(&plan, source, target, spec, reference)?;

    let m_count = plan.m();
    let k_s = plan.batches(Domain::Source)[0].len();
    let k_t = plan.batches(Domain::Target)[0].len();
    let mut trace = vec![caches.objective()];
    let mut comparisons = 0u64;

    for m in 0..m_count {
        for stratum in 0..k_s.max(k_t) {
            for (domain, k) in [(Domain::Source, k_s), (Domain::Target, k_t)] {
                if stratum >= k {
                    continue;
                }
                let mut best_m2 = m;
                let mut best_delta = 0.0f64;
                for m2 in (m + 1)..m_count {
                    comparisons += 1;
                    let delta = swap_delta(&plan, &caches, domain, stratum, m, m2)?;
                    if delta < best_delta {
                        best_delta = delta;
                        best_m2 = m2;
                    }
                }
                if best_m2 != m {
                    apply_swap(&mut plan, &mut caches, domain, stratum, m, best_m2)?;
                    trace.push(caches.objective());
                }
            }
        }
    }

    plan.objective_trace = trace;
    Ok(ReorderResult {
        plan,
        comparisons,
        reference,
        estimates: caches.estimates().to_vec(),
    })
}
