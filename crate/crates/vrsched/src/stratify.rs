//! Size-constrained stratification of a feature set.
//!
//! Strata come from a kernelized k-means whose assignment step is a greedy
//! pass that weights each candidate distance by the interim cluster size and
//! reserves enough unassigned rows to fill every cluster to the minimum
//! size. An exact minimum-cost-flow assignment of the unweighted relaxation
//! is included as a baseline for measuring the greedy gap.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GramMatrix;
use crate::parallel::map_indexed;
use crate::seed::stream_rng;
use crate::util::{kahan_total, KahanSum};

/// A partition of n samples into k strata, each at least n_min large
/// (n_min = 0 disables the size floor).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawStratification")]
pub struct Stratification {
    assignment: Vec<usize>,
    sizes: Vec<usize>,
    k: usize,
    n_min: usize,
}

#[derive(Deserialize)]
struct RawStratification {
    assignment: Vec<usize>,
    k: usize,
    n_min: usize,
}

impl TryFrom<RawStratification> for Stratification {
    type Error = Error;

    fn try_from(raw: RawStratification) -> Result<Self> {
        Stratification::new(raw.assignment, raw.k, raw.n_min)
    }
}

impl Stratification {
    pub fn new(assignment: Vec<usize>, k: usize, n_min: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if assignment.is_empty() {
            return Err(Error::InvalidConfig("assignment is empty".into()));
        }
        let mut sizes = vec![0usize; k];
        for (i, &h) in assignment.iter().enumerate() {
            if h >= k {
                return Err(Error::InvalidConfig(format!(
                    "row {i} assigned to stratum {h}, but k = {k}"
                )));
            }
            sizes[h] += 1;
        }
        for (h, &s) in sizes.iter().enumerate() {
            if s < n_min {
                return Err(Error::InvalidConfig(format!(
                    "stratum {h} has {s} members, below the minimum size {n_min}"
                )));
            }
        }
        Ok(Self {
            assignment,
            sizes,
            k,
            n_min,
        })
    }

    /// One stratum holding everything.
    pub fn single(n: usize) -> Result<Self> {
        Self::new(vec![0; n], 1, n)
    }

    /// Every sample in its own stratum.
    pub fn singletons(n: usize) -> Result<Self> {
        Self::new((0..n).collect(), n, 1)
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_min(&self) -> usize {
        self.n_min
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Stratum index of sample i.
    pub fn stratum_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    /// Size of the stratum containing sample i.
    pub fn weight_of(&self, i: usize) -> usize {
        self.sizes[self.assignment[i]]
    }

    /// Member indices per stratum, each list in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &h) in self.assignment.iter().enumerate() {
            out[h].push(i);
        }
        out
    }
}

/// An n x k matrix of squared point-to-centroid distances.
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    values: Array2<f64>,
}

impl DistanceMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, k) = values.dim();
        if n == 0 || k == 0 {
            return Err(Error::InvalidConfig(format!(
                "distance matrix shape {n}x{k}: need at least one row and one column"
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "distances must be finite and non-negative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, i: usize, h: usize) -> f64 {
        self.values[(i, h)]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.k();
        let flat = self
            .values
            .as_slice()
            .expect("distance storage is contiguous row-major");
        &flat[i * k..(i + 1) * k]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Squared kernel-space distance from every sample to every stratum
/// centroid, computed from a square Gram matrix alone.
///
/// Entry (i, h) is G_ii - (2/|S_h|) sum_{j in S_h} G_ij
/// + (1/|S_h|^2) sum_{j, j' in S_h} G_jj', clamped at zero.
pub fn centroid_distances(g: &GramMatrix, strat: &Stratification) -> Result<DistanceMatrix> {
    if !g.is_square() {
        return Err(Error::DimensionMismatch {
            left: g.n_rows(),
            right: g.n_cols(),
        });
    }
    if g.n_rows() != strat.n() {
        return Err(Error::DimensionMismatch {
            left: g.n_rows(),
            right: strat.n(),
        });
    }
    let members = strat.members();
    if let Some(h) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::EmptyStratum { stratum: h });
    }
    let k = strat.k();
    // Centroid self-similarity per stratum.
    let centroid_norms: Vec<f64> = members
        .iter()
        .map(|m| {
            let mut acc = KahanSum::default();
            for &j in m {
                let row = g.row(j);
                for &j2 in m {
                    acc.add(row[j2]);
                }
            }
            acc.value() / (m.len() * m.len()) as f64
        })
        .collect();
    let n = strat.n();
    let rows = map_indexed(n, |i| {
        let gi = g.row(i);
        let mut out = Vec::with_capacity(k);
        for h in 0..k {
            let m = &members[h];
            let mut cross = KahanSum::default();
            for &j in m {
                cross.add(gi[j]);
            }
            let d = gi[i] - 2.0 * cross.value() / m.len() as f64 + centroid_norms[h];
            out.push(d.max(0.0));
        }
        out
    });
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, k), flat).expect("rows match declared shape");
    DistanceMatrix::new(values)
}

/// Instrumentation for the greedy assignment pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AssignStats {
    /// Number of (row, stratum) candidate scores formed; always n * k.
    pub candidate_evaluations: u64,
}

/// Greedy size-constrained assignment.
///
/// Rows are processed in order. Row i joins the stratum minimizing
/// P[i][h] * (n_h + 1) over the eligible strata, where n_h is the interim
/// size. While more unassigned rows remain than are needed to fill every
/// stratum to n_min, all strata are eligible; once the remainder equals the
/// total deficit, only deficient strata are. Ties keep the lowest stratum
/// index.
pub fn assign_constrained(p: &DistanceMatrix, n_min: usize) -> Result<Stratification> {
    assign_constrained_traced(p, n_min).map(|(s, _)| s)
}

/// [`assign_constrained`] plus instrumentation.
pub fn assign_constrained_traced(
    p: &DistanceMatrix,
    n_min: usize,
) -> Result<(Stratification, AssignStats)> {
    let (n, k) = (p.n(), p.k());
    if n < k * n_min {
        return Err(Error::InfeasibleConstraint { n, k, n_min });
    }
    let mut sizes = vec![0usize; k];
    let mut assignment = vec![0usize; n];
    // Unfilled seats across all strata; starts at k * n_min and the remaining
    // row count can never drop below it.
    let mut deficit = k * n_min;
    let mut stats = AssignStats::default();
    for i in 0..n {
        let remaining = n - i;
        let unconstrained = remaining > deficit;
        let row = p.row(i);
        let mut best: Option<(usize, f64)> = None;
        for h in 0..k {
            stats.candidate_evaluations += 1;
            if !unconstrained && sizes[h] >= n_min {
                continue;
            }
            let score = row[h] * (sizes[h] + 1) as f64;
            if best.map_or(true, |(_, s)| score < s) {
                best = Some((h, score));
            }
        }
        let (h, _) = best.expect("deficit bound keeps at least one stratum eligible");
        if sizes[h] < n_min {
            deficit -= 1;
        }
        sizes[h] += 1;
        assignment[i] = h;
    }
    let strat = Stratification::new(assignment, k, n_min)?;
    Ok((strat, stats))
}

/// Size-weighted assignment cost: sum over strata of |S_h| times the summed
/// distances of the stratum's members to centroid h.
pub fn weighted_assignment_objective(p: &DistanceMatrix, strat: &Stratification) -> Result<f64> {
    check_assignment_shape(p, strat)?;
    let mut per_stratum = vec![KahanSum::default(); strat.k()];
    for (i, &h) in strat.assignment().iter().enumerate() {
        per_stratum[h].add(p.get(i, h));
    }
    Ok(kahan_total(
        per_stratum
            .iter()
            .zip(strat.sizes())
            .map(|(acc, &s)| acc.value() * s as f64),
    ))
}

/// Unweighted assignment cost: sum over rows of the distance to the assigned
/// centroid.
pub fn unweighted_assignment_objective(p: &DistanceMatrix, strat: &Stratification) -> Result<f64> {
    check_assignment_shape(p, strat)?;
    Ok(kahan_total(
        strat
            .assignment()
            .iter()
            .enumerate()
            .map(|(i, &h)| p.get(i, h)),
    ))
}

fn check_assignment_shape(p: &DistanceMatrix, strat: &Stratification) -> Result<()> {
    if p.n() != strat.n() {
        return Err(Error::DimensionMismatch {
            left: p.n(),
            right: strat.n(),
        });
    }
    if p.k() != strat.k() {
        return Err(Error::DimensionMismatch {
            left: p.k(),
            right: strat.k(),
        });
    }
    Ok(())
}

/// Size-weighted within-stratum scatter computed directly from the Gram
/// matrix: sum over strata of |S_h| sum_{i in S_h} G_ii minus the block sum
/// of G over S_h x S_h. Equals the size-weighted sum of squared distances to
/// the stratum centroids.
pub fn clustering_objective(g: &GramMatrix, strat: &Stratification) -> Result<f64> {
    if !g.is_square() || g.n_rows() != strat.n() {
        return Err(Error::DimensionMismatch {
            left: g.n_rows(),
            right: strat.n(),
        });
    }
    let members = strat.members();
    let mut total = KahanSum::default();
    for m in &members {
        if m.is_empty() {
            continue;
        }
        let mut diag = KahanSum::default();
        let mut block = KahanSum::default();
        for &j in m {
            let row = g.row(j);
            diag.add(row[j]);
            for &j2 in m {
                block.add(row[j2]);
            }
        }
        total.add(m.len() as f64 * diag.value() - block.value());
    }
    Ok(total.value())
}

/// Assignment step used inside [`kernel_kmeans`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentRule {
    /// Single greedy pass scoring candidates by distance times interim size.
    #[default]
    GreedyWeighted,
    /// Exact transportation solve of the unweighted assignment relaxation.
    UnweightedLp,
}

/// Knobs for [`kernel_kmeans`].
#[derive(Clone, Copy, Debug)]
pub struct IterationOptions {
    pub max_iters: usize,
    pub seed: u64,
    /// Shuffle the row order before each assignment pass instead of
    /// processing rows in index order. Only meaningful for the greedy rule;
    /// the transportation solve is order-free.
    pub randomize_row_order: bool,
    pub assignment: AssignmentRule,
}

impl Default for IterationOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            seed: 0,
            randomize_row_order: false,
            assignment: AssignmentRule::GreedyWeighted,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KmeansOutcome {
    pub stratification: Stratification,
    /// Scatter objective after seeding and after each refinement pass.
    pub objective_trace: Vec<f64>,
    /// Refinement passes executed (excludes the seeding assignment).
    pub iterations: usize,
    /// Whether the assignment reached a fixed point before max_iters.
    pub converged: bool,
}

const STREAM_SEEDING: u64 = 0;
const STREAM_ROW_ORDER: u64 = 1;

/// Size-constrained kernel k-means over a square Gram matrix.
///
/// Seeding picks k rows by distance-proportional sampling in kernel space;
/// refinement alternates centroid distances and the constrained assignment
/// rule from the options. The returned stratification is the visited iterate
/// with the lowest scatter objective, which the trace records per pass.
pub fn kernel_kmeans(
    g: &GramMatrix,
    k: usize,
    n_min: usize,
    opts: &IterationOptions,
) -> Result<KmeansOutcome> {
    if !g.is_square() {
        return Err(Error::DimensionMismatch {
            left: g.n_rows(),
            right: g.n_cols(),
        });
    }
    let n = g.n_rows();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidConfig(format!(
            "cannot form k = {k} strata from {n} samples"
        )));
    }
    if n < k * n_min {
        return Err(Error::InfeasibleConstraint { n, k, n_min });
    }

    let assign = |p: &DistanceMatrix| match opts.assignment {
        AssignmentRule::GreedyWeighted => assign_constrained(p, n_min),
        AssignmentRule::UnweightedLp => assign_unweighted(p, n_min),
    };
    let seeds = sample_seeds(g, k, opts.seed);
    let p0 = seed_distances(g, &seeds)?;
    let mut strat = repair_empty(assign(&p0)?, &p0)?;

    let mut trace = vec![clustering_objective(g, &strat)?];
    let mut best_obj = trace[0];
    let mut best = strat.clone();
    let mut iterations = 0;
    let mut converged = false;
    let mut order_rng = stream_rng(opts.seed, STREAM_ROW_ORDER);

    for _ in 0..opts.max_iters {
        let p = centroid_distances(g, &strat)?;
        let next = if opts.randomize_row_order && opts.assignment == AssignmentRule::GreedyWeighted
        {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut order_rng);
            assign_in_order(&p, n_min, &order)?
        } else {
            assign(&p)?
        };
        let next = repair_empty(next, &p)?;
        iterations += 1;
        let obj = clustering_objective(g, &next)?;
        trace.push(obj);
        if obj < best_obj {
            best_obj = obj;
            best = next.clone();
        }
        if next.assignment() == strat.assignment() {
            converged = true;
            break;
        }
        strat = next;
    }

    Ok(KmeansOutcome {
        stratification: best,
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Distance-proportional seeding on kernel-space distances.
fn sample_seeds(g: &GramMatrix, k: usize, seed: u64) -> Vec<usize> {
    let n = g.n_rows();
    let mut rng = stream_rng(seed, STREAM_SEEDING);
    let mut seeds = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    seeds.push(first);
    let mut nearest = vec![f64::INFINITY; n];
    while seeds.len() < k {
        let s = *seeds.last().expect("at least one seed");
        let gs = g.row(s);
        for i in 0..n {
            let d = (g.get(i, i) - 2.0 * gs[i] + gs[s]).max(0.0);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 && total.is_finite() {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &d) in nearest.iter().enumerate() {
                u -= d;
                if u <= 0.0 && d > 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| fallback_unseeded(&seeds, n, &mut rng))
        } else {
            fallback_unseeded(&seeds, n, &mut rng)
        };
        seeds.push(next);
    }
    seeds
}

/// Uniform pick among rows not yet chosen as seeds; used when every residual
/// distance is zero (duplicate-heavy inputs).
fn fallback_unseeded(seeds: &[usize], n: usize, rng: &mut impl Rng) -> usize {
    let taken: std::collections::HashSet<usize> = seeds.iter().copied().collect();
    let free: Vec<usize> = (0..n).filter(|i| !taken.contains(i)).collect();
    free[rng.random_range(0..free.len())]
}

/// Squared kernel distances from every row to each seed row.
fn seed_distances(g: &GramMatrix, seeds: &[usize]) -> Result<DistanceMatrix> {
    let n = g.n_rows();
    let mut values = Array2::zeros((n, seeds.len()));
    for i in 0..n {
        for (h, &s) in seeds.iter().enumerate() {
            values[(i, h)] = (g.get(i, i) - 2.0 * g.get(i, s) + g.get(s, s)).max(0.0);
        }
    }
    DistanceMatrix::new(values)
}

/// Runs the greedy pass over rows in the given order, then maps the result
/// back to original row indices.
fn assign_in_order(p: &DistanceMatrix, n_min: usize, order: &[usize]) -> Result<Stratification> {
    let (n, k) = (p.n(), p.k());
    let mut permuted = Array2::zeros((n, k));
    for (r, &i) in order.iter().enumerate() {
        for h in 0..k {
            permuted[(r, h)] = p.get(i, h);
        }
    }
    let shuffled = assign_constrained(&DistanceMatrix::new(permuted)?, n_min)?;
    let mut assignment = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        assignment[i] = shuffled.assignment()[r];
    }
    Stratification::new(assignment, k, n_min)
}

/// With n_min = 0 the greedy pass can leave strata empty; donate the row
/// farthest from its own centroid out of any multi-member stratum.
fn repair_empty(strat: Stratification, p: &DistanceMatrix) -> Result<Stratification> {
    if strat.sizes().iter().all(|&s| s > 0) {
        return Ok(strat);
    }
    let k = strat.k();
    let n_min = strat.n_min();
    let mut assignment = strat.assignment().to_vec();
    let mut sizes = strat.sizes().to_vec();
    for h in 0..k {
        while sizes[h] == 0 {
            let donor = (0..assignment.len())
                .filter(|&i| sizes[assignment[i]] > 1)
                .max_by(|&a, &b| {
                    p.get(a, assignment[a]).total_cmp(&p.get(b, assignment[b]))
                })
                .ok_or(Error::EmptyStratum { stratum: h })?;
            sizes[assignment[donor]] -= 1;
            assignment[donor] = h;
            sizes[h] += 1;
        }
    }
    Stratification::new(assignment, k, n_min)
}

/// Exact minimum of the unweighted assignment cost subject to the size
/// floor, via a unit-capacity minimum-cost flow.
pub fn assign_unweighted(p: &DistanceMatrix, n_min: usize) -> Result<Stratification> {
    let (n, k) = (p.n(), p.k());
    if n < k * n_min {
        return Err(Error::InfeasibleConstraint { n, k, n_min });
    }
    let assignment = flow::min_cost_assignment(p, n_min)?;
    Stratification::new(assignment, k, n_min)
}

mod flow {
    //! Successive-shortest-path minimum-cost flow specialized to the
    //! point-to-stratum transportation instance.

    use super::DistanceMatrix;
    use crate::error::{Error, Result};
    use std::cmp::Ordering;
    use std::collections::BinaryHeap;

    struct Arc {
        to: usize,
        cap: i64,
        cost: f64,
    }

    struct Network {
        arcs: Vec<Arc>,
        adj: Vec<Vec<usize>>,
    }

    impl Network {
        fn new(n_nodes: usize) -> Self {
            Self {
                arcs: Vec::new(),
                adj: vec![Vec::new(); n_nodes],
            }
        }

        fn add_edge(&mut self, u: usize, v: usize, cap: i64, cost: f64) {
            self.adj[u].push(self.arcs.len());
            self.arcs.push(Arc { to: v, cap, cost });
            self.adj[v].push(self.arcs.len());
            self.arcs.push(Arc {
                to: u,
                cap: 0,
                cost: -cost,
            });
        }
    }

    struct HeapItem {
        dist: f64,
        node: usize,
    }

    impl PartialEq for HeapItem {
        fn eq(&self, other: &Self) -> bool {
            self.dist == other.dist && self.node == other.node
        }
    }

    impl Eq for HeapItem {}

    impl PartialOrd for HeapItem {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }

    impl Ord for HeapItem {
        fn cmp(&self, other: &Self) -> Ordering {
            // Reversed on distance for a min-heap.
            other
                .dist
                .total_cmp(&self.dist)
                .then_with(|| other.node.cmp(&self.node))
        }
    }

    /// Routes one unit per point into strata; stratum h accepts up to n_min
    /// units directly and the surplus drains through a shared slack node, so
    /// a maximum flow fills every stratum to n_min exactly when feasible.
    pub(super) fn min_cost_assignment(p: &DistanceMatrix, n_min: usize) -> Result<Vec<usize>> {
        let (n, k) = (p.n(), p.k());
        let source = 0;
        let point = |i: usize| 1 + i;
        let stratum = |h: usize| 1 + n + h;
        let slack = 1 + n + k;
        let sink = slack + 1;
        let n_nodes = sink + 1;

        let mut net = Network::new(n_nodes);
        let mut point_arc_start = Vec::with_capacity(n);
        for i in 0..n {
            net.add_edge(source, point(i), 1, 0.0);
        }
        for i in 0..n {
            point_arc_start.push(net.arcs.len());
            for h in 0..k {
                net.add_edge(point(i), stratum(h), 1, p.get(i, h));
            }
        }
        for h in 0..k {
            net.add_edge(stratum(h), sink, n_min as i64, 0.0);
            net.add_edge(stratum(h), slack, n as i64, 0.0);
        }
        net.add_edge(slack, sink, (n - k * n_min) as i64, 0.0);

        let mut potential = vec![0.0f64; n_nodes];
        let mut routed = 0usize;
        while routed < n {
            // Dijkstra over reduced costs.
            let mut dist = vec![f64::INFINITY; n_nodes];
            let mut parent_arc = vec![usize::MAX; n_nodes];
            let mut done = vec![false; n_nodes];
            dist[source] = 0.0;
            let mut heap = BinaryHeap::new();
            heap.push(HeapItem {
                dist: 0.0,
                node: source,
            });
            while let Some(HeapItem { dist: du, node: u }) = heap.pop() {
                if done[u] {
                    continue;
                }
                done[u] = true;
                for &aid in &net.adj[u] {
                    let arc = &net.arcs[aid];
                    if arc.cap <= 0 || done[arc.to] {
                        continue;
                    }
                    let rc = (arc.cost + potential[u] - potential[arc.to]).max(0.0);
                    let nd = du + rc;
                    if nd < dist[arc.to] {
                        dist[arc.to] = nd;
                        parent_arc[arc.to] = aid;
                        heap.push(HeapItem {
                            dist: nd,
                            node: arc.to,
                        });
                    }
                }
            }
            if !dist[sink].is_finite() {
                return Err(Error::InfeasibleConstraint { n, k, n_min });
            }
            for v in 0..n_nodes {
                if dist[v].is_finite() {
                    potential[v] += dist[v];
                }
            }
            // Augment one unit along the parent chain.
            let mut v = sink;
            while v != source {
                let aid = parent_arc[v];
                net.arcs[aid].cap -= 1;
                net.arcs[aid ^ 1].cap += 1;
                v = net.arcs[aid ^ 1].to;
            }
            routed += 1;
        }

        let mut assignment = vec![usize::MAX; n];
        for (i, &start) in point_arc_start.iter().enumerate() {
            for h in 0..k {
                if net.arcs[start + 2 * h].cap == 0 {
                    assignment[i] = h;
                    break;
                }
            }
            if assignment[i] == usize::MAX {
                return Err(Error::InvalidConfig(
                    "flow left a point unassigned".into(),
                ));
            }
        }
        Ok(assignment)
    }
}
