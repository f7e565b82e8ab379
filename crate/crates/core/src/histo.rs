//! Soft histograms over a grid of the example domain, exact discrete
//! transport between histograms, lattice enumeration, and the McShane
//! extension of the Bayes predictor from lattice histograms to the simplex.

use std::collections::HashMap;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate::MixturePosterior;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::scalar::Scalar;
use crate::stats;
use crate::taskgen::{MixtureSpec, Prompt, TaskDraw};

/// Largest lattice the enumerator will build.
pub const LATTICE_LIMIT: u128 = 2_000_000;

/// Hat-function fractions are snapped to multiples of this so the tensor
/// weights of every point sum to exactly one.
const SNAP: f64 = (1u64 << 24) as f64;

/// Tensor grid of piecewise-linear hat functions on a box.
///
/// Nodes sit on `m_per_dim` equally spaced knots per axis including both
/// endpoints; node `j` has multi-index `(j mod n, j div n)` in two
/// dimensions (first axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPartition {
    pub d_eff: usize,
    pub m_per_dim: usize,
    pub m: usize,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    /// Knot spacing per axis.
    pub delta: Vec<f64>,
    /// Node coordinates, `m × d_eff` row-major.
    pub nodes: Vec<f64>,
}

/// Builds the hat-function partition on `[low, high]`.
pub fn build_grid(d_eff: usize, m_per_dim: usize, low: &[f64], high: &[f64]) -> Result<GridPartition> {
    if !(1..=2).contains(&d_eff) {
        return Err(Error::Unsupported(format!("grid dimension {d_eff} (supported: 1, 2)")));
    }
    if m_per_dim < 2 {
        return Err(Error::config("histo.m_per_dim", "need at least two knots per axis"));
    }
    if low.len() != d_eff || high.len() != d_eff || low.iter().zip(high).any(|(l, h)| !(l < h)) {
        return Err(Error::config("histo.domain", "domain box must have low < high on every axis"));
    }
    let delta: Vec<f64> = low
        .iter()
        .zip(high)
        .map(|(l, h)| (h - l) / (m_per_dim - 1) as f64)
        .collect();
    let m = m_per_dim.pow(d_eff as u32);
    let knot = |a: usize, i: usize| {
        if i + 1 == m_per_dim {
            high[a]
        } else {
            low[a] + delta[a] * i as f64
        }
    };
    let mut nodes = Vec::with_capacity(m * d_eff);
    for j in 0..m {
        let mut rest = j;
        for a in 0..d_eff {
            nodes.push(knot(a, rest % m_per_dim));
            rest /= m_per_dim;
        }
    }
    Ok(GridPartition {
        d_eff,
        m_per_dim,
        m,
        low: low.to_vec(),
        high: high.to_vec(),
        delta,
        nodes,
    })
}

impl GridPartition {
    pub fn node(&self, j: usize) -> &[f64] {
        &self.nodes[j * self.d_eff..(j + 1) * self.d_eff]
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .zip(self.low.iter().zip(&self.high))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// Per axis: lower knot index and snapped fraction toward the next knot.
    fn cell(&self, a: usize, v: f64) -> (usize, f64) {
        let t = (v - self.low[a]) / self.delta[a];
        let last = self.m_per_dim - 2;
        let i = (t.floor().max(0.0) as usize).min(last);
        let f = ((t - i as f64).clamp(0.0, 1.0) * SNAP).round() / SNAP;
        (i, f)
    }

    /// Nonzero hat activations at `u` as `(node, weight)` pairs.
    pub fn activations(&self, u: &[f64]) -> Result<Vec<(usize, f64)>> {
        if u.len() != self.d_eff || !self.contains(u) {
            return Err(Error::OutsideDomain(u.to_vec()));
        }
        let n = self.m_per_dim;
        let mut out: Vec<(usize, f64)> = vec![(0, 1.0)];
        let mut stride = 1;
        for (a, &v) in u.iter().enumerate() {
            let (i, f) = self.cell(a, v);
            let mut next = Vec::with_capacity(out.len() * 2);
            for &(j, w) in &out {
                if 1.0 - f > 0.0 {
                    next.push((j + i * stride, w * (1.0 - f)));
                }
                if f > 0.0 {
                    next.push((j + (i + 1) * stride, w * f));
                }
            }
            out = next;
            stride *= n;
        }
        Ok(out)
    }

    /// Dense vector `(φ_1(u), …, φ_m(u))`.
    pub fn phi(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.m];
        for (j, w) in self.activations(u)? {
            v[j] += w;
        }
        Ok(v)
    }

    /// `‖r_j − r_l‖^α` for all node pairs.
    pub fn cost_matrix(&self, alpha: f64) -> CostMatrix<f64> {
        let m = self.m;
        let mut c = vec![0.0; m * m];
        for j in 0..m {
            for l in 0..m {
                let d2: f64 = self
                    .node(j)
                    .iter()
                    .zip(self.node(l))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                c[j * m + l] = if alpha == 1.0 { d2.sqrt() } else { d2.sqrt().powf(alpha) };
            }
        }
        CostMatrix { n: m, c }
    }

    pub fn diameter(&self) -> f64 {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| (h - l) * (h - l))
            .sum::<f64>()
            .sqrt()
    }
}

/// A point of the simplex built from `k` examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexHistogram {
    pub s: Vec<f64>,
    pub k: usize,
}

/// `s = (1/k) Σ_i φ(u_i)`.
pub fn soft_hist(grid: &GridPartition, us: &[Vec<f64>]) -> Result<SimplexHistogram> {
    let k = us.len();
    let mut s = vec![0.0; grid.m];
    for u in us {
        for (j, w) in grid.activations(u)? {
            s[j] += w;
        }
    }
    let kk = k as f64;
    s.iter_mut().for_each(|v| *v /= kk);
    Ok(SimplexHistogram { s, k })
}

/// Dense symmetric ground cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct CostMatrix<S = f64> {
    pub n: usize,
    pub c: Vec<S>,
}

impl<S: Scalar> CostMatrix<S> {
    #[inline]
    pub fn get(&self, j: usize, l: usize) -> S {
        self.c[j * self.n + l]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TransportResult<S = f64> {
    pub cost: S,
    /// Nonzero plan entries `(j, l, mass)`.
    pub plan: Vec<(usize, usize, S)>,
}

/// Exact optimal transport between `s` and `t` under `cost` by successive
/// shortest paths with potentials.
///
/// Mass common to both marginals stays in place (optimal for any metric
/// cost); the remaining excess is routed to the deficits along shortest
/// paths of the residual bipartite graph.
pub fn discrete_w1<S: Scalar>(s: &[S], t: &[S], cost: &CostMatrix<S>) -> Result<TransportResult<S>> {
    let n = s.len();
    if t.len() != n || cost.n != n {
        return Err(Error::Infeasible(format!("marginal sizes {} and {} on {} nodes", n, t.len(), cost.n)));
    }
    let total_s: S = s.iter().copied().sum();
    let total_t: S = t.iter().copied().sum();
    let tol = S::lit(1e-10).max(S::epsilon() * S::lit(64.0));
    if (total_s - total_t).abs() > tol || s.iter().chain(t).any(|v| *v < -tol) {
        return Err(Error::Infeasible(format!("marginal masses {total_s} and {total_t}")));
    }
    let mut plan = Vec::new();
    let mut sources = Vec::new();
    let mut sinks = Vec::new();
    let mut supply = Vec::new();
    let mut demand = Vec::new();
    for j in 0..n {
        let shared = s[j].min(t[j]).max(S::zero());
        if shared > S::zero() {
            plan.push((j, j, shared));
        }
        if s[j] > t[j] {
            sources.push(j);
            supply.push(s[j] - t[j]);
        } else if t[j] > s[j] {
            sinks.push(j);
            demand.push(t[j] - s[j]);
        }
    }
    let (ns, nd) = (sources.len(), sinks.len());
    if ns == 0 || nd == 0 {
        return Ok(TransportResult { cost: S::zero(), plan });
    }
    let c = |a: usize, b: usize| cost.get(sources[a], sinks[b]);
    let mut flow = vec![S::zero(); ns * nd];
    // Potentials: exact shortest distances from the super source initially.
    let mut pot_s = vec![S::zero(); ns];
    let mut pot_t: Vec<S> = (0..nd)
        .map(|b| (0..ns).map(|a| c(a, b)).fold(S::infinity(), S::min))
        .collect();
    let eps = S::epsilon() * S::lit(16.0);
    let inf = S::infinity();
    let mut dist_s = vec![inf; ns];
    let mut dist_t = vec![inf; nd];
    let mut prev_t = vec![usize::MAX; nd];
    let mut prev_s = vec![usize::MAX; ns];
    let mut done_s = vec![false; ns];
    let mut done_t = vec![false; nd];
    let max_iter = 4 * (ns + nd) * (ns + nd) + 16;
    for _ in 0..max_iter {
        if supply.iter().all(|v| *v <= eps) || demand.iter().all(|v| *v <= eps) {
            break;
        }
        // Dense Dijkstra on reduced costs.
        dist_s.iter_mut().for_each(|v| *v = inf);
        dist_t.iter_mut().for_each(|v| *v = inf);
        done_s.iter_mut().for_each(|v| *v = false);
        done_t.iter_mut().for_each(|v| *v = false);
        prev_s.iter_mut().for_each(|v| *v = usize::MAX);
        for a in 0..ns {
            if supply[a] > eps {
                dist_s[a] = (-pot_s[a]).max(S::zero());
            }
        }
        loop {
            let mut best = inf;
            let mut pick = None;
            for a in 0..ns {
                if !done_s[a] && dist_s[a] < best {
                    best = dist_s[a];
                    pick = Some((true, a));
                }
            }
            for b in 0..nd {
                if !done_t[b] && dist_t[b] < best {
                    best = dist_t[b];
                    pick = Some((false, b));
                }
            }
            let Some((is_src, u)) = pick else { break };
            if is_src {
                done_s[u] = true;
                for b in 0..nd {
                    let rc = (c(u, b) + pot_s[u] - pot_t[b]).max(S::zero());
                    if best + rc < dist_t[b] {
                        dist_t[b] = best + rc;
                        prev_t[b] = u;
                    }
                }
            } else {
                done_t[u] = true;
                for a in 0..ns {
                    if flow[a * nd + u] > eps {
                        let rc = (pot_t[u] - c(a, u) - pot_s[a]).max(S::zero());
                        if best + rc < dist_s[a] {
                            dist_s[a] = best + rc;
                            prev_s[a] = u;
                        }
                    }
                }
            }
        }
        // Closest sink with remaining demand.
        let mut target = None;
        let mut best = inf;
        for b in 0..nd {
            if demand[b] > eps && dist_t[b] < best {
                best = dist_t[b];
                target = Some(b);
            }
        }
        let Some(sink) = target else {
            return Err(Error::Infeasible("no augmenting path".into()));
        };
        let reach = dist_s
            .iter()
            .chain(&dist_t)
            .filter(|v| v.is_finite())
            .fold(S::zero(), |m, &v| m.max(v));
        for a in 0..ns {
            pot_s[a] += if dist_s[a].is_finite() { dist_s[a] } else { reach };
        }
        for b in 0..nd {
            pot_t[b] += if dist_t[b].is_finite() { dist_t[b] } else { reach };
        }
        // Walk the path back: sink ← source (← sink ← source)*.
        let mut bottleneck = demand[sink];
        let mut b = sink;
        let mut path = Vec::new();
        loop {
            let a = prev_t[b];
            path.push((a, b));
            if prev_s[a] == usize::MAX {
                bottleneck = bottleneck.min(supply[a]);
                break;
            }
            let b2 = prev_s[a];
            bottleneck = bottleneck.min(flow[a * nd + b2]);
            b = b2;
        }
        for &(a, b) in &path {
            flow[a * nd + b] += bottleneck;
        }
        // Reverse edges used between consecutive forward edges.
        for &(a, _) in &path[..path.len() - 1] {
            flow[a * nd + prev_s[a]] -= bottleneck;
        }
        let (a_first, _) = *path.last().expect("path is nonempty");
        supply[a_first] -= bottleneck;
        demand[sink] -= bottleneck;
    }
    let mut total = S::zero();
    for a in 0..ns {
        for b in 0..nd {
            let f = flow[a * nd + b];
            if f > S::zero() {
                total += f * c(a, b);
                plan.push((sources[a], sinks[b], f));
            }
        }
    }
    Ok(TransportResult { cost: total, plan })
}

/// `W₁` between histograms on a uniform one-dimensional grid:
/// `δ Σ_j |Σ_{i≤j} (s_i − t_i)|`.
pub fn w1_cdf_1d(s: &[f64], t: &[f64], delta: f64) -> f64 {
    let mut acc = 0.0;
    let mut total = 0.0;
    for (a, b) in s.iter().zip(t) {
        acc += a - b;
        total += acc.abs();
    }
    total * delta
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

/// Number of points of `Δ_k` on `m` nodes: `C(k + m − 1, m − 1)`.
pub fn lattice_size(k: usize, m: usize) -> u128 {
    binomial((k + m - 1) as u128, (m - 1) as u128)
}

/// All compositions of `k` into `m` nonnegative parts, in lexicographic
/// order of the count vectors (last coordinate fastest).
pub fn enumerate_lattice(k: usize, m: usize) -> Result<Vec<Vec<u16>>> {
    let size = lattice_size(k, m);
    if size > LATTICE_LIMIT {
        return Err(Error::LatticeTooLarge {
            k,
            m,
            size,
            limit: LATTICE_LIMIT,
        });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut cur = vec![0u16; m];
    fn rec(pos: usize, left: usize, cur: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
        let m = cur.len();
        if pos + 1 == m {
            cur[pos] = left as u16;
            out.push(cur.clone());
            return;
        }
        for v in (0..=left).rev() {
            cur[pos] = v as u16;
            rec(pos + 1, left - v, cur, out);
        }
        cur[pos] = 0;
    }
    rec(0, k, &mut cur, &mut out);
    Ok(out)
}

/// `ρ_c(v)` for every `v ∈ Δ_k` at one query `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeCache {
    pub k: usize,
    pub m: usize,
    pub query: Vec<f64>,
    pub counts: Vec<Vec<u16>>,
    pub values: Vec<f64>,
    index: HashMap<Vec<u16>, usize>,
}

impl LatticeCache {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lookup(&self, counts: &[u16]) -> Option<f64> {
        self.index.get(counts).map(|&i| self.values[i])
    }

    /// Largest `|ρ(v) − ρ(v')| / W(v, v')` over lattice neighbours that
    /// differ by one unit moved between two nodes. Any Lipschitz constant at
    /// least this large makes the McShane extension exact on the lattice.
    pub fn lattice_lipschitz(&self, cost: &CostMatrix<f64>) -> f64 {
        let k = self.k as f64;
        let mut best = 0.0f64;
        let mut moved = vec![0u16; self.m];
        for (i, v) in self.counts.iter().enumerate() {
            for j in (0..self.m).filter(|&j| v[j] > 0) {
                for l in 0..self.m {
                    if l == j {
                        continue;
                    }
                    moved.copy_from_slice(v);
                    moved[j] -= 1;
                    moved[l] += 1;
                    if let Some(&i2) = self.index.get(&moved) {
                        let w = cost.get(j, l) / k;
                        if w > 0.0 {
                            best = best.max((self.values[i] - self.values[i2]).abs() / w);
                        }
                    }
                }
            }
        }
        best
    }
}

/// The prompt with `n_j` copies of node `r_j = (x_j, y_j)` and query `c`.
pub fn lattice_prompt(grid: &GridPartition, counts: &[u16], query: &[f64]) -> Prompt {
    let d = grid.d_eff - 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (j, &n) in counts.iter().enumerate() {
        let r = grid.node(j);
        for _ in 0..n {
            xs.extend_from_slice(&r[..d]);
            ys.push(r[d]);
        }
    }
    xs.extend_from_slice(query);
    Prompt {
        d,
        xs,
        ys,
        y_last: 0.0,
        task: TaskDraw {
            family_index: 0,
            params: Vec::new(),
        },
    }
}

/// Bayes prediction at `query` after the context pairs `us` (each `[x; y]`).
pub fn bayes_on_examples(spec: &MixtureSpec, us: &[Vec<f64>], query: &[f64]) -> Result<f64> {
    let d = spec.d_feat();
    let mut mp = MixturePosterior::<f64>::prior(spec);
    for u in us {
        mp = mp.update(spec, &u[..d], u[d])?;
    }
    Ok(mp.bayes_predict(spec, query))
}

/// Evaluates `ρ_c` on the whole lattice `Δ_k`.
pub fn build_cache(spec: &MixtureSpec, grid: &GridPartition, k: usize, query: &[f64]) -> Result<LatticeCache> {
    let counts = enumerate_lattice(k, grid.m)?;
    let values = counts
        .par_iter()
        .map(|n| {
            let pr = lattice_prompt(grid, n, query);
            Ok(MixturePosterior::<f64>::from_prompt(spec, &pr, k)?.bayes_predict(spec, query))
        })
        .collect::<Result<Vec<f64>>>()?;
    let index = counts.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    Ok(LatticeCache {
        k,
        m: grid.m,
        query: query.to_vec(),
        counts,
        values,
        index,
    })
}

/// `ρ*_c(s) = min_{v ∈ Δ_k} [ρ_c(v) + L · W(s, v)]`.
pub fn mcshane_eval(
    s: &SimplexHistogram,
    query: &[f64],
    l: f64,
    cost: &CostMatrix<f64>,
    cache: &LatticeCache,
) -> Result<f64> {
    if cache.query != query || cache.m != s.s.len() || cache.k == 0 {
        return Err(Error::MissingCache(format!(
            "no lattice values for query {query:?} on {} nodes",
            s.s.len()
        )));
    }
    if cache.len() as u128 != lattice_size(cache.k, cache.m) {
        return Err(Error::MissingCache(format!(
            "{} of {} lattice points cached",
            cache.len(),
            lattice_size(cache.k, cache.m)
        )));
    }
    let k = cache.k as f64;
    let mut best = f64::INFINITY;
    let mut v = vec![0.0; cache.m];
    for (counts, &rho) in cache.counts.iter().zip(&cache.values) {
        if rho >= best {
            continue;
        }
        for (vj, &n) in v.iter_mut().zip(counts) {
            *vj = n as f64 / k;
        }
        let w = if l == 0.0 { 0.0 } else { discrete_w1(&s.s, &v, cost)?.cost };
        best = best.min(rho + l * w);
    }
    Ok(best)
}

/// Settings of the approximation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub k: usize,
    /// Total node counts (perfect squares for a two-dimensional grid).
    pub m_list: Vec<usize>,
    /// Prompts per query.
    pub n_mc: usize,
    pub n_queries: usize,
    /// Output range `[−y_max, y_max]` of the example grid.
    pub y_max: f64,
    pub alpha: f64,
    /// Hölder constant of the Bayes predictor (lower bound on `L`).
    pub l_holder: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxRow {
    pub m: usize,
    pub k: usize,
    pub d_eff: usize,
    /// Lipschitz constant of the extension, shared by all rows.
    pub l: f64,
    pub sup_error: f64,
    pub mean_error: f64,
    pub n_mc: usize,
    /// Largest error at lattice prompts (exact recovery means 0).
    pub lattice_error: f64,
}

pub fn write_sweep_csv<W: Write>(rows: &[ApproxRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["m", "k", "d_eff", "L", "sup_error", "mean_error", "n_mc"])?;
    for r in rows {
        w.write_record(&[
            r.m.to_string(),
            r.k.to_string(),
            r.d_eff.to_string(),
            r.l.to_string(),
            r.sup_error.to_string(),
            r.mean_error.to_string(),
            r.n_mc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Query panel: evenly spaced interior points of the input interval.
pub fn query_panel(spec: &MixtureSpec, n: usize) -> Vec<Vec<f64>> {
    let (lo, hi) = (spec.input.low[0], spec.input.high[0]);
    (0..n)
        .map(|i| vec![lo + (hi - lo) * (i as f64 + 0.5) / n as f64])
        .collect()
}

/// Context of `k` examples from a prior task, redrawn until every output
/// lies in `[−y_max, y_max]`.
pub fn bounded_context(spec: &MixtureSpec, k: usize, y_max: f64, master: u64, index: u64) -> Result<Vec<Vec<f64>>> {
    for attempt in 0..10_000u64 {
        let idx = index.wrapping_mul(10_007).wrapping_add(attempt);
        let task = crate::taskgen::sample_task(spec, &mut rng::stream(master, tags::TASK, idx))?;
        let mut in_rng = rng::stream(master, tags::INPUT, idx);
        let mut noise_rng = rng::stream(master, tags::NOISE, idx);
        let mut us = Vec::with_capacity(k);
        for _ in 0..k {
            let x = spec.input.sample(&mut in_rng);
            let e: f64 = StandardNormal.sample(&mut noise_rng);
            let y = crate::taskgen::eval_task(&task, spec, &x) + spec.sigma_eps * e;
            let mut u = x;
            u.push(y);
            us.push(u);
        }
        if us.iter().all(|u| u[u.len() - 1].abs() <= y_max) {
            return Ok(us);
        }
    }
    Err(Error::config("histo.y_max", "output range too narrow: no context accepted"))
}

/// Approximation error of the McShane decoder on soft histograms, for each
/// grid size in `m_list`. Contexts and queries are shared across sizes, and
/// so is `L`: the largest of the Hölder estimate and every lattice
/// Lipschitz constant, which keeps the extension exact on every lattice.
pub fn approx_error_sweep(spec: &MixtureSpec, set: &SweepSettings, master: u64) -> Result<Vec<ApproxRow>> {
    if spec.d_feat() != 1 {
        return Err(Error::Unsupported("approximation sweep needs one-dimensional inputs".into()));
    }
    let d_eff = 2;
    let queries = query_panel(spec, set.n_queries);
    let contexts: Vec<Vec<Vec<Vec<f64>>>> = (0..set.n_queries)
        .map(|q| {
            (0..set.n_mc as u64)
                .map(|i| bounded_context(spec, set.k, set.y_max, master, (q as u64) << 32 | i))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut levels = Vec::new();
    let mut l = set.l_holder;
    for &m in &set.m_list {
        let mpd = (m as f64).sqrt().round() as usize;
        if mpd * mpd != m {
            return Err(Error::config("histo.m_list", format!("{m} is not a perfect square")));
        }
        let lo = [spec.input.low[0], -set.y_max];
        let hi = [spec.input.high[0], set.y_max];
        let grid = build_grid(d_eff, mpd, &lo, &hi)?;
        let cost = grid.cost_matrix(set.alpha);
        let caches = queries
            .iter()
            .map(|q| build_cache(spec, &grid, set.k, q))
            .collect::<Result<Vec<_>>>()?;
        for c in &caches {
            l = l.max(c.lattice_lipschitz(&cost) * (1.0 + 1e-6));
        }
        levels.push((m, grid, cost, caches));
    }
    let mut rows = Vec::new();
    for (m, grid, cost, caches) in &levels {
        let mut errors = Vec::new();
        let mut lattice_error = 0.0f64;
        for (q, (query, cache)) in queries.iter().zip(caches).enumerate() {
            let errs = contexts[q]
                .par_iter()
                .map(|us| {
                    let s = soft_hist(grid, us)?;
                    let approx = mcshane_eval(&s, query, l, cost, cache)?;
                    Ok((bayes_on_examples(spec, us, query)? - approx).abs())
                })
                .collect::<Result<Vec<f64>>>()?;
            errors.extend(errs);
            // Exact recovery at a spread of lattice prompts.
            for counts in cache.counts.iter().step_by((cache.len() / 8).max(1)) {
                let us: Vec<Vec<f64>> = counts
                    .iter()
                    .enumerate()
                    .flat_map(|(j, &n)| std::iter::repeat_n(grid.node(j).to_vec(), n as usize))
                    .collect();
                let s = soft_hist(grid, &us)?;
                let approx = mcshane_eval(&s, query, l, cost, cache)?;
                lattice_error = lattice_error.max((bayes_on_examples(spec, &us, query)? - approx).abs());
            }
        }
        rows.push(ApproxRow {
            m: *m,
            k: set.k,
            d_eff,
            l,
            sup_error: errors.iter().fold(0.0, |a: f64, &b| a.max(b)),
            mean_error: errors.iter().sum::<f64>() / errors.len().max(1) as f64,
            n_mc: errors.len(),
            lattice_error,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log sup_error` against `log m`.
pub fn loglog_slope(rows: &[ApproxRow]) -> f64 {
    let x: Vec<f64> = rows.iter().map(|r| (r.m as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.sup_error.ln()).collect();
    stats::ols_slope(&x, &y)
}
