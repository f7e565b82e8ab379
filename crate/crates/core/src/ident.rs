//! Task-type identification: drift and concentration constants, simulated
//! posterior-mass traces on the wrong families, and the checks built on
//! them.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate::{predictive_kl, MixturePosterior};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::stats::{self, Estimate};
use crate::taskgen::{MixtureSpec, TaskDraw, TaskFamilySpec};

/// Default burn-in before the drift premise is expected to hold.
pub const DEFAULT_K_BURN: usize = 4;

/// Constants attached to one wrong family `j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WrongFamily {
    pub j: usize,
    /// Squared `L²(P_X)` distance from the true task to family `j`.
    pub delta_sq: f64,
    pub d_j: f64,
    pub nu_sq: f64,
    pub b_j: f64,
    pub c_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub i_star: usize,
    pub sigma_eps: f64,
    pub b_f: f64,
    /// `√(B_X² + 1)`.
    pub b_phi: f64,
    /// `√(R_max − r0 + 1) · G_max`, when a series family is present.
    pub b_psi: Option<f64>,
    pub g_max: Option<f64>,
    /// `max_i τ_i² B_i²`.
    pub v_bar: f64,
    pub wrong: Vec<WrongFamily>,
    /// `min_j D_j` (`+∞` without wrong families).
    pub d_min: f64,
    /// `min_j C_j` (`+∞` without wrong families).
    pub c: f64,
    /// False when some wrong family can represent the true task exactly.
    pub identifiable: bool,
}

/// `D = Δ² / (4(σ² + V̄))`.
pub fn drift_constant(delta_sq: f64, sigma_sq: f64, v_bar: f64) -> f64 {
    delta_sq / (4.0 * (sigma_sq + v_bar))
}

/// `ν² = (8 B_f² (σ² + V̄) + V̄²) / σ⁴`.
pub fn nu_sq(b_f: f64, sigma_sq: f64, v_bar: f64) -> f64 {
    (8.0 * b_f * b_f * (sigma_sq + v_bar) + v_bar * v_bar) / (sigma_sq * sigma_sq)
}

/// `C = D² / (8(ν² + b D/2))`.
pub fn concentration_constant(d: f64, nu_sq: f64, b: f64) -> f64 {
    d * d / (8.0 * (nu_sq + b * d / 2.0))
}

/// Squared distance from `truth` (a member of family `i_star`) to family
/// `j`, taken as `‖f*‖²_{L²(P_X)}`. Only the linear/series pairs are
/// covered; the value is the exact projection gap when the series basis is
/// orthogonal to affine functions under `P_X` (uniform inputs on [−1, 1]).
pub fn delta_sq(spec: &MixtureSpec, i_star: usize, j: usize, truth: &[f64]) -> Result<f64> {
    let fi = &spec.families[i_star];
    let fj = &spec.families[j];
    match (fi, fj) {
        (TaskFamilySpec::Linear { .. }, TaskFamilySpec::Series { .. }) => {
            let d = spec.d_feat();
            let sx = spec.input.second_moment();
            let (w, b) = truth.split_at(d);
            let mut q = 0.0;
            for a in 0..d {
                for c in 0..d {
                    q += w[a] * sx[a * d + c] * w[c];
                }
            }
            let mu = spec.input.mean();
            let cross: f64 = w.iter().zip(&mu).map(|(x, m)| x * m).sum();
            Ok(q + 2.0 * b[0] * cross + b[0] * b[0])
        }
        (TaskFamilySpec::Series { .. }, TaskFamilySpec::Linear { .. }) => Ok(truth.iter().map(|a| a * a).sum()),
        _ => Err(Error::Unsupported(format!(
            "identification gap between a {} family and a {} family",
            fi.name(),
            fj.name()
        ))),
    }
}

/// All identification constants for true family `i_star` with parameters
/// `truth`.
pub fn compute_constants(spec: &MixtureSpec, i_star: usize, truth: &[f64]) -> Result<ConstantsReport> {
    let sigma_sq = spec.sigma_eps * spec.sigma_eps;
    let b_f = spec.b_f();
    let b_phi = (spec.hull().l2_bound().powi(2) + 1.0).sqrt();
    let series = (0..spec.n_families()).find(|&i| matches!(spec.families[i], TaskFamilySpec::Series { .. }));
    let g_max = series.and_then(|i| spec.g_max(i));
    let b_psi = series.map(|i| spec.feature_bound(i));
    let v_bar = (0..spec.n_families())
        .map(|i| spec.families[i].tau().powi(2) * spec.feature_bound(i).powi(2))
        .fold(0.0, f64::max);
    let nu = nu_sq(b_f, sigma_sq, v_bar);
    let b = 2.0 * v_bar / sigma_sq;
    let mut wrong = Vec::new();
    for j in (0..spec.n_families()).filter(|&j| j != i_star) {
        let ds = delta_sq(spec, i_star, j, truth)?;
        let d_j = drift_constant(ds, sigma_sq, v_bar);
        wrong.push(WrongFamily {
            j,
            delta_sq: ds,
            d_j,
            nu_sq: nu,
            b_j: b,
            c_j: concentration_constant(d_j, nu, b),
        });
    }
    let d_min = wrong.iter().map(|w| w.d_j).fold(f64::INFINITY, f64::min);
    let c = wrong.iter().map(|w| w.c_j).fold(f64::INFINITY, f64::min);
    Ok(ConstantsReport {
        i_star,
        sigma_eps: spec.sigma_eps,
        b_f,
        b_phi,
        b_psi,
        g_max,
        v_bar,
        identifiable: wrong.iter().all(|w| w.delta_sq > 0.0),
        wrong,
        d_min,
        c,
    })
}

impl ConstantsReport {
    /// `((1−α*)/α*) e^{−D_min k/2} + (T−1) e^{−C k}`.
    pub fn theory_bound(&self, spec: &MixtureSpec, k: usize) -> f64 {
        let a = spec.weights[self.i_star];
        let t = spec.n_families() as f64;
        if self.wrong.is_empty() {
            return 0.0;
        }
        (1.0 - a) / a * (-self.d_min * k as f64 / 2.0).exp() + (t - 1.0) * (-self.c * k as f64).exp()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i_star", "j", "delta_sq", "D_j", "nu_sq", "b_j", "C_j", "V_bar", "B_f", "D_min", "C"])?;
        for f in &self.wrong {
            w.write_record(&[
                self.i_star.to_string(),
                f.j.to_string(),
                f.delta_sq.to_string(),
                f.d_j.to_string(),
                f.nu_sq.to_string(),
                f.b_j.to_string(),
                f.c_j.to_string(),
                self.v_bar.to_string(),
                self.b_f.to_string(),
                self.d_min.to_string(),
                self.c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    /// `1 − π_{i*}(D^k)`, summed over the wrong families.
    pub wrong_mass: f64,
    /// Cumulative increments `S_{j,k}` for every wrong family, in index order.
    pub s: Vec<f64>,
    /// Increments `Z_{j,k}` of the last step (empty at `k = 0`).
    pub z: Vec<f64>,
    pub bound: f64,
}

/// One simulated context stream from a fixed true task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationTrace {
    pub trace_id: u64,
    pub seed: u64,
    pub truth: TaskDraw,
    pub rows: Vec<TraceRow>,
    /// `max_k |S_{j,k} − (log m_j − log m_{i*})|`.
    pub chain_rule_error: f64,
    /// `max_k |wrong_mass − S̃/(1+S̃)|`.
    pub bayes_rule_error: f64,
}

/// Runs one stream of `k_max` observations from `truth` through the
/// mixture posterior.
pub fn simulate_trace(
    spec: &MixtureSpec,
    truth: &TaskDraw,
    k_max: usize,
    master: u64,
    trace_id: u64,
    consts: &ConstantsReport,
) -> Result<ConcentrationTrace> {
    let i_star = truth.family_index;
    let wrong: Vec<usize> = (0..spec.n_families()).filter(|&j| j != i_star).collect();
    let mut in_rng = rng::stream(master, tags::TRACE, trace_id);
    let mut noise_rng = rng::stream(master, tags::NOISE ^ tags::TRACE, trace_id);
    let mut mp = MixturePosterior::<f64>::prior(spec);
    let mut s = vec![0.0; wrong.len()];
    let mut rows = Vec::with_capacity(k_max + 1);
    let mut chain = 0.0f64;
    let mut bayes = 0.0f64;
    let a_star = spec.weights[i_star];
    let family = &spec.families[i_star];
    let mut z_last = Vec::new();
    for k in 0..=k_max {
        let wrong_mass: f64 = wrong.iter().map(|&j| mp.log_pi[j].exp()).sum();
        let le_star = mp.states[i_star].log_evidence;
        let mut tilde = 0.0;
        for (w, &j) in wrong.iter().enumerate() {
            chain = chain.max((s[w] - (mp.states[j].log_evidence - le_star)).abs());
            tilde += spec.weights[j] / a_star * s[w].exp();
        }
        bayes = bayes.max((wrong_mass - tilde / (1.0 + tilde)).abs());
        rows.push(TraceRow {
            k,
            wrong_mass,
            s: s.clone(),
            z: std::mem::take(&mut z_last),
            bound: consts.theory_bound(spec, k),
        });
        if k == k_max {
            break;
        }
        let x = spec.input.sample(&mut in_rng);
        let eps: f64 = StandardNormal.sample(&mut noise_rng);
        let y = family.eval(&truth.params, &x) + spec.sigma_eps * eps;
        for (w, &j) in wrong.iter().enumerate() {
            let z = mp.loglik_ratio_increment(spec, j, i_star, &x, y);
            s[w] += z;
            z_last.push(z);
        }
        mp = mp.update(spec, &x, y)?;
    }
    Ok(ConcentrationTrace {
        trace_id,
        seed: master,
        truth: truth.clone(),
        rows,
        chain_rule_error: chain,
        bayes_rule_error: bayes,
    })
}

pub fn write_traces_csv<W: Write>(traces: &[ConcentrationTrace], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n_wrong = traces.first().and_then(|t| t.rows.first()).map_or(0, |r| r.s.len());
    let mut header = vec!["trace_id".to_string(), "k".into(), "wrong_mass".into(), "bound".into()];
    header.extend((0..n_wrong).map(|j| format!("S_{j}")));
    w.write_record(&header)?;
    for t in traces {
        for r in &t.rows {
            let mut rec = vec![t.trace_id.to_string(), r.k.to_string(), r.wrong_mass.to_string(), r.bound.to_string()];
            rec.extend(r.s.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Drift comparison for one wrong family at a fixed posterior state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftResult {
    pub j: usize,
    pub mc_mean_z: Estimate,
    /// `−KL` averaged over the same query draws.
    pub neg_kl: Estimate,
    /// Paired difference `Z − (−KL)`.
    pub diff: Estimate,
    pub within_tol: bool,
}

/// Monte Carlo mean of `Z_{j}` over fresh `x ~ P_X` and
/// `y ~ N(μ_{i*}(x), s_{i*}²(x))`, against the closed-form `−KL`.
pub fn drift_check(
    spec: &MixtureSpec,
    i_star: usize,
    state: &MixturePosterior<f64>,
    n_mc: usize,
    master: u64,
    index: u64,
) -> Vec<DriftResult> {
    let mut r = rng::stream(master, tags::DRIFT, index);
    let draws: Vec<(Vec<f64>, f64)> = (0..n_mc)
        .map(|_| {
            let x = spec.input.sample(&mut r);
            let e: f64 = StandardNormal.sample(&mut r);
            (x, e)
        })
        .collect();
    (0..spec.n_families())
        .filter(|&j| j != i_star)
        .map(|j| {
            let mut zs = Vec::with_capacity(n_mc);
            let mut kls = Vec::with_capacity(n_mc);
            for (x, e) in &draws {
                let preds = state.predictives(spec, x);
                let (pi, pj) = (preds[i_star], preds[j]);
                let y = pi.mu + pi.s2.sqrt() * e;
                zs.push(stats::log_normal_pdf(y, pj.mu, pj.s2) - stats::log_normal_pdf(y, pi.mu, pi.s2));
                kls.push(-predictive_kl(&pi, &pj));
            }
            let diff: Vec<f64> = zs.iter().zip(&kls).map(|(a, b)| a - b).collect();
            let diff = Estimate::from_samples(&diff);
            DriftResult {
                j,
                mc_mean_z: Estimate::from_samples(&zs),
                neg_kl: Estimate::from_samples(&kls),
                diff,
                within_tol: diff.within(0.0, 3.0),
            }
        })
        .collect()
}

/// Moment-generating-function smoke test of the centred increment at one
/// state: returns `(λ, MC E e^{λ(Z − E[Z|x])}, e^{λ² ν²/2})` rows.
pub fn mgf_smoke(
    spec: &MixtureSpec,
    i_star: usize,
    j: usize,
    state: &MixturePosterior<f64>,
    consts: &ConstantsReport,
    n_mc: usize,
    master: u64,
) -> Vec<(f64, f64, f64)> {
    let w = consts.wrong.iter().find(|w| w.j == j).copied();
    let Some(w) = w else { return Vec::new() };
    let mut r = rng::stream(master, tags::DRIFT ^ 0x4d47, j as u64);
    let samples: Vec<f64> = (0..n_mc)
        .map(|_| {
            let x = spec.input.sample(&mut r);
            let e: f64 = StandardNormal.sample(&mut r);
            let preds = state.predictives(spec, &x);
            let (pi, pj) = (preds[i_star], preds[j]);
            let y = pi.mu + pi.s2.sqrt() * e;
            let z = stats::log_normal_pdf(y, pj.mu, pj.s2) - stats::log_normal_pdf(y, pi.mu, pi.s2);
            z + predictive_kl(&pi, &pj)
        })
        .collect();
    [-1.0, -0.5, 0.5, 1.0]
        .iter()
        .map(|&f| {
            let lam = f / w.b_j;
            let mc = samples.iter().map(|c| (lam * c).exp()).sum::<f64>() / n_mc as f64;
            (lam, mc, (lam * lam * w.nu_sq / 2.0).exp())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub k: usize,
    pub wrong_mass: Estimate,
    /// `((1−α*)/α*) e^{−D_min k/2} + (T−1) e^{−Ck}`.
    pub theory: f64,
    /// `5 B_f² · theory`, the identification term of the risk bound.
    pub scaled: f64,
    /// Mean increment `E[Z_{j,k}]` per wrong family (empty at `k = 0`).
    pub mean_z: Vec<Estimate>,
    /// `wrong_mass ≤ theory + 3 SE`.
    pub holds: bool,
    /// Whether the row is past the burn-in and therefore gated.
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTable {
    pub constants: ConstantsReport,
    pub rows: Vec<BoundRow>,
    pub k_burn: usize,
    /// Spearman correlation of `log mean wrong_mass` with `k` over
    /// `k_burn..=k_max`.
    pub spearman: f64,
    pub max_chain_rule_error: f64,
    pub max_bayes_rule_error: f64,
    /// `(k, j)` pairs past burn-in where the mean increment exceeds `−D_j`
    /// by more than 3 SE. Recorded, not gated.
    pub drift_violations: Vec<(usize, usize)>,
    /// Every gated row holds.
    pub holds: bool,
    #[serde(skip)]
    pub traces: Vec<ConcentrationTrace>,
}

impl BoundTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "wrong_mass", "wrong_mass_se", "bound", "scaled_bound", "holds", "gated"])?;
        for r in &self.rows {
            w.write_record(&[
                r.k.to_string(),
                r.wrong_mass.mean.to_string(),
                r.wrong_mass.se.to_string(),
                r.theory.to_string(),
                r.scaled.to_string(),
                r.holds.to_string(),
                r.gated.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Averages `n_traces` traces from the same true task and compares the mean
/// wrong-family mass with the theoretical bound for `k ≥ k_burn`.
pub fn bound_check(
    spec: &MixtureSpec,
    truth: &TaskDraw,
    n_traces: usize,
    k_max: usize,
    k_burn: usize,
    master: u64,
) -> Result<BoundTable> {
    let consts = compute_constants(spec, truth.family_index, &truth.params)?;
    let traces = (0..n_traces as u64)
        .into_par_iter()
        .map(|t| simulate_trace(spec, truth, k_max, master, t, &consts))
        .collect::<Result<Vec<_>>>()?;
    let b_f = spec.b_f();
    let n_wrong = consts.wrong.len();
    let mut rows = Vec::with_capacity(k_max + 1);
    let mut violations = Vec::new();
    for k in 0..=k_max {
        let masses: Vec<f64> = traces.iter().map(|t| t.rows[k].wrong_mass).collect();
        let wm = Estimate::from_samples(&masses);
        let theory = consts.theory_bound(spec, k);
        let mean_z: Vec<Estimate> = if k == 0 {
            Vec::new()
        } else {
            (0..n_wrong)
                .map(|w| Estimate::from_samples(&traces.iter().map(|t| t.rows[k].z[w]).collect::<Vec<_>>()))
                .collect()
        };
        if k >= k_burn {
            for (w, e) in mean_z.iter().enumerate() {
                if e.mean > -consts.wrong[w].d_j + 3.0 * e.se {
                    violations.push((k, consts.wrong[w].j));
                }
            }
        }
        rows.push(BoundRow {
            k,
            wrong_mass: wm,
            theory,
            scaled: 5.0 * b_f * b_f * theory,
            mean_z,
            holds: wm.mean <= theory + 3.0 * wm.se,
            gated: k >= k_burn,
        });
    }
    let ks: Vec<f64> = (k_burn..=k_max).map(|k| k as f64).collect();
    let logs: Vec<f64> = (k_burn..=k_max).map(|k| rows[k].wrong_mass.mean.ln()).collect();
    let spearman = if ks.len() >= 2 { stats::spearman(&ks, &logs) } else { f64::NAN };
    Ok(BoundTable {
        holds: rows.iter().filter(|r| r.gated).all(|r| r.holds),
        max_chain_rule_error: traces.iter().map(|t| t.chain_rule_error).fold(0.0, f64::max),
        max_bayes_rule_error: traces.iter().map(|t| t.bayes_rule_error).fold(0.0, f64::max),
        constants: consts,
        rows,
        k_burn,
        spearman,
        drift_violations: violations,
        traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvGapResult {
    pub mixture_pv: Estimate,
    pub single_family_pv: Estimate,
    /// `5 B_f² E[1 − π_{i*}(D^k)]`.
    pub ident_term: Estimate,
    /// Paired `mixture − single − ident`.
    pub diff: Estimate,
    pub holds: bool,
}

/// `E[Var_mix(f(x)|D^k)] ≤ E[Var_{i*}(f(x)|D^k)] + 5 B_f² E[1 − π_{i*}]`
/// with tasks drawn from family `i_star`'s prior.
pub fn pv_gap_check(spec: &MixtureSpec, i_star: usize, k: usize, n_mc: usize, master: u64) -> Result<PvGapResult> {
    let family = &spec.families[i_star];
    let c = 5.0 * spec.b_f().powi(2);
    let rows = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| {
            let params = family.sample_params(spec.d_feat(), i_star, &mut rng::stream(master, tags::TASK, i))?;
            let mut in_rng = rng::stream(master, tags::INPUT, i);
            let mut noise_rng = rng::stream(master, tags::NOISE, i);
            let mut mp = MixturePosterior::<f64>::prior(spec);
            for _ in 0..k {
                let x = spec.input.sample(&mut in_rng);
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                let y = family.eval(&params, &x) + spec.sigma_eps * e;
                mp = mp.update(spec, &x, y)?;
            }
            let q = spec.input.sample(&mut in_rng);
            let mix = mp.posterior_variance(spec, &q);
            let single = mp.predictives(spec, &q)[i_star].fvar;
            let wrong: f64 = (0..spec.n_families())
                .filter(|&j| j != i_star)
                .map(|j| mp.log_pi[j].exp())
                .sum();
            Ok([mix, single, c * wrong])
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let diff: Vec<f64> = rows.iter().map(|r| r[0] - r[1] - r[2]).collect();
    let diff = Estimate::from_samples(&diff);
    Ok(PvGapResult {
        mixture_pv: Estimate::from_samples(&col(0)),
        single_family_pv: Estimate::from_samples(&col(1)),
        ident_term: Estimate::from_samples(&col(2)),
        diff,
        holds: diff.mean <= 3.0 * diff.se,
    })
}
