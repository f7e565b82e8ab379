//! Input-distribution shift: one-dimensional Wasserstein distances between
//! uniform boxes, the empirical Hölder constant of the Bayes predictor, and
//! the Bayes-gap stability check.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate::MixturePosterior;
use crate::error::{Error, Result};
use crate::net::SpectralReport;
use crate::risk::{self, Predictor};
use crate::rng::{self, tags};
use crate::stats::Estimate;
use crate::taskgen::{self, InputDistSpec, MixtureSpec, Prompt, PromptStreams};

/// Quadrature nodes for `α < 1`.
pub const W_ALPHA_NODES: usize = 1024;

/// Safety factor applied to the largest observed Hölder ratio.
pub const HOLDER_SAFETY: f64 = 1.5;

/// `∫₀¹ |F_P⁻¹(u) − F_Q⁻¹(u)|^α du` for one-dimensional uniform inputs.
///
/// For `α = 1` this is `W₁` in closed form. For `α < 1` the comonotone
/// coupling is evaluated by midpoint quadrature; it upper-bounds the optimal
/// cost, which is the safe direction for the stability bound.
pub fn w1_input(p: &InputDistSpec, q: &InputDistSpec, alpha: f64) -> Result<f64> {
    if p.d_feat() != 1 || q.d_feat() != 1 {
        return Err(Error::Unsupported(
            "input Wasserstein distance is implemented for one-dimensional inputs only".into(),
        ));
    }
    // Quantile difference g(u) = g0 + (g1 − g0) u.
    let g0 = p.low[0] - q.low[0];
    let g1 = p.high[0] - q.high[0];
    if alpha >= 1.0 {
        if g0 * g1 >= 0.0 {
            return Ok(0.5 * (g0 + g1).abs());
        }
        return Ok(0.5 * (g0 * g0 + g1 * g1) / (g0.abs() + g1.abs()));
    }
    let n = W_ALPHA_NODES;
    Ok((0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            (g0 + (g1 - g0) * u).abs().powf(alpha)
        })
        .sum::<f64>()
        / n as f64)
}

/// Prompt-level ground metric `(1/k) Σ ‖u_i − u'_i‖^α + ‖c − c'‖^α` on the
/// first `k` examples and the query.
pub fn prompt_distance(a: &Prompt, b: &Prompt, k: usize, alpha: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..k {
        let mut d2: f64 = a.x(i).iter().zip(b.x(i)).map(|(x, y)| (x - y) * (x - y)).sum();
        d2 += (a.ys[i] - b.ys[i]).powi(2);
        s += d2.sqrt().powf(alpha);
    }
    let c2: f64 = a.x(k).iter().zip(b.x(k)).map(|(x, y)| (x - y) * (x - y)).sum();
    s / k as f64 + c2.sqrt().powf(alpha)
}

/// `|M_Bayes(a) − M_Bayes(b)| / d̄_{k,α}(a, b)`, or `None` for coincident
/// prompts.
pub fn holder_ratio(spec: &MixtureSpec, a: &Prompt, b: &Prompt, k: usize, alpha: f64) -> Result<Option<f64>> {
    let d = prompt_distance(a, b, k, alpha);
    if !(d > 0.0) {
        return Ok(None);
    }
    let ma = MixturePosterior::<f64>::from_prompt(spec, a, k)?.bayes_predict(spec, a.x(k));
    let mb = MixturePosterior::<f64>::from_prompt(spec, b, k)?.bayes_predict(spec, b.x(k));
    Ok(Some((ma - mb).abs() / d))
}

/// Perturbs one uniformly chosen coordinate of `P^k` (an input, an output,
/// or the query) by `scale · N(0, 1)`.
pub fn perturb_prompt<R: Rng + ?Sized>(prompt: &Prompt, k: usize, scale: f64, rng: &mut R) -> Prompt {
    let d = prompt.d;
    let n_coords = k * (d + 1) + d;
    let c = rng.random_range(0..n_coords);
    let z: f64 = StandardNormal.sample(rng);
    let mut out = prompt.clone();
    if c < k * (d + 1) {
        let (i, j) = (c / (d + 1), c % (d + 1));
        if j < d {
            out.xs[i * d + j] += scale * z;
        } else {
            out.ys[i] += scale * z;
        }
    } else {
        out.xs[k * d + (c - k * (d + 1))] += scale * z;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderEstimate {
    pub k: usize,
    pub alpha: f64,
    /// Per-pair ratios in stream order (`None` for excluded pairs).
    #[serde(skip)]
    pub ratios: Vec<Option<f64>>,
    pub max_ratio: f64,
    /// `HOLDER_SAFETY × max_ratio`.
    pub l_hat: f64,
}

impl HolderEstimate {
    /// Estimate from the first `n` pairs only.
    pub fn prefix(&self, n: usize) -> f64 {
        HOLDER_SAFETY
            * self.ratios[..n.min(self.ratios.len())]
                .iter()
                .flatten()
                .fold(0.0, |m: f64, &r| m.max(r))
    }
}

/// Largest Hölder ratio of `M_Bayes` over `n_pairs` (prompt, perturbed
/// prompt) pairs at context length `k`, times the safety factor. Pair `i`
/// depends only on `(master, i)`, so estimates over nested pair counts are
/// monotone.
pub fn estimate_holder_l(
    spec: &MixtureSpec,
    k: usize,
    n_pairs: usize,
    perturb_scale: f64,
    alpha: f64,
    master: u64,
) -> Result<HolderEstimate> {
    let ratios = (0..n_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let base = taskgen::draw_prompt(spec, master, i)?;
            let pert = perturb_prompt(&base, k, perturb_scale, &mut rng::stream(master, tags::HOLDER, i));
            holder_ratio(spec, &base, &pert, k, alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    let max_ratio = ratios.iter().flatten().fold(0.0, |m: f64, &r| m.max(r));
    Ok(HolderEstimate {
        k,
        alpha,
        ratios,
        max_ratio,
        l_hat: HOLDER_SAFETY * max_ratio,
    })
}

/// `L_f`: largest task Lipschitz constant in `x` over the families.
pub fn lip_f_bound(spec: &MixtureSpec) -> f64 {
    spec.lip_f()
}

/// Shifted target domain and the constants of the stability bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub target: InputDistSpec,
    pub alpha: f64,
    /// Empirical Hölder constant of `M_Bayes` per `k = 1..=p`.
    pub holder_l_hat: Vec<f64>,
    pub lip_f_hat: f64,
    pub diam_u: f64,
    pub diam_c: f64,
}

impl ShiftSpec {
    /// Domain diameters from the mixture: the query hull, and the example
    /// domain `hull × [−B_f − 6σ, B_f + 6σ]`.
    pub fn diameters(spec: &MixtureSpec) -> (f64, f64) {
        let dc = spec.hull().diameter();
        let y = 2.0 * (spec.b_f() + 6.0 * spec.sigma_eps);
        ((dc * dc + y * y).sqrt(), dc)
    }
}

/// `Λ_α = (L_s Lip(φ) + L_c)(diam U + diam C)^{1−α}` with
/// `L_s = L_c = s_decoder`.
pub fn lambda_alpha(sr: &SpectralReport, shift: &ShiftSpec) -> f64 {
    let ls = sr.s_decoder;
    (ls * sr.lip_phi_bound + ls) * (shift.diam_u + shift.diam_c).powf(1.0 - shift.alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub target: InputDistSpec,
    pub alpha: f64,
    pub rbg_source: Estimate,
    pub rbg_target: Estimate,
    /// Paired estimate of `R_BG^Q − R_BG^P`.
    pub gap: Estimate,
    pub measured_gap: f64,
    pub w1_input: f64,
    /// `(2 + L_f^α) · W_α(P_X, Q_X)` for each `k`.
    pub prompt_w_bound: Vec<f64>,
    pub lambda_alpha: f64,
    pub theory_rhs: f64,
    /// Posterior variance under the target, from target-only prompts.
    pub rpv_target: Estimate,
    pub holds: bool,
}

impl OodReport {
    pub fn slack_ratio(&self) -> f64 {
        if self.theory_rhs > 0.0 {
            self.measured_gap / self.theory_rhs
        } else {
            f64::NAN
        }
    }
}

pub fn write_ood_csv<W: Write>(reports: &[OodReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "target_low",
        "target_high",
        "alpha",
        "w1_input",
        "rbg_source",
        "rbg_source_se",
        "rbg_target",
        "rbg_target_se",
        "gap",
        "gap_se",
        "theory_rhs",
        "slack_ratio",
        "holds",
    ])?;
    for r in reports {
        w.write_record(&[
            r.target.low[0].to_string(),
            r.target.high[0].to_string(),
            r.alpha.to_string(),
            r.w1_input.to_string(),
            r.rbg_source.mean.to_string(),
            r.rbg_source.se.to_string(),
            r.rbg_target.mean.to_string(),
            r.rbg_target.se.to_string(),
            r.measured_gap.to_string(),
            r.gap.se.to_string(),
            r.theory_rhs.to_string(),
            r.slack_ratio().to_string(),
            r.holds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Streams for target-domain prompts: shared tasks, fresh inputs, and noise
/// either shared with the source (`share_noise`) or independent.
pub fn target_streams(share_noise: bool) -> PromptStreams {
    PromptStreams {
        input: tags::TARGET,
        noise: if share_noise { tags::NOISE } else { tags::NOISE ^ tags::TARGET },
        ..PromptStreams::default()
    }
}

/// Bayes gap of `model` under the source inputs and under `shift.target`,
/// compared with the assembled stability bound.
#[allow(clippy::too_many_arguments)]
pub fn ood_bound_check(
    model: &dyn Predictor,
    spec: &MixtureSpec,
    sr: &SpectralReport,
    b_m: f64,
    shift: &ShiftSpec,
    n_mc: usize,
    master: u64,
    share_noise: bool,
) -> Result<OodReport> {
    if !shift.target.inside(spec.hull()) {
        return Err(Error::config("ood.target", "target box must lie inside the mixture support hull"));
    }
    let spec_q = spec.with_input(shift.target.clone());
    let rep_p = risk::estimate_risks(model, spec, n_mc, master)?;
    let rep_q = risk::estimate_risks_with(model, &spec_q, n_mc, master, target_streams(share_noise))?;
    let gap = risk::paired_difference(&rep_q.prompt_gap, &rep_p.prompt_gap);
    let w1 = w1_input(&spec.input, &shift.target, shift.alpha)?;
    let lam = lambda_alpha(sr, shift);
    let p = spec.p;
    let w_k = (2.0 + shift.lip_f_hat.powf(shift.alpha)) * w1;
    let prompt_w_bound = vec![w_k; p];
    let b_f = spec.b_f();
    let sum: f64 = (0..p)
        .map(|k| (shift.holder_l_hat.get(k).copied().unwrap_or(0.0) + lam) * prompt_w_bound[k])
        .sum();
    let theory_rhs = 2.0 * (b_m + b_f) / p as f64 * sum;
    let measured_gap = gap.mean.abs();
    Ok(OodReport {
        target: shift.target.clone(),
        alpha: shift.alpha,
        rbg_source: rep_p.aggregate.r_bg,
        rbg_target: rep_q.aggregate.r_bg,
        gap,
        measured_gap,
        w1_input: w1,
        prompt_w_bound,
        lambda_alpha: lam,
        theory_rhs,
        rpv_target: rep_q.aggregate.r_pv,
        holds: measured_gap <= theory_rhs + 3.0 * gap.se,
    })
}
