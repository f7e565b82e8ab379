//! Conjugate Gaussian posteriors per task family, mixture weights from log
//! evidences, and the Bayes predictor built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_inverse, cholesky_solve, dot, Matrix};
use crate::scalar::Scalar;
use crate::taskgen::{MixtureSpec, Prompt, TaskFamilySpec};

/// `log N(y; mu, s2)` in any scalar type.
#[inline]
pub fn log_normal_pdf<S: Scalar>(y: S, mu: S, s2: S) -> S {
    let r = y - mu;
    let ln_2pi = (S::PI() + S::PI()).ln();
    -(ln_2pi + s2.ln() + r * r / s2) * S::lit(0.5)
}

pub fn log_sum_exp<S: Scalar>(v: &[S]) -> S {
    let m = v.iter().copied().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<S>().ln()
}

/// Feature map of a family at `x`.
pub fn features<S: Scalar>(family: &TaskFamilySpec, x: &[S]) -> Vec<S> {
    family.features(x)
}

/// One-step predictive distribution of a family at a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Predictive<S = f64> {
    /// Predictive mean `φ(x)ᵀ m`.
    pub mu: S,
    /// Posterior variance of `f(x)`: `φ(x)ᵀ Σ φ(x)`.
    pub fvar: S,
    /// `σ_ε² + fvar`.
    pub s2: S,
}

/// Gaussian posterior over one family's parameters.
///
/// The state keeps the precision form (`Λ = I/τ² + ΦᵀΦ/σ²`, `h = Φᵀy/σ²`)
/// and recomputes mean and covariance from it after each observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FamilyPosterior<S = f64> {
    pub precision: Matrix<S>,
    pub info: Vec<S>,
    pub mean: Vec<S>,
    pub cov: Matrix<S>,
    /// Lower Cholesky factor of `cov`.
    pub cov_chol: Matrix<S>,
    pub log_evidence: S,
    pub n_obs: usize,
}

impl<S: Scalar> FamilyPosterior<S> {
    pub fn prior(dim: usize, tau: S) -> Self {
        let t2 = tau * tau;
        let mut cov = Matrix::identity(dim);
        cov.scale(t2);
        let mut precision = Matrix::identity(dim);
        precision.scale(S::one() / t2);
        let mut cov_chol = Matrix::identity(dim);
        cov_chol.scale(tau);
        Self {
            precision,
            info: vec![S::zero(); dim],
            mean: vec![S::zero(); dim],
            cov,
            cov_chol,
            log_evidence: S::zero(),
            n_obs: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn predictive_phi(&self, phi: &[S], sigma2: S) -> Predictive<S> {
        let mu = dot(phi, &self.mean);
        let fvar = self.cov.quad_form(phi).max(S::zero());
        Predictive {
            mu,
            fvar,
            s2: sigma2 + fvar,
        }
    }

    /// Appends the observation `(φ, y)`; the evidence gains the log
    /// predictive density evaluated before the update.
    pub fn update_phi(&self, phi: &[S], y: S, sigma2: S) -> Result<Self> {
        let pred = self.predictive_phi(phi, sigma2);
        let mut precision = self.precision.clone();
        precision.add_outer(S::one() / sigma2, phi, phi);
        let mut info = self.info.clone();
        for (h, &f) in info.iter_mut().zip(phi) {
            *h += f * y / sigma2;
        }
        let l = precision.cholesky()?;
        let mean = cholesky_solve(&l, &info);
        let cov = cholesky_inverse(&l);
        let cov_chol = cov.cholesky()?;
        let log_evidence = self.log_evidence + log_normal_pdf(y, pred.mu, pred.s2);
        if !log_evidence.is_finite() || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior update".into()));
        }
        Ok(Self {
            precision,
            info,
            mean,
            cov,
            cov_chol,
            log_evidence,
            n_obs: self.n_obs + 1,
        })
    }

    pub fn update(&self, family: &TaskFamilySpec, x: &[S], y: S, sigma_eps: S) -> Result<Self> {
        self.update_phi(&family.features(x), y, sigma_eps * sigma_eps)
    }

    pub fn predictive(&self, family: &TaskFamilySpec, x: &[S], sigma_eps: S) -> Predictive<S> {
        self.predictive_phi(&family.features(x), sigma_eps * sigma_eps)
    }
}

/// Posterior over the family index together with each family's posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct MixturePosterior<S = f64> {
    pub states: Vec<FamilyPosterior<S>>,
    /// Normalized log posterior weights `log π_i(D^k)`.
    pub log_pi: Vec<S>,
}

impl<S: Scalar> MixturePosterior<S> {
    pub fn prior(spec: &MixtureSpec) -> Self {
        let d = spec.d_feat();
        let states = spec
            .families
            .iter()
            .map(|f| FamilyPosterior::prior(f.dim(d), S::lit(f.tau())))
            .collect();
        let mut mp = Self {
            states,
            log_pi: Vec::new(),
        };
        mp.renormalize(spec);
        mp
    }

    fn renormalize(&mut self, spec: &MixtureSpec) {
        let raw: Vec<S> = spec
            .weights
            .iter()
            .zip(&self.states)
            .map(|(&a, st)| S::lit(a).ln() + st.log_evidence)
            .collect();
        let z = log_sum_exp(&raw);
        self.log_pi = raw.into_iter().map(|v| v - z).collect();
    }

    pub fn n_obs(&self) -> usize {
        self.states.first().map_or(0, |s| s.n_obs)
    }

    pub fn update(&self, spec: &MixtureSpec, x: &[S], y: S) -> Result<Self> {
        let sigma2 = S::lit(spec.sigma_eps * spec.sigma_eps);
        let states = self
            .states
            .iter()
            .zip(&spec.families)
            .map(|(st, f)| st.update_phi(&f.features(x), y, sigma2))
            .collect::<Result<Vec<_>>>()?;
        let mut mp = Self {
            states,
            log_pi: Vec::new(),
        };
        mp.renormalize(spec);
        Ok(mp)
    }

    /// Posterior after the first `k` pairs of `prompt`.
    pub fn from_prompt(spec: &MixtureSpec, prompt: &Prompt<S>, k: usize) -> Result<Self> {
        let mut mp = Self::prior(spec);
        for i in 0..k {
            mp = mp.update(spec, prompt.x(i), prompt.ys[i])?;
        }
        Ok(mp)
    }

    pub fn weights(&self) -> Vec<S> {
        self.log_pi.iter().map(|v| v.exp()).collect()
    }

    pub fn predictives(&self, spec: &MixtureSpec, x: &[S]) -> Vec<Predictive<S>> {
        let sigma2 = S::lit(spec.sigma_eps * spec.sigma_eps);
        self.states
            .iter()
            .zip(&spec.families)
            .map(|(st, f)| st.predictive_phi(&f.features(x), sigma2))
            .collect()
    }

    /// `M_Bayes = Σ_i π_i μ_i(x)`.
    pub fn bayes_predict(&self, spec: &MixtureSpec, x: &[S]) -> S {
        mix_mean(&self.log_pi, &self.predictives(spec, x))
    }

    /// `Var(f(x) | D) = Σ π_i fvar_i + Σ π_i (μ_i − μ̄)²`.
    pub fn posterior_variance(&self, spec: &MixtureSpec, x: &[S]) -> S {
        let preds = self.predictives(spec, x);
        mix_variance(&self.log_pi, &preds, mix_mean(&self.log_pi, &preds))
    }

    /// Bayes prediction and posterior variance at `x` from one feature pass.
    pub fn predict_with_variance(&self, spec: &MixtureSpec, x: &[S]) -> (S, S) {
        let preds = self.predictives(spec, x);
        let mean = mix_mean(&self.log_pi, &preds);
        (mean, mix_variance(&self.log_pi, &preds, mean))
    }

    /// `Z_j = log N(y; μ_j, s_j²) − log N(y; μ_{i*}, s_{i*}²)` with the
    /// predictives of the current (pre-observation) state.
    pub fn loglik_ratio_increment(&self, spec: &MixtureSpec, j: usize, i_star: usize, x: &[S], y: S) -> S {
        let preds = self.predictives(spec, x);
        log_normal_pdf(y, preds[j].mu, preds[j].s2) - log_normal_pdf(y, preds[i_star].mu, preds[i_star].s2)
    }
}

fn mix_mean<S: Scalar>(log_pi: &[S], preds: &[Predictive<S>]) -> S {
    let mut m = S::zero();
    for (lp, pr) in log_pi.iter().zip(preds) {
        m += lp.exp() * pr.mu;
    }
    m
}

fn mix_variance<S: Scalar>(log_pi: &[S], preds: &[Predictive<S>], mean: S) -> S {
    let mut v = S::zero();
    for (lp, pr) in log_pi.iter().zip(preds) {
        let d = pr.mu - mean;
        v += lp.exp() * (pr.fvar + d * d);
    }
    v
}

/// Bayes predictions and posterior variances for every prefix `P^k`,
/// `k = 0..=p`, sharing one sequential pass over the context.
pub fn bayes_path(spec: &MixtureSpec, prompt: &Prompt) -> Result<Vec<(f64, f64)>> {
    let mut mp = MixturePosterior::<f64>::prior(spec);
    let mut out = Vec::with_capacity(prompt.p() + 1);
    for k in 0..=prompt.p() {
        out.push(mp.predict_with_variance(spec, prompt.x(k)));
        if k < prompt.p() {
            mp = mp.update(spec, prompt.x(k), prompt.ys[k])?;
        }
    }
    Ok(out)
}

/// KL divergence `KL(N(a.mu, a.s2) ‖ N(b.mu, b.s2))`.
pub fn predictive_kl<S: Scalar>(a: &Predictive<S>, b: &Predictive<S>) -> S {
    let d = a.mu - b.mu;
    S::lit(0.5) * ((b.s2 / a.s2).ln() + a.s2 / b.s2 - S::one() + d * d / b.s2)
}
