//! The prompt-generating process: a mixture of bounded regression task
//! families with truncated Gaussian priors, uniform-box inputs and Gaussian
//! output noise.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::scalar::Scalar;
use crate::stats;

/// Prior truncation radius in units of the prior standard deviation.
pub const TRUNCATION_SIGMAS: f64 = 6.0;

/// Largest admissible prior mass outside the truncation set.
pub const MAX_TRUNCATED_MASS: f64 = 1e-7;

pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    #[default]
    UniformBox,
}

/// Product of uniform distributions on `[low_i, high_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDistSpec {
    #[serde(default)]
    pub kind: InputKind,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl InputDistSpec {
    pub fn uniform(low: Vec<f64>, high: Vec<f64>) -> Self {
        Self {
            kind: InputKind::UniformBox,
            low,
            high,
        }
    }

    /// Uniform(lo, hi) in one dimension.
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self::uniform(vec![lo], vec![hi])
    }

    pub fn d_feat(&self) -> usize {
        self.low.len()
    }

    /// Componentwise bound `B_X = max_i max(|low_i|, |high_i|)`.
    pub fn b_x(&self) -> f64 {
        self.low
            .iter()
            .chain(&self.high)
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Euclidean bound `√d · B_X`.
    pub fn l2_bound(&self) -> f64 {
        (self.d_feat() as f64).sqrt() * self.b_x()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    /// `Σ_X = E[x xᵀ]`, row-major.
    pub fn second_moment(&self) -> Vec<f64> {
        let d = self.d_feat();
        let mu = self.mean();
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = if i == j {
                    let (l, h) = (self.low[i], self.high[i]);
                    (l * l + l * h + h * h) / 3.0
                } else {
                    mu[i] * mu[j]
                };
            }
        }
        s
    }

    pub fn diameter(&self) -> f64 {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| (h - l) * (h - l))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.low.iter().zip(&self.high))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// True when this box lies inside `other`.
    pub fn inside(&self, other: &InputDistSpec) -> bool {
        self.d_feat() == other.d_feat() && other.contains(&self.low) && other.contains(&self.high)
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        for (l, h) in self.low.iter().zip(&self.high) {
            let u: f64 = rng.random();
            out.push(l + (h - l) * u);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.d_feat());
        self.sample_into(rng, &mut v);
        v
    }

    fn validate_into(&self, key: &str, out: &mut Vec<Diagnostic>) {
        if self.low.is_empty() {
            out.push(Diagnostic::new(format!("{key}.low"), "must have at least one dimension"));
        }
        if self.low.len() != self.high.len() {
            out.push(Diagnostic::new(
                format!("{key}.high"),
                format!("length {} differs from low ({})", self.high.len(), self.low.len()),
            ));
            return;
        }
        for (i, (l, h)) in self.low.iter().zip(&self.high).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                out.push(Diagnostic::new(
                    format!("{key}.low[{i}]"),
                    format!("need finite low < high, got [{l}, {h}]"),
                ));
            }
        }
    }
}

/// A task family with its truncated Gaussian prior.
///
/// Configured bounds act as minimum truncation radii: the prior is truncated
/// to a ball of radius `max(bound, 6τ)` per coordinate block so that the
/// untruncated conjugate formulas stay accurate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskFamilySpec {
    /// `f(x) = wᵀx + b`, `‖w‖₂ ≤ B_w`, `|b| ≤ B_b`.
    Linear { b_w: f64, b_b: f64, tau: f64 },
    /// `f(x) = Σ_{r=r0}^{R_max} a_r g_r(x)`, `‖a‖₂ ≤ B_a`.
    Series {
        r0: usize,
        r_max: usize,
        b_a: f64,
        tau: f64,
    },
}

impl TaskFamilySpec {
    pub fn tau(&self) -> f64 {
        match *self {
            TaskFamilySpec::Linear { tau, .. } | TaskFamilySpec::Series { tau, .. } => tau,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskFamilySpec::Linear { .. } => "linear",
            TaskFamilySpec::Series { .. } => "series",
        }
    }

    /// Parameter dimension.
    pub fn dim(&self, d_feat: usize) -> usize {
        match *self {
            TaskFamilySpec::Linear { .. } => d_feat + 1,
            TaskFamilySpec::Series { r0, r_max, .. } => r_max + 1 - r0,
        }
    }

    /// Truncation radii actually used: `(B_w, B_b)` or `(B_a, 0)`.
    pub fn effective_bounds(&self) -> (f64, f64) {
        let floor = TRUNCATION_SIGMAS * self.tau();
        match *self {
            TaskFamilySpec::Linear { b_w, b_b, .. } => (b_w.max(floor), b_b.max(floor)),
            TaskFamilySpec::Series { b_a, .. } => (b_a.max(floor), 0.0),
        }
    }

    /// Feature map: `[x; 1]` or `(g_r(x))_{r=r0..R_max}`.
    pub fn features<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        match *self {
            TaskFamilySpec::Linear { .. } => {
                let mut v = x.to_vec();
                v.push(S::one());
                v
            }
            TaskFamilySpec::Series { r0, r_max, .. } => basis::normalized(r0, r_max, x[0]),
        }
    }

    /// Whether `params` lies in the truncation set.
    pub fn in_truncation(&self, params: &[f64]) -> bool {
        let (b1, b2) = self.effective_bounds();
        match self {
            TaskFamilySpec::Linear { .. } => {
                let (w, b) = params.split_at(params.len() - 1);
                w.iter().map(|v| v * v).sum::<f64>().sqrt() <= b1 && b[0].abs() <= b2
            }
            TaskFamilySpec::Series { .. } => params.iter().map(|v| v * v).sum::<f64>().sqrt() <= b1,
        }
    }

    /// Prior mass of the untruncated Gaussian outside the truncation set
    /// (union bound over the coordinate blocks).
    pub fn truncated_mass(&self, d_feat: usize) -> f64 {
        let tau = self.tau();
        let (b1, b2) = self.effective_bounds();
        match self {
            TaskFamilySpec::Linear { .. } => {
                stats::chi2_tail(d_feat, (b1 / tau).powi(2)) + 2.0 * stats::normal_cdf(-b2 / tau)
            }
            TaskFamilySpec::Series { .. } => stats::chi2_tail(self.dim(d_feat), (b1 / tau).powi(2)),
        }
    }

    /// Draws parameters from `N(0, τ² I)` restricted to the truncation set.
    pub fn sample_params<R: Rng + ?Sized>(&self, d_feat: usize, family: usize, rng: &mut R) -> Result<Vec<f64>> {
        let dim = self.dim(d_feat);
        let tau = self.tau();
        for _ in 0..MAX_REJECTIONS {
            let v: Vec<f64> = (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    tau * z
                })
                .collect();
            if self.in_truncation(&v) {
                return Ok(v);
            }
        }
        Err(Error::Rejection {
            family,
            attempts: MAX_REJECTIONS,
        })
    }

    /// `f_θ(x)`.
    pub fn eval(&self, params: &[f64], x: &[f64]) -> f64 {
        match *self {
            TaskFamilySpec::Linear { .. } => {
                let (w, b) = params.split_at(params.len() - 1);
                w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[0]
            }
            TaskFamilySpec::Series { r0, r_max, .. } => basis::normalized(r0, r_max, x[0])
                .iter()
                .zip(params)
                .map(|(g, a)| g * a)
                .sum(),
        }
    }

    /// Lipschitz bound in `x` over the hull: `B_w`, or
    /// `B_a · √(Σ_r sup g_r'²)` by grid maximization.
    pub fn lip_bound(&self, hull: &InputDistSpec) -> f64 {
        let (b1, _) = self.effective_bounds();
        match *self {
            TaskFamilySpec::Linear { .. } => b1,
            TaskFamilySpec::Series { r0, r_max, .. } => {
                let (lo, hi) = (hull.low[0], hull.high[0]);
                let n = 2001;
                let mut sum = 0.0;
                for r in r0..=r_max {
                    let sup = (0..n)
                        .map(|i| {
                            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                            basis::normalized_deriv::<f64>(r, r, x)[0].abs()
                        })
                        .fold(0.0, f64::max);
                    sum += sup * sup;
                }
                b1 * sum.sqrt()
            }
        }
    }
}

/// A configuration problem, addressed by dotted key path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub key: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

/// Full generative configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub families: Vec<TaskFamilySpec>,
    pub sigma_eps: f64,
    pub input: InputDistSpec,
    /// Maximum context length.
    pub p: usize,
    /// Global input hull used for `B_X`, `B_f` and `G_max`; defaults to the
    /// input box. Shifted target domains must lie inside it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<InputDistSpec>,
}

impl MixtureSpec {
    pub fn n_families(&self) -> usize {
        self.families.len()
    }

    pub fn d_feat(&self) -> usize {
        self.input.d_feat()
    }

    pub fn hull(&self) -> &InputDistSpec {
        self.support.as_ref().unwrap_or(&self.input)
    }

    /// Same mixture with a different input distribution; the hull is kept.
    pub fn with_input(&self, input: InputDistSpec) -> Self {
        let mut s = self.clone();
        s.support = Some(self.hull().clone());
        s.input = input;
        s
    }

    pub fn b_x(&self) -> f64 {
        self.hull().b_x()
    }

    /// `sup |g_r|` over the hull for a series family.
    pub fn g_max(&self, family: usize) -> Option<f64> {
        match self.families[family] {
            TaskFamilySpec::Series { r0, r_max, .. } => {
                let h = self.hull();
                Some(basis::g_max(r0, r_max, h.low[0], h.high[0]))
            }
            TaskFamilySpec::Linear { .. } => None,
        }
    }

    /// Feature-norm bound `B_φ = √(B_X² d + 1)` or `B_ψ = √(R−r0+1) G_max`.
    pub fn feature_bound(&self, family: usize) -> f64 {
        match self.families[family] {
            TaskFamilySpec::Linear { .. } => (self.hull().l2_bound().powi(2) + 1.0).sqrt(),
            TaskFamilySpec::Series { r0, r_max, .. } => {
                ((r_max + 1 - r0) as f64).sqrt() * self.g_max(family).unwrap_or(0.0)
            }
        }
    }

    /// Analytic sup-norm bound of family `i`.
    pub fn family_sup(&self, family: usize) -> f64 {
        let (b1, b2) = self.families[family].effective_bounds();
        match self.families[family] {
            TaskFamilySpec::Linear { .. } => b1 * self.hull().l2_bound() + b2,
            TaskFamilySpec::Series { .. } => b1 * self.feature_bound(family),
        }
    }

    /// `B_f = max_i sup_f |f|`.
    pub fn b_f(&self) -> f64 {
        (0..self.n_families())
            .map(|i| self.family_sup(i))
            .fold(0.0, f64::max)
    }

    /// `L_f = max_i Lip(f)` over the hull.
    pub fn lip_f(&self) -> f64 {
        self.families
            .iter()
            .map(|f| f.lip_bound(self.hull()))
            .fold(0.0, f64::max)
    }

    pub fn param_dim(&self, family: usize) -> usize {
        self.families[family].dim(self.d_feat())
    }

    /// Every problem that makes the mixture unrunnable; empty iff valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        self.validate_at("mixture")
    }

    pub fn validate_at(&self, prefix: &str) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let key = |s: &str| format!("{prefix}.{s}");
        if self.families.is_empty() {
            out.push(Diagnostic::new(key("families"), "at least one family is required"));
        }
        if self.weights.len() != self.families.len() {
            out.push(Diagnostic::new(
                key("weights"),
                format!("{} weights for {} families", self.weights.len(), self.families.len()),
            ));
        }
        if self.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            out.push(Diagnostic::new(key("weights"), "every weight must be positive"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            out.push(Diagnostic::new(key("weights"), format!("weights sum to {total}, expected 1")));
        }
        if !(self.sigma_eps > 0.0) || !self.sigma_eps.is_finite() {
            out.push(Diagnostic::new(key("sigma_eps"), "noise level must be positive and finite"));
        }
        if self.p < 2 {
            out.push(Diagnostic::new(key("p"), "context length must be at least 2"));
        }
        self.input.validate_into(&key("input"), &mut out);
        if let Some(h) = &self.support {
            h.validate_into(&key("support"), &mut out);
            if !self.input.inside(h) {
                out.push(Diagnostic::new(key("support"), "input box must lie inside the support hull"));
            }
        }
        let d = self.d_feat();
        for (i, f) in self.families.iter().enumerate() {
            let fk = |s: &str| format!("{prefix}.families[{i}].{s}");
            let tau = f.tau();
            if !(tau > 0.0) || !tau.is_finite() {
                out.push(Diagnostic::new(fk("tau"), "prior std must be positive"));
            }
            match *f {
                TaskFamilySpec::Linear { b_w, b_b, .. } => {
                    if !(b_w > 0.0) {
                        out.push(Diagnostic::new(fk("b_w"), "weight bound must be positive"));
                    }
                    if !(b_b > 0.0) {
                        out.push(Diagnostic::new(fk("b_b"), "intercept bound must be positive"));
                    }
                }
                TaskFamilySpec::Series { r0, r_max, b_a, .. } => {
                    if r0 < 2 {
                        out.push(Diagnostic::new(
                            fk("r0"),
                            format!("r0 = {r0}: series families require r0 >= 2 (no constant or linear terms)"),
                        ));
                    }
                    if r_max < r0 {
                        out.push(Diagnostic::new(fk("r_max"), "r_max must be at least r0"));
                    }
                    if !(b_a > 0.0) {
                        out.push(Diagnostic::new(fk("b_a"), "coefficient bound must be positive"));
                    }
                    if d != 1 {
                        out.push(Diagnostic::new(fk("kind"), "series families need a one-dimensional input"));
                    }
                }
            }
            if tau > 0.0 && r_ok(f) {
                let mass = f.truncated_mass(d);
                if mass > MAX_TRUNCATED_MASS {
                    out.push(Diagnostic::new(
                        fk("tau"),
                        format!("prior mass outside truncation set is {mass:.3e} (limit {MAX_TRUNCATED_MASS:e})"),
                    ));
                }
            }
        }
        out
    }

    /// `validate` as a `Result`, reporting the first diagnostic.
    pub fn check(&self) -> Result<()> {
        match self.validate().into_iter().next() {
            None => Ok(()),
            Some(d) => Err(Error::config(d.key, d.message)),
        }
    }
}

fn r_ok(f: &TaskFamilySpec) -> bool {
    match *f {
        TaskFamilySpec::Series { r0, r_max, .. } => r_max >= r0,
        TaskFamilySpec::Linear { .. } => true,
    }
}

/// A sampled task: family index and parameters (`w ‖ b` or `a`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDraw {
    pub family_index: usize,
    pub params: Vec<f64>,
}

/// A complete prompt of length `p`: `p + 1` inputs and `p` outputs.
///
/// `xs` is stored flat, `d` values per input. Prefix `P^k` consists of the
/// first `k` pairs and the query `x_{k+1}` (1-based). `y_last` is the noisy
/// label of the final query, which the training objective needs at `k = p`;
/// it never enters a context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Prompt<S = f64> {
    pub d: usize,
    pub xs: Vec<S>,
    pub ys: Vec<S>,
    pub y_last: S,
    pub task: TaskDraw,
}

impl<S: Scalar> Prompt<S> {
    pub fn p(&self) -> usize {
        self.ys.len()
    }

    /// Noisy label `y_{k+1}` of the query of prefix `P^k`, `k = 1..=p`.
    #[inline]
    pub fn target(&self, k: usize) -> S {
        if k < self.ys.len() {
            self.ys[k]
        } else {
            self.y_last
        }
    }

    /// Input `i` (0-based); `x(k)` is the query of prefix `P^k`.
    #[inline]
    pub fn x(&self, i: usize) -> &[S] {
        &self.xs[i * self.d..(i + 1) * self.d]
    }

    pub fn cast<T: Scalar>(&self) -> Prompt<T> {
        Prompt {
            d: self.d,
            xs: self.xs.iter().map(|v| T::lit(v.as_f64())).collect(),
            ys: self.ys.iter().map(|v| T::lit(v.as_f64())).collect(),
            y_last: T::lit(self.y_last.as_f64()),
            task: self.task.clone(),
        }
    }

    /// Same prompt with the first `k` context pairs reordered by `perm`.
    pub fn permuted(&self, k: usize, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (dst, &src) in perm.iter().enumerate().take(k) {
            out.ys[dst] = self.ys[src];
            out.xs[dst * self.d..(dst + 1) * self.d].copy_from_slice(self.x(src));
        }
        out
    }
}

/// Draws a family index and parameters.
pub fn sample_task<R: Rng + ?Sized>(spec: &MixtureSpec, rng: &mut R) -> Result<TaskDraw> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut family_index = spec.n_families() - 1;
    for (i, w) in spec.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            family_index = i;
            break;
        }
    }
    let params = spec.families[family_index].sample_params(spec.d_feat(), family_index, rng)?;
    Ok(TaskDraw {
        family_index,
        params,
    })
}

pub fn eval_task(task: &TaskDraw, spec: &MixtureSpec, x: &[f64]) -> f64 {
    spec.families[task.family_index].eval(&task.params, x)
}

/// Inputs from `input_rng`, noise from `noise_rng`.
pub fn sample_prompt_split<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    spec: &MixtureSpec,
    task: &TaskDraw,
    input_rng: &mut R1,
    noise_rng: &mut R2,
) -> Prompt {
    let d = spec.d_feat();
    let p = spec.p;
    let mut xs = Vec::with_capacity((p + 1) * d);
    for _ in 0..=p {
        spec.input.sample_into(input_rng, &mut xs);
    }
    let mut ys: Vec<f64> = (0..=p)
        .map(|i| {
            let eps: f64 = StandardNormal.sample(noise_rng);
            eval_task(task, spec, &xs[i * d..(i + 1) * d]) + spec.sigma_eps * eps
        })
        .collect();
    let y_last = ys.pop().unwrap_or_default();
    Prompt {
        d,
        xs,
        ys,
        y_last,
        task: task.clone(),
    }
}

/// Inputs then noise, both from `rng`.
pub fn sample_prompt<R: Rng>(spec: &MixtureSpec, task: &TaskDraw, rng: &mut R) -> Prompt {
    let d = spec.d_feat();
    let mut xs = Vec::with_capacity((spec.p + 1) * d);
    for _ in 0..=spec.p {
        spec.input.sample_into(rng, &mut xs);
    }
    let mut ys: Vec<f64> = (0..=spec.p)
        .map(|i| {
            let eps: f64 = StandardNormal.sample(rng);
            eval_task(task, spec, &xs[i * d..(i + 1) * d]) + spec.sigma_eps * eps
        })
        .collect();
    let y_last = ys.pop().unwrap_or_default();
    Prompt {
        d,
        xs,
        ys,
        y_last,
        task: task.clone(),
    }
}

/// Stream tags used by [`draw_prompt_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptStreams {
    pub task: u64,
    pub input: u64,
    pub noise: u64,
}

impl Default for PromptStreams {
    fn default() -> Self {
        Self {
            task: tags::TASK,
            input: tags::INPUT,
            noise: tags::NOISE,
        }
    }
}

/// Prompt `index` of the stream family rooted at `master`.
pub fn draw_prompt(spec: &MixtureSpec, master: u64, index: u64) -> Result<Prompt> {
    draw_prompt_with(spec, master, index, PromptStreams::default())
}

pub fn draw_prompt_with(spec: &MixtureSpec, master: u64, index: u64, streams: PromptStreams) -> Result<Prompt> {
    let task = sample_task(spec, &mut rng::stream(master, streams.task, index))?;
    Ok(sample_prompt_split(
        spec,
        &task,
        &mut rng::stream(master, streams.input, index),
        &mut rng::stream(master, streams.noise, index),
    ))
}

/// `n` independent prompts, each with a fresh task. Element `i` depends only
/// on `(master, i)`, so the batch is identical for any worker count.
pub fn sample_batch(spec: &MixtureSpec, n: usize, master: u64) -> Result<Vec<Prompt>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| draw_prompt(spec, master, i))
        .collect()
}

/// `Σ_k log N(y_k; f(x_k), σ²)` over the first `k` pairs.
pub fn log_likelihood(spec: &MixtureSpec, prompt: &Prompt, k: usize) -> f64 {
    let s2 = spec.sigma_eps * spec.sigma_eps;
    (0..k)
        .map(|i| stats::log_normal_pdf(prompt.ys[i], eval_task(&prompt.task, spec, prompt.x(i)), s2))
        .sum()
}

/// One prompt per row: `family_index, params…, x_1..x_{p+1}, y_1..y_{p+1}`
/// (the last label is the held-back query label).
/// Parameter columns are padded to the largest family dimension.
pub fn write_prompts_csv<W: Write>(spec: &MixtureSpec, prompts: &[Prompt], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n_par = (0..spec.n_families()).map(|i| spec.param_dim(i)).max().unwrap_or(0);
    let d = spec.d_feat();
    let mut header = vec!["family_index".to_string()];
    header.extend((0..n_par).map(|j| format!("param_{j}")));
    for i in 1..=spec.p + 1 {
        if d == 1 {
            header.push(format!("x_{i}"));
        } else {
            header.extend((0..d).map(|j| format!("x_{i}_{j}")));
        }
    }
    header.extend((1..=spec.p + 1).map(|i| format!("y_{i}")));
    w.write_record(&header)?;
    for pr in prompts {
        let mut row = vec![pr.task.family_index.to_string()];
        row.extend((0..n_par).map(|j| pr.task.params.get(j).map(|v| v.to_string()).unwrap_or_default()));
        row.extend(pr.xs.iter().map(f64::to_string));
        row.extend(pr.ys.iter().map(f64::to_string));
        row.push(pr.y_last.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
