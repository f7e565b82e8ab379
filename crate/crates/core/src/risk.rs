//! Monte Carlo estimation of the in-context risk and its split into Bayes Gap
//! and Posterior Variance.
//!
//! All estimators share one stream of prompts (common random numbers). The
//! posterior-variance term is evaluated in closed form per prompt.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate::{bayes_path, MixturePosterior};
use crate::error::Result;
use crate::net::TransformerParams;
use crate::rng::{self, tags};
use crate::stats::Estimate;
use crate::taskgen::{self, eval_task, MixtureSpec, Prompt, PromptStreams, TaskDraw};

/// Anything mapping prompts to predictions for `k = 1..=p`.
pub trait Predictor: Sync {
    /// Predictions `M(P^k)` for `k = 1..=p`. `index` identifies the prompt
    /// within the Monte Carlo stream for predictors that need randomness.
    fn predict_all(&self, spec: &MixtureSpec, prompt: &Prompt, index: u64) -> Result<Vec<f64>>;

    fn name(&self) -> String;
}

/// The Bayes posterior-mean predictor.
#[derive(Debug, Clone, Copy, Default)]
pub struct BayesPredictor;

impl Predictor for BayesPredictor {
    fn predict_all(&self, spec: &MixtureSpec, prompt: &Prompt, _: u64) -> Result<Vec<f64>> {
        Ok(bayes_path(spec, prompt)?[1..].iter().map(|v| v.0).collect())
    }

    fn name(&self) -> String {
        "bayes".into()
    }
}

/// A fixed output.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl Predictor for ConstantPredictor {
    fn predict_all(&self, _: &MixtureSpec, prompt: &Prompt, _: u64) -> Result<Vec<f64>> {
        Ok(vec![self.0; prompt.p()])
    }

    fn name(&self) -> String {
        format!("constant({})", self.0)
    }
}

/// A transformer checkpoint.
#[derive(Debug, Clone)]
pub struct TransformerPredictor {
    pub params: TransformerParams<f64>,
    pub label: String,
}

impl TransformerPredictor {
    pub fn new(params: TransformerParams<f64>, label: impl Into<String>) -> Self {
        Self {
            params,
            label: label.into(),
        }
    }
}

impl Predictor for TransformerPredictor {
    fn predict_all(&self, _: &MixtureSpec, prompt: &Prompt, _: u64) -> Result<Vec<f64>> {
        Ok(self.params.forward_all_k(prompt))
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Order-dependent probe: the decoder sees only the first context example's
/// feature. With `n_perm > 0` the prediction is averaged over that many
/// random orderings of the context.
#[derive(Debug, Clone)]
pub struct ProbePredictor {
    pub params: TransformerParams<f64>,
    pub n_perm: usize,
    pub seed: u64,
}

impl Predictor for ProbePredictor {
    fn predict_all(&self, _: &MixtureSpec, prompt: &Prompt, index: u64) -> Result<Vec<f64>> {
        let p = prompt.p();
        let feat = |i: usize| {
            let mut u = prompt.x(i).to_vec();
            u.push(prompt.ys[i]);
            self.params.encode(&u)
        };
        let mut r = rng::stream(self.seed, tags::PERMUTE, index);
        Ok((1..=p)
            .map(|k| {
                let q = prompt.x(k);
                if self.n_perm == 0 {
                    return self.params.decode(&feat(0), q);
                }
                let mut idx: Vec<usize> = (0..k).collect();
                let mut acc = 0.0;
                for _ in 0..self.n_perm {
                    idx.shuffle(&mut r);
                    acc += self.params.decode(&feat(idx[0]), q);
                }
                acc / self.n_perm as f64
            })
            .collect())
    }

    fn name(&self) -> String {
        if self.n_perm == 0 {
            "probe".into()
        } else {
            format!("probe_sym{}", self.n_perm)
        }
    }
}

/// Estimates for one context length (`k = −1` marks the aggregate row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub k: i64,
    pub r: Estimate,
    pub r_bg: Estimate,
    pub r_pv: Estimate,
    pub cross: Estimate,
    /// `R − R_BG − R_PV`, estimated from per-prompt differences.
    pub residual: Estimate,
}

impl RiskRow {
    /// `|residual| ≤ z · SE(residual)`.
    pub fn identity_holds(&self, z: f64) -> bool {
        self.residual.within(0.0, z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub model: String,
    pub n_prompts: usize,
    pub per_k: Vec<RiskRow>,
    pub aggregate: RiskRow,
    /// Per-prompt risk averaged over `k`, kept for paired comparisons.
    #[serde(skip)]
    pub prompt_risk: Vec<f64>,
    /// Per-prompt Bayes gap averaged over `k`.
    #[serde(skip)]
    pub prompt_gap: Vec<f64>,
}

impl RiskReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "R", "R_se", "R_BG", "R_BG_se", "R_PV", "R_PV_se", "cross", "cross_se"])?;
        for row in self.per_k.iter().chain(std::iter::once(&self.aggregate)) {
            w.write_record(&[
                row.k.to_string(),
                row.r.mean.to_string(),
                row.r.se.to_string(),
                row.r_bg.mean.to_string(),
                row.r_bg.se.to_string(),
                row.r_pv.mean.to_string(),
                row.r_pv.se.to_string(),
                row.cross.mean.to_string(),
                row.cross.se.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Paired estimate of `E[a_i − b_i]` from aligned per-prompt values.
pub fn paired_difference(a: &[f64], b: &[f64]) -> Estimate {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Estimate::from_samples(&d)
}

/// Per-prompt, per-k terms `(R, R_BG, R_PV, cross)`.
type Terms = Vec<[f64; 4]>;

fn prompt_terms(model: &dyn Predictor, spec: &MixtureSpec, prompt: &Prompt, index: u64) -> Result<Terms> {
    let path = bayes_path(spec, prompt)?;
    let preds = model.predict_all(spec, prompt, index)?;
    Ok((1..=prompt.p())
        .map(|k| {
            let f = eval_task(&prompt.task, spec, prompt.x(k));
            let (mb, pv) = path[k];
            let m = preds[k - 1];
            [(f - m) * (f - m), (m - mb) * (m - mb), pv, (f - mb) * (mb - m)]
        })
        .collect())
}

fn summarize(model: String, all: Vec<Terms>) -> RiskReport {
    let n = all.len();
    let p = all.first().map_or(0, Vec::len);
    let column = |k: Option<usize>, j: usize| -> Vec<f64> {
        all.iter()
            .map(|t| match k {
                Some(k) => t[k][j],
                None => t.iter().map(|v| v[j]).sum::<f64>() / p as f64,
            })
            .collect()
    };
    let row = |k: Option<usize>| {
        let cols: Vec<Vec<f64>> = (0..4).map(|j| column(k, j)).collect();
        let resid: Vec<f64> = (0..n).map(|i| cols[0][i] - cols[1][i] - cols[2][i]).collect();
        RiskRow {
            k: k.map_or(-1, |k| k as i64 + 1),
            r: Estimate::from_samples(&cols[0]),
            r_bg: Estimate::from_samples(&cols[1]),
            r_pv: Estimate::from_samples(&cols[2]),
            cross: Estimate::from_samples(&cols[3]),
            residual: Estimate::from_samples(&resid),
        }
    };
    RiskReport {
        model,
        n_prompts: n,
        per_k: (0..p).map(|k| row(Some(k))).collect(),
        aggregate: row(None),
        prompt_risk: column(None, 0),
        prompt_gap: column(None, 1),
    }
}

/// Risk, Bayes gap, posterior variance and cross term of `model` over
/// `n_mc` prompts drawn from the streams rooted at `master`.
pub fn estimate_risks(model: &dyn Predictor, spec: &MixtureSpec, n_mc: usize, master: u64) -> Result<RiskReport> {
    estimate_risks_with(model, spec, n_mc, master, PromptStreams::default())
}

pub fn estimate_risks_with(
    model: &dyn Predictor,
    spec: &MixtureSpec,
    n_mc: usize,
    master: u64,
    streams: PromptStreams,
) -> Result<RiskReport> {
    let all = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| {
            let prompt = taskgen::draw_prompt_with(spec, master, i, streams)?;
            prompt_terms(model, spec, &prompt, i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(model.name(), all))
}

/// Expected posterior variance at a fresh query for `k = 0..=k_max`, with
/// paired estimates of the successive differences `PV_{k+1} − PV_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvCurve {
    pub levels: Vec<Estimate>,
    pub steps: Vec<Estimate>,
}

impl PvCurve {
    /// Non-increasing up to `z` standard errors of each paired step.
    pub fn non_increasing(&self, z: f64) -> bool {
        self.steps.iter().all(|s| s.mean <= z * s.se)
    }
}

pub fn pv_curve(spec: &MixtureSpec, k_max: usize, n_mc: usize, master: u64) -> Result<PvCurve> {
    assert!(k_max <= spec.p, "k_max exceeds the context length");
    let rows = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| {
            let prompt = taskgen::draw_prompt(spec, master, i)?;
            Ok(bayes_path(spec, &prompt)?[..=k_max].iter().map(|v| v.1).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let levels = (0..=k_max).map(|k| Estimate::from_samples(&col(k))).collect();
    let steps = (0..k_max).map(|k| paired_difference(&col(k + 1), &col(k))).collect();
    Ok(PvCurve { levels, steps })
}

/// Outcome of the posterior-variance versus sup-risk comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceResult {
    pub pv: Estimate,
    /// Risk of the posterior mean at the worst grid task.
    pub sup_risk: Estimate,
    pub per_task: Vec<Estimate>,
    pub holds: bool,
}

/// Grid of extreme tasks for a single family: sign corners of the
/// truncation set's coordinate blocks plus random interior points.
pub fn default_f_grid(spec: &MixtureSpec, family: usize, n: usize, seed: u64) -> Vec<TaskDraw> {
    let fam = &spec.families[family];
    let dim = spec.param_dim(family);
    let (b1, b2) = fam.effective_bounds();
    let mut grid = Vec::with_capacity(n);
    let n_corners = 1usize << dim.min(10);
    for c in 0..n_corners.min(n) {
        let signs: Vec<f64> = (0..dim).map(|j| if c >> j & 1 == 1 { -1.0 } else { 1.0 }).collect();
        let params = match fam {
            crate::taskgen::TaskFamilySpec::Linear { .. } => {
                let dw = (dim - 1) as f64;
                let mut v: Vec<f64> = signs[..dim - 1].iter().map(|s| s * b1 / dw.sqrt()).collect();
                v.push(signs[dim - 1] * b2);
                v
            }
            crate::taskgen::TaskFamilySpec::Series { .. } => {
                signs.iter().map(|s| s * b1 / (dim as f64).sqrt()).collect()
            }
        };
        grid.push(TaskDraw {
            family_index: family,
            params,
        });
    }
    let mut r = rng::stream(seed, tags::GRID, family as u64);
    while grid.len() < n {
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-b1.max(b2)..=b1.max(b2))).collect();
        if fam.in_truncation(&v) {
            grid.push(TaskDraw {
                family_index: family,
                params: v,
            });
        }
    }
    grid
}

/// Compares the prior-averaged posterior variance at context length `k`
/// with the largest conditional risk of the posterior mean over `f_grid`.
pub fn minimax_dominance_check(
    spec: &MixtureSpec,
    k: usize,
    n_mc: usize,
    f_grid: &[TaskDraw],
    master: u64,
) -> Result<DominanceResult> {
    assert!(k < spec.p + 1, "k exceeds the context length");
    let pv_samples = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| {
            let prompt = taskgen::draw_prompt(spec, master, i)?;
            let mp = MixturePosterior::<f64>::from_prompt(spec, &prompt, k)?;
            Ok(mp.posterior_variance(spec, prompt.x(k)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let pv = Estimate::from_samples(&pv_samples);
    let per_task = f_grid
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let losses = (0..n_mc as u64)
                .into_par_iter()
                .map(|i| {
                    let idx = (t as u64) << 32 | i;
                    let prompt = taskgen::sample_prompt_split(
                        spec,
                        task,
                        &mut rng::stream(master, tags::INPUT, idx),
                        &mut rng::stream(master, tags::NOISE, idx),
                    );
                    let mp = MixturePosterior::<f64>::from_prompt(spec, &prompt, k)?;
                    let q = prompt.x(k);
                    let e = eval_task(task, spec, q) - mp.bayes_predict(spec, q);
                    Ok(e * e)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(Estimate::from_samples(&losses))
        })
        .collect::<Result<Vec<_>>>()?;
    let sup_risk = per_task
        .iter()
        .copied()
        .max_by(|a, b| a.mean.total_cmp(&b.mean))
        .unwrap_or_default();
    let se = (pv.se * pv.se + sup_risk.se * sup_risk.se).sqrt();
    Ok(DominanceResult {
        pv,
        sup_risk,
        per_task,
        holds: pv.mean <= sup_risk.mean + 3.0 * se,
    })
}
