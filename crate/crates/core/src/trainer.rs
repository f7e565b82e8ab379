//! Empirical risk minimization of the transformer over a fixed pretraining
//! set of prompts.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Architecture, TransformerParams};
use crate::risk::{self, TransformerPredictor};
use crate::rng::{self, derive_seed, tags};
use crate::stats::Estimate;
use crate::taskgen::{self, MixtureSpec, Prompt};

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Pretraining set size `N`.
    pub n_prompts: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip_norm: f64,
    /// Rescale weights onto the spectral budgets after every step.
    pub spectral_projection: bool,
    pub seed: u64,
    /// Held-out evaluation period in steps; `0` evaluates only at the end.
    pub eval_every: usize,
    pub n_heldout: usize,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_prompts: 2000,
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 10.0,
            spectral_projection: false,
            seed: 0,
            eval_every: 250,
            n_heldout: 500,
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate_at(&self, prefix: &str) -> Vec<taskgen::Diagnostic> {
        use taskgen::Diagnostic;
        let mut out = Vec::new();
        let k = |s: &str| format!("{prefix}.{s}");
        for (name, v) in [("n_prompts", self.n_prompts), ("steps", self.steps), ("batch_size", self.batch_size)] {
            if v == 0 {
                out.push(Diagnostic::new(k(name), "must be positive"));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            out.push(Diagnostic::new(k("learning_rate"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            out.push(Diagnostic::new(k("beta1"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            out.push(Diagnostic::new(k("beta2"), "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            out.push(Diagnostic::new(k("eps"), "must be positive"));
        }
        if self.grad_clip_norm < 0.0 {
            out.push(Diagnostic::new(k("grad_clip_norm"), "must be non-negative"));
        }
        let a = &self.arch;
        if a.m == 0 {
            out.push(Diagnostic::new(k("arch.m"), "must be positive"));
        }
        if !(a.tau > 0.0 && a.tau <= 1.0) {
            out.push(Diagnostic::new(k("arch.tau"), "must lie in (0, 1]"));
        }
        if a.enc_depth == 0 || a.dec_depth == 0 {
            out.push(Diagnostic::new(k("arch.enc_depth"), "depths must be positive"));
        }
        if !(a.c_phi > 0.0 && a.c_rho > 0.0) {
            out.push(Diagnostic::new(k("arch.c_phi"), "spectral budget constants must be positive"));
        }
        out
    }
}

/// Optimizer state over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, n: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (x, g) in theta.iter_mut().zip(grad) {
                    *x -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t as i32);
                let c2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Scales `g` to global norm at most `max_norm` (no-op for `max_norm = 0`).
pub fn clip_grad(g: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > max_norm {
        let f = max_norm / n;
        g.iter_mut().for_each(|v| *v *= f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    /// Minibatch objective before the update at this step.
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
    pub s_encoder: Option<f64>,
    pub s_decoder: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// Full-data objective of the returned parameters.
    pub final_objective: f64,
    /// Set when training resumed from existing parameters with a fresh
    /// optimizer state.
    pub resumed_fresh_optimizer: bool,
    /// Not part of any emitted CSV, so reports stay byte-reproducible.
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "train_loss", "heldout_loss", "s_encoder", "s_decoder"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record(&[
                r.step.to_string(),
                r.train_loss.to_string(),
                opt(r.heldout_loss),
                opt(r.s_encoder),
                opt(r.s_decoder),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pretraining and held-out sets for a config.
pub fn training_data(spec: &MixtureSpec, cfg: &TrainConfig) -> Result<(Vec<Prompt>, Vec<Prompt>)> {
    let train = taskgen::sample_batch(spec, cfg.n_prompts, derive_seed(cfg.seed, tags::TRAIN_DATA, 0))?;
    let heldout = taskgen::sample_batch(spec, cfg.n_heldout.max(1), derive_seed(cfg.seed, tags::HELDOUT, 0))?;
    Ok((train, heldout))
}

pub fn initial_params(spec: &MixtureSpec, cfg: &TrainConfig) -> TransformerParams<f64> {
    let b_m = cfg.arch.b_m.unwrap_or_else(|| spec.b_f());
    TransformerParams::init(spec.d_feat(), &cfg.arch, b_m, &mut rng::stream(cfg.seed, tags::INIT, 0))
}

/// Trains from a fresh initialization on freshly generated data.
pub fn erm_train(spec: &MixtureSpec, cfg: &TrainConfig) -> Result<(TransformerParams<f64>, TrainLog)> {
    let (train, heldout) = training_data(spec, cfg)?;
    train_from(initial_params(spec, cfg), cfg, &train, &heldout, false)
}

/// Minimizes the objective over `train` starting from `params`. Minibatches
/// walk through per-epoch permutations of the fixed set.
pub fn train_from(
    mut params: TransformerParams<f64>,
    cfg: &TrainConfig,
    train: &[Prompt],
    heldout: &[Prompt],
    resumed: bool,
) -> Result<(TransformerParams<f64>, TrainLog)> {
    let start = Instant::now();
    let n = train.len();
    let bs = cfg.batch_size.min(n);
    let mut opt = Optimizer::new(cfg, params.n_params());
    let mut theta = params.flatten();
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut epoch = 0u64;
    let mut batch: Vec<Prompt> = Vec::with_capacity(bs);
    let snapshot = |p: &TransformerParams<f64>, step: usize, loss: f64| {
        let sr = p.spectral_report(cfg.arch.c_phi, cfg.arch.c_rho);
        TrainRecord {
            step,
            train_loss: loss,
            heldout_loss: Some(p.loss(heldout)),
            s_encoder: Some(sr.s_encoder),
            s_decoder: Some(sr.s_decoder),
        }
    };
    for step in 0..cfg.steps {
        if cursor + bs > n {
            order = (0..n).collect();
            order.shuffle(&mut rng::stream(cfg.seed, tags::PERMUTE, epoch));
            epoch += 1;
            cursor = 0;
        }
        batch.clear();
        batch.extend(order[cursor..cursor + bs].iter().map(|&i| train[i].clone()));
        cursor += bs;

        let (loss, grad) = match params.loss_and_grad(&batch) {
            Ok(v) => v,
            Err(_) => return Err(diverged(step, f64::NAN, &params)),
        };
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(diverged(step, loss, &params));
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            records.push(snapshot(&params, step, loss));
        } else {
            records.push(TrainRecord {
                step,
                train_loss: loss,
                heldout_loss: None,
                s_encoder: None,
                s_decoder: None,
            });
        }
        let mut g = grad.flatten();
        clip_grad(&mut g, cfg.grad_clip_norm);
        let last_good = params.clone();
        opt.step(&mut theta, &g);
        params.set_flat(&theta);
        if cfg.spectral_projection && params.project_to_budgets(cfg.arch.c_phi, cfg.arch.c_rho) {
            theta = params.flatten();
        }
        if !params.is_finite() {
            return Err(diverged(step, f64::NAN, &last_good));
        }
    }
    let final_objective = params.loss(train);
    records.push(snapshot(&params, cfg.steps, final_objective));
    Ok((
        params,
        TrainLog {
            records,
            final_objective,
            resumed_fresh_optimizer: resumed,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

fn diverged(step: usize, loss: f64, last_good: &TransformerParams<f64>) -> Error {
    Error::Diverged {
        step,
        loss,
        last_good: Box::new(last_good.clone()),
    }
}

/// One cell of a `(p, N)` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: usize,
    pub n: usize,
    pub pn: usize,
    pub seed: u64,
    pub r_bg: Estimate,
}

/// Trains one model per `(p, N)` cell and seed and estimates its held-out
/// Bayes gap on `n_mc` fresh prompts.
pub fn sweep_pn(
    spec: &MixtureSpec,
    grid: &[(usize, usize)],
    seeds: &[u64],
    cfg: &TrainConfig,
    n_mc: usize,
    eval_seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &(p, n) in grid {
        let mut s = spec.clone();
        s.p = p;
        for &seed in seeds {
            let c = TrainConfig {
                n_prompts: n,
                seed,
                ..cfg.clone()
            };
            let (params, _) = erm_train(&s, &c)?;
            let rep = risk::estimate_risks(&TransformerPredictor::new(params, "trained"), &s, n_mc, eval_seed)?;
            rows.push(SweepRow {
                p,
                n,
                pn: p * n,
                seed,
                r_bg: rep.aggregate.r_bg,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p", "N", "pN", "seed", "R_BG", "R_BG_se"])?;
    for r in rows {
        w.write_record(&[
            r.p.to_string(),
            r.n.to_string(),
            r.pn.to_string(),
            r.seed.to_string(),
            r.r_bg.mean.to_string(),
            r.r_bg.se.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
