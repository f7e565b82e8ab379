//! Subcommand pipelines. Every output lands in the configured directory as
//! a CSV with a `.meta` sidecar; the run ends with an atomically written
//! `manifest.json`.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use icl_bayes_core::conjugate::MixturePosterior;
use icl_bayes_core::histo::{self, SweepSettings};
use icl_bayes_core::ident;
use icl_bayes_core::net::TransformerParams;
use icl_bayes_core::ood::{self, ShiftSpec};
use icl_bayes_core::risk::{self, BayesPredictor, ConstantPredictor, Predictor, TransformerPredictor};
use icl_bayes_core::rng::derive_seed;
use icl_bayes_core::stats::Estimate;
use icl_bayes_core::taskgen::{self, MixtureSpec, TaskDraw};
use icl_bayes_core::trainer::{self, TrainConfig};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Stream tags for the subcommands, mixed into the master seed.
mod tags {
    pub const GENERATE: u64 = 0x4745_4e45;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const DECOMPOSE: u64 = 0x4445_434f;
    pub const IDENTIFY: u64 = 0x4944_454e;
    pub const OOD: u64 = 0x4f4f_4443;
    pub const APPROX: u64 = 0x4150_5052;
    pub const SWEEP: u64 = 0x5357_4545;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subcommand {
    Generate,
    Train,
    Decompose,
    Identify,
    Oodcheck,
    Approx,
    Sweep,
    All,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Generate => "generate",
            Subcommand::Train => "train",
            Subcommand::Decompose => "decompose",
            Subcommand::Identify => "identify",
            Subcommand::Oodcheck => "oodcheck",
            Subcommand::Approx => "approx",
            Subcommand::Sweep => "sweep",
            Subcommand::All => "all",
        }
    }

    fn expand(self) -> Vec<Subcommand> {
        use Subcommand::*;
        match self {
            All => vec![Generate, Train, Decompose, Identify, Oodcheck, Approx, Sweep],
            s => vec![s],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub subcommand: String,
    pub outputs: Vec<String>,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub steps: Vec<StepRecord>,
    /// Every recorded check passed.
    pub passed: bool,
}

impl RunManifest {
    pub fn failed_checks(&self) -> Vec<String> {
        self.steps
            .iter()
            .flat_map(|s| s.checks.iter().filter(|c| !c.passed).map(move |c| format!("{}/{}", s.subcommand, c.name)))
            .collect()
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let io = |source| CliError::Output {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct Step<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    hash: &'a str,
    outputs: Vec<String>,
    checks: Vec<Check>,
}

impl Step<'_> {
    fn seed(&self, tag: u64, index: u64) -> u64 {
        derive_seed(self.cfg.seed, tag, index)
    }

    fn csv(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut Vec<u8>) -> icl_bayes_core::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        body(&mut buf)?;
        let path = self.dir.join(name);
        write_atomic(&path, &buf)?;
        let meta = format!("config_hash={} seed={}\n", self.hash, self.cfg.seed);
        write_atomic(&self.dir.join(format!("{name}.meta")), meta.as_bytes())?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

/// Runs `sub` (every laboratory for `All`) and writes the manifest.
pub fn run(sub: Subcommand, cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let diags = cfg.validate();
    if !diags.is_empty() {
        return Err(CliError::Invalid(diags));
    }
    let started = unix_now();
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|source| CliError::Output {
        path: dir.clone(),
        source,
    })?;
    let hash = cfg.hash();
    write_atomic(&dir.join("resolved_config.toml"), cfg.to_toml().as_bytes())?;
    let mut steps = Vec::new();
    for s in sub.expand() {
        let mut step = Step {
            cfg,
            dir: &dir,
            hash: &hash,
            outputs: Vec::new(),
            checks: Vec::new(),
        };
        match s {
            Subcommand::Generate => generate(&mut step)?,
            Subcommand::Train => train(&mut step)?,
            Subcommand::Decompose => decompose(&mut step)?,
            Subcommand::Identify => identify(&mut step)?,
            Subcommand::Oodcheck => oodcheck(&mut step)?,
            Subcommand::Approx => approx(&mut step)?,
            Subcommand::Sweep => sweep(&mut step)?,
            Subcommand::All => unreachable!("expanded above"),
        }
        steps.push(StepRecord {
            subcommand: s.name().to_string(),
            outputs: step.outputs,
            checks: step.checks,
        });
    }
    let passed = steps.iter().all(|s| s.checks.iter().all(|c| c.passed));
    let manifest = RunManifest {
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: unix_now(),
        steps,
        passed,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

fn generate(st: &mut Step) -> Result<(), CliError> {
    let spec = &st.cfg.mixture;
    let prompts = taskgen::sample_batch(spec, st.cfg.generate.n_prompts, st.seed(tags::GENERATE, 0))?;
    st.csv("prompts.csv", |w| taskgen::write_prompts_csv(spec, &prompts, w))
}

/// Training config with its seed mapped into the master stream.
fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seed, tags::TRAIN, cfg.train.seed),
        ..cfg.train.clone()
    }
}

/// Identifies the (mixture, training config) pair a checkpoint belongs to.
fn model_key(cfg: &ExperimentConfig) -> String {
    let text = format!(
        "{}\n{}",
        serde_json::to_string(&cfg.mixture).expect("mixture serializes"),
        serde_json::to_string(&train_config(cfg)).expect("train config serializes")
    );
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

const CHECKPOINT: &str = "checkpoint.json";

fn train(st: &mut Step) -> Result<(), CliError> {
    let cfg = st.cfg;
    let tc = train_config(cfg);
    let (params, log) = trainer::erm_train(&cfg.mixture, &tc)?;
    st.csv("train_log.csv", |w| log.write_csv(w))?;
    save_checkpoint(st, &params)?;
    st.check(
        "final_objective_finite",
        log.final_objective.is_finite(),
        format!("objective {}", log.final_objective),
    );
    if tc.spectral_projection {
        let sr = params.spectral_report(tc.arch.c_phi, tc.arch.c_rho);
        st.check(
            "spectral_budgets",
            sr.encoder_within && sr.decoder_within,
            format!("encoder {} / {}, decoder {} / {}", sr.s_encoder, sr.budget_encoder, sr.s_decoder, sr.budget_decoder),
        );
    }
    Ok(())
}

fn save_checkpoint(st: &mut Step, params: &TransformerParams<f64>) -> Result<(), CliError> {
    let path = st.dir.join(CHECKPOINT);
    let json = serde_json::to_string(&params.to_checkpoint()).map_err(icl_bayes_core::Error::from)?;
    write_atomic(&path, json.as_bytes())?;
    write_atomic(&st.dir.join(format!("{CHECKPOINT}.key")), model_key(st.cfg).as_bytes())?;
    st.outputs.push(CHECKPOINT.to_string());
    Ok(())
}

/// The trained model for this config: the stored checkpoint when its key
/// matches, otherwise a fresh training run (which is then stored).
fn trained_model(st: &mut Step) -> Result<TransformerParams<f64>, CliError> {
    let key = fs::read_to_string(st.dir.join(format!("{CHECKPOINT}.key"))).unwrap_or_default();
    if key == model_key(st.cfg) {
        if let Ok(p) = TransformerParams::load(&st.dir.join(CHECKPOINT)) {
            return Ok(p);
        }
    }
    let (params, _) = trainer::erm_train(&st.cfg.mixture, &train_config(st.cfg))?;
    save_checkpoint(st, &params)?;
    Ok(params)
}

fn write_estimates<W: std::io::Write>(
    out: W,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> icl_bayes_core::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn decompose(st: &mut Step) -> Result<(), CliError> {
    let cfg = st.cfg;
    let spec = &cfg.mixture;
    let trained = trained_model(st)?;
    let untrained = trainer::initial_params(spec, &train_config(cfg));
    let models: Vec<(&str, Box<dyn Predictor>)> = vec![
        ("bayes", Box::new(BayesPredictor)),
        ("trained", Box::new(TransformerPredictor::new(trained, "trained"))),
        ("untrained", Box::new(TransformerPredictor::new(untrained, "untrained"))),
        ("zero", Box::new(ConstantPredictor(0.0))),
    ];
    let mut summary = Vec::new();
    for &s in &cfg.risk.seeds {
        let master = st.seed(tags::DECOMPOSE, s);
        let reports = models
            .iter()
            .map(|(_, m)| risk::estimate_risks(m.as_ref(), spec, cfg.risk.n_mc, master))
            .collect::<icl_bayes_core::Result<Vec<_>>>()?;
        let bayes = &reports[0];
        for ((name, _), rep) in models.iter().zip(&reports) {
            st.csv(&format!("risk_report_{name}_s{s}.csv"), |w| rep.write_csv(w))?;
            let a = &rep.aggregate;
            st.check(
                format!("identity_{name}_s{s}"),
                a.identity_holds(3.0),
                format!("residual {} (se {})", a.residual.mean, a.residual.se),
            );
            st.check(
                format!("cross_zero_{name}_s{s}"),
                a.cross.within(0.0, 3.0),
                format!("cross {} (se {})", a.cross.mean, a.cross.se),
            );
            let d = risk::paired_difference(&bayes.prompt_risk, &rep.prompt_risk);
            if *name != "bayes" {
                st.check(
                    format!("bayes_optimal_vs_{name}_s{s}"),
                    d.mean <= 3.0 * d.se,
                    format!("R(bayes) - R({name}) = {} (se {})", d.mean, d.se),
                );
            }
            summary.push(vec![
                name.to_string(),
                s.to_string(),
                a.r.mean.to_string(),
                a.r_bg.mean.to_string(),
                a.r_pv.mean.to_string(),
                a.cross.mean.to_string(),
                a.residual.mean.to_string(),
                a.residual.se.to_string(),
                d.mean.to_string(),
                d.se.to_string(),
            ]);
        }
    }
    st.csv("risk_summary.csv", |w| {
        write_estimates(
            w,
            &["model", "seed", "R", "R_BG", "R_PV", "cross", "residual", "residual_se", "gap_to_bayes", "gap_to_bayes_se"],
            summary,
        )
    })?;

    let master = st.seed(tags::DECOMPOSE, u64::MAX);
    let curve = risk::pv_curve(spec, cfg.risk.pv_k_max, cfg.risk.n_mc, master)?;
    st.csv("pv_curve.csv", |w| {
        write_estimates(
            w,
            &["k", "PV", "PV_se", "step", "step_se"],
            curve.levels.iter().enumerate().map(|(k, e)| {
                let step = curve.steps.get(k);
                vec![
                    k.to_string(),
                    e.mean.to_string(),
                    e.se.to_string(),
                    step.map(|s| s.mean.to_string()).unwrap_or_default(),
                    step.map(|s| s.se.to_string()).unwrap_or_default(),
                ]
            }),
        )
    })?;
    st.check("pv_non_increasing", curve.non_increasing(3.0), format!("{} steps", curve.steps.len()));

    // Extreme tasks from every family, split evenly.
    let t = spec.n_families();
    let per = cfg.risk.dominance_grid.div_ceil(t);
    let grid: Vec<TaskDraw> = (0..t)
        .flat_map(|f| risk::default_f_grid(spec, f, per, master))
        .take(cfg.risk.dominance_grid.max(t))
        .collect();
    let dom = risk::minimax_dominance_check(spec, cfg.risk.dominance_k, cfg.risk.n_mc, &grid, master)?;
    st.csv("dominance.csv", |w| {
        write_estimates(
            w,
            &["task", "family", "risk", "risk_se"],
            grid.iter().zip(&dom.per_task).enumerate().map(|(i, (task, e))| {
                vec![i.to_string(), task.family_index.to_string(), e.mean.to_string(), e.se.to_string()]
            }),
        )
    })?;
    st.check(
        "minimax_dominance",
        dom.holds,
        format!("PV {} <= sup risk {}", dom.pv.mean, dom.sup_risk.mean),
    );
    Ok(())
}

fn identify(st: &mut Step) -> Result<(), CliError> {
    let cfg = st.cfg;
    let id = &cfg.ident;
    let mut spec = cfg.mixture.clone();
    spec.p = spec.p.max(id.k_max);
    let truth = TaskDraw {
        family_index: id.truth.family,
        params: id.truth.params.clone(),
    };
    let master = st.seed(tags::IDENTIFY, 0);
    let table = ident::bound_check(&spec, &truth, id.n_traces, id.k_max, id.k_burn, master)?;
    st.csv("constants_report.csv", |w| table.constants.write_csv(w))?;
    st.csv("concentration.csv", |w| ident::write_traces_csv(&table.traces, w))?;
    st.csv("ident_bound.csv", |w| table.write_csv(w))?;
    st.check(
        "chain_rule",
        table.max_chain_rule_error <= 1e-9,
        format!("max error {}", table.max_chain_rule_error),
    );
    st.check(
        "bayes_rule",
        table.max_bayes_rule_error <= 1e-10,
        format!("max error {}", table.max_bayes_rule_error),
    );
    let last = &table.rows[id.k_max];
    st.check(
        "bound_at_k_max",
        last.holds,
        format!("wrong mass {} vs bound {}", last.wrong_mass.mean, last.theory),
    );
    if !table.constants.wrong.is_empty() {
        st.check(
            "exponential_trend",
            table.spearman <= -0.9,
            format!("spearman {}", table.spearman),
        );
    }

    // Drift at posterior states along one context stream from the truth.
    let prompt = taskgen::sample_prompt_split(
        &spec,
        &truth,
        &mut icl_bayes_core::rng::stream(master, icl_bayes_core::rng::tags::INPUT, u64::MAX),
        &mut icl_bayes_core::rng::stream(master, icl_bayes_core::rng::tags::NOISE, u64::MAX),
    );
    let mut drift_rows = Vec::new();
    let mut drift_ok = true;
    for &k in &id.drift_prefixes {
        let state = MixturePosterior::<f64>::from_prompt(&spec, &prompt, k)?;
        for r in ident::drift_check(&spec, truth.family_index, &state, id.drift_n_mc, master, k as u64) {
            drift_ok &= r.within_tol;
            drift_rows.push(vec![
                k.to_string(),
                r.j.to_string(),
                r.mc_mean_z.mean.to_string(),
                r.mc_mean_z.se.to_string(),
                r.neg_kl.mean.to_string(),
                r.diff.mean.to_string(),
                r.diff.se.to_string(),
                r.within_tol.to_string(),
            ]);
        }
    }
    st.csv("drift.csv", |w| {
        write_estimates(
            w,
            &["k", "j", "mean_Z", "mean_Z_se", "neg_kl", "diff", "diff_se", "within_tol"],
            drift_rows,
        )
    })?;
    st.check("drift_equals_neg_kl", drift_ok, format!("{} prefixes", id.drift_prefixes.len()));

    let mut gap_rows = Vec::new();
    for &k in &id.pv_gap_ks {
        let g = ident::pv_gap_check(&spec, truth.family_index, k, id.pv_gap_n_mc, derive_seed(master, tags::IDENTIFY, k as u64))?;
        st.check(format!("pv_gap_k{k}"), g.holds, format!("diff {} (se {})", g.diff.mean, g.diff.se));
        gap_rows.push(vec![
            k.to_string(),
            g.mixture_pv.mean.to_string(),
            g.single_family_pv.mean.to_string(),
            g.ident_term.mean.to_string(),
            g.diff.mean.to_string(),
            g.diff.se.to_string(),
            g.holds.to_string(),
        ]);
    }
    st.csv("pv_gap.csv", |w| {
        write_estimates(
            w,
            &["k", "mixture_pv", "single_family_pv", "ident_term", "diff", "diff_se", "holds"],
            gap_rows,
        )
    })
}

/// Per-`k` Hölder estimates of the Bayes predictor under `spec`.
fn holder_constants(spec: &MixtureSpec, pairs: usize, scale: f64, alpha: f64, master: u64) -> icl_bayes_core::Result<Vec<f64>> {
    (1..=spec.p)
        .map(|k| ood::estimate_holder_l(spec, k, pairs, scale, alpha, derive_seed(master, tags::OOD, k as u64)).map(|e| e.l_hat))
        .collect()
}

fn oodcheck(st: &mut Step) -> Result<(), CliError> {
    let cfg = st.cfg;
    let o = &cfg.ood;
    let spec = cfg.ood_mixture();
    let params = trained_model(st)?;
    let sr = params.spectral_report(cfg.train.arch.c_phi, cfg.train.arch.c_rho);
    let b_m = params.b_m;
    let model = TransformerPredictor::new(params, "trained");
    let master = st.seed(tags::OOD, 0);
    let l_hat = holder_constants(&spec, o.holder_pairs, o.holder_scale, o.alpha, master)?;
    st.csv("holder.csv", |w| {
        write_estimates(
            w,
            &["k", "L_hat"],
            l_hat.iter().enumerate().map(|(k, l)| vec![(k + 1).to_string(), l.to_string()]),
        )
    })?;
    let (diam_u, diam_c) = ShiftSpec::diameters(&spec);
    let targets = std::iter::once(spec.input.clone()).chain(o.targets.iter().cloned());
    let mut reports = Vec::new();
    for t in targets {
        let shift = ShiftSpec {
            target: t,
            alpha: o.alpha,
            holder_l_hat: l_hat.clone(),
            lip_f_hat: ood::lip_f_bound(&spec),
            diam_u,
            diam_c,
        };
        reports.push(ood::ood_bound_check(&model, &spec, &sr, b_m, &shift, o.n_mc, master, o.share_noise)?);
    }
    st.csv("ood_report.csv", |w| ood::write_ood_csv(&reports, w))?;
    let control = &reports[0];
    st.check(
        "control_gap_zero",
        control.gap.within(0.0, 3.0),
        format!("gap {} (se {})", control.gap.mean, control.gap.se),
    );
    for (i, r) in reports.iter().enumerate().skip(1) {
        st.check(
            format!("stability_target{}", i - 1),
            r.holds,
            format!("gap {} <= rhs {}", r.measured_gap, r.theory_rhs),
        );
    }
    let shifted: Vec<_> = reports.iter().skip(1).filter(|r| r.w1_input > 0.0).collect();
    if shifted.len() >= 2 {
        let unit = shifted[0].theory_rhs / shifted[0].w1_input;
        let linear = shifted
            .iter()
            .all(|r| (r.theory_rhs / r.w1_input - unit).abs() <= 1e-9 * unit.abs());
        st.check("rhs_linear_in_shift", linear, format!("rhs per unit distance {unit}"));
    }
    Ok(())
}

fn approx(st: &mut Step) -> Result<(), CliError> {
    let cfg = st.cfg;
    let h = &cfg.histo;
    let spec = &cfg.mixture;
    let master = st.seed(tags::APPROX, 0);
    let est = ood::estimate_holder_l(spec, h.k, h.holder_pairs, cfg.ood.holder_scale, h.alpha, master)?;
    let set = SweepSettings {
        k: h.k,
        m_list: h.m_list.clone(),
        n_mc: h.n_mc,
        n_queries: h.n_queries,
        y_max: h.y_max,
        alpha: h.alpha,
        l_holder: est.l_hat,
    };
    let rows = histo::approx_error_sweep(spec, &set, master)?;
    st.csv("approx_sweep.csv", |w| histo::write_sweep_csv(&rows, w))?;
    let monotone = rows.windows(2).all(|w| w[1].sup_error <= 1.1 * w[0].sup_error);
    st.check(
        "sup_error_non_increasing",
        monotone,
        rows.iter().map(|r| format!("m={}: {}", r.m, r.sup_error)).collect::<Vec<_>>().join(", "),
    );
    let lattice = rows.iter().map(|r| r.lattice_error).fold(0.0, f64::max);
    st.check("lattice_exact", lattice == 0.0, format!("max lattice error {lattice}"));
    Ok(())
}

/// Median of the per-seed estimates and the estimate attaining it.
pub fn median_estimate(v: &[Estimate]) -> Estimate {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    s[(s.len() - 1) / 2]
}

fn sweep(st: &mut Step) -> Result<(), CliError> {
    let cfg = st.cfg;
    let sw = &cfg.sweep;
    let spec = &cfg.mixture;
    let grid: Vec<(usize, usize)> = sw.n_list.iter().map(|&n| (spec.p, n)).collect();
    let seeds: Vec<u64> = sw.seeds.iter().map(|&s| st.seed(tags::SWEEP, s)).collect();
    let rows = trainer::sweep_pn(spec, &grid, &seeds, &cfg.train, sw.n_mc, st.seed(tags::SWEEP, u64::MAX))?;
    st.csv("pretrain_sweep.csv", |w| trainer::write_sweep_csv(&rows, w))?;
    let medians: Vec<Estimate> = sw
        .n_list
        .iter()
        .map(|&n| median_estimate(&rows.iter().filter(|r| r.n == n).map(|r| r.r_bg).collect::<Vec<_>>()))
        .collect();
    let ok = medians
        .windows(2)
        .all(|w| w[1].mean <= w[0].mean + 2.0 * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt());
    st.check(
        "r_bg_non_increasing_in_n",
        ok,
        medians.iter().map(|m| m.mean.to_string()).collect::<Vec<_>>().join(" "),
    );
    Ok(())
}
