//! Experiment configuration: one TOML file with a block per laboratory,
//! dotted-key overrides, and validation into keyed diagnostics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use icl_bayes_core::taskgen::{Diagnostic, InputDistSpec, MixtureSpec};
use icl_bayes_core::trainer::TrainConfig;

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

/// The shipped default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    /// Master seed; every stream in a run derives from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub generate: GenerateBlock,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub risk: RiskBlock,
    #[serde(default)]
    pub ident: IdentBlock,
    #[serde(default)]
    pub ood: OodBlock,
    #[serde(default)]
    pub histo: HistoBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateBlock {
    /// Prompts written by `generate`.
    pub n_prompts: usize,
}

impl Default for GenerateBlock {
    fn default() -> Self {
        Self { n_prompts: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskBlock {
    pub n_mc: usize,
    /// Evaluation stream indices; one report per seed and predictor.
    pub seeds: Vec<u64>,
    /// Largest `k` on the posterior-variance curve.
    pub pv_k_max: usize,
    /// Context length of the minimax dominance check.
    pub dominance_k: usize,
    pub dominance_grid: usize,
}

impl Default for RiskBlock {
    fn default() -> Self {
        Self {
            n_mc: 10_000,
            seeds: vec![0],
            pv_k_max: 8,
            dominance_k: 4,
            dominance_grid: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthBlock {
    pub family: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentBlock {
    pub k_max: usize,
    pub n_traces: usize,
    pub k_burn: usize,
    pub truth: TruthBlock,
    /// Context lengths at which the drift is compared with `−KL`.
    pub drift_prefixes: Vec<usize>,
    pub drift_n_mc: usize,
    pub pv_gap_ks: Vec<usize>,
    pub pv_gap_n_mc: usize,
}

impl Default for IdentBlock {
    fn default() -> Self {
        Self {
            k_max: 32,
            n_traces: 500,
            k_burn: icl_bayes_core::ident::DEFAULT_K_BURN,
            truth: TruthBlock {
                family: 0,
                params: vec![1.0, 0.0],
            },
            drift_prefixes: vec![0, 1, 2, 3, 4, 6, 8, 12, 16, 24],
            drift_n_mc: 100_000,
            pv_gap_ks: vec![2, 8],
            pv_gap_n_mc: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodBlock {
    /// Hull containing the source and every target box.
    pub support: Option<InputDistSpec>,
    pub targets: Vec<InputDistSpec>,
    pub alpha: f64,
    pub holder_pairs: usize,
    pub holder_scale: f64,
    pub n_mc: usize,
    pub share_noise: bool,
}

impl Default for OodBlock {
    fn default() -> Self {
        Self {
            support: None,
            targets: Vec::new(),
            alpha: 1.0,
            holder_pairs: 500,
            holder_scale: 0.05,
            n_mc: 4000,
            share_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistoBlock {
    pub k: usize,
    pub m_list: Vec<usize>,
    pub n_mc: usize,
    pub n_queries: usize,
    pub y_max: f64,
    pub alpha: f64,
    pub holder_pairs: usize,
}

impl Default for HistoBlock {
    fn default() -> Self {
        Self {
            k: 3,
            m_list: vec![4, 9, 16, 25],
            n_mc: 100,
            n_queries: 8,
            y_max: 2.0,
            alpha: 1.0,
            holder_pairs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    pub n_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_mc: usize,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            n_list: vec![250, 1000, 4000],
            seeds: vec![1, 2, 3],
            n_mc: 2000,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, applies `key=value` overrides and deserializes.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.into_inner().message().to_string();
            if path == "." {
                CliError::Parse(msg)
            } else {
                CliError::Parse(format!("{path}: {msg}"))
            }
        })
    }

    /// Canonical serialization; parsing it back yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization with `output_dir` cleared,
    /// hex encoded. Runs that differ only in where they write share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Sha256::digest(c.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Mixture used by the input-shift laboratory: the configured support
    /// replaces the hull.
    pub fn ood_mixture(&self) -> MixtureSpec {
        let mut m = self.mixture.clone();
        if let Some(s) = &self.ood.support {
            m.support = Some(s.clone());
        }
        m
    }

    /// Every problem that would stop a run, keyed by config path.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.format_version != FORMAT_VERSION {
            out.push(Diagnostic::new(
                "format_version",
                format!("unsupported version {} (expected {FORMAT_VERSION})", self.format_version),
            ));
        }
        // TOML integers are signed, so larger seeds could not be echoed back.
        let seeds = [("seed", self.seed), ("train.seed", self.train.seed)]
            .into_iter()
            .chain(self.risk.seeds.iter().map(|&s| ("risk.seeds", s)))
            .chain(self.sweep.seeds.iter().map(|&s| ("sweep.seeds", s)));
        for (key, s) in seeds {
            if s > i64::MAX as u64 {
                out.push(Diagnostic::new(key, format!("{s} exceeds the largest TOML integer {}", i64::MAX)));
            }
        }
        out.extend(self.mixture.validate_at("mixture"));
        out.extend(self.train.validate_at("train"));
        let positive = |out: &mut Vec<Diagnostic>, key: &str, v: usize| {
            if v == 0 {
                out.push(Diagnostic::new(key, "must be positive"));
            }
        };
        positive(&mut out, "generate.n_prompts", self.generate.n_prompts);
        positive(&mut out, "risk.n_mc", self.risk.n_mc);
        if self.risk.seeds.is_empty() {
            out.push(Diagnostic::new("risk.seeds", "needs at least one seed"));
        }
        if self.risk.pv_k_max > self.mixture.p {
            out.push(Diagnostic::new("risk.pv_k_max", "exceeds mixture.p"));
        }
        if self.risk.dominance_k > self.mixture.p {
            out.push(Diagnostic::new("risk.dominance_k", "exceeds mixture.p"));
        }
        positive(&mut out, "risk.dominance_grid", self.risk.dominance_grid);

        let id = &self.ident;
        positive(&mut out, "ident.k_max", id.k_max);
        positive(&mut out, "ident.n_traces", id.n_traces);
        if id.k_burn > id.k_max {
            out.push(Diagnostic::new("ident.k_burn", "exceeds ident.k_max"));
        }
        match self.mixture.families.get(id.truth.family) {
            None => out.push(Diagnostic::new("ident.truth.family", "no such mixture family")),
            Some(f) => {
                let dim = f.dim(self.mixture.d_feat());
                if id.truth.params.len() != dim {
                    out.push(Diagnostic::new(
                        "ident.truth.params",
                        format!("expected {dim} parameters for a {} family", f.name()),
                    ));
                }
            }
        }
        for (i, &k) in id.pv_gap_ks.iter().enumerate() {
            if k > id.k_max {
                out.push(Diagnostic::new(format!("ident.pv_gap_ks.{i}"), "exceeds ident.k_max"));
            }
        }
        for (i, &k) in id.drift_prefixes.iter().enumerate() {
            if k > id.k_max {
                out.push(Diagnostic::new(format!("ident.drift_prefixes.{i}"), "exceeds ident.k_max"));
            }
        }

        let ood = &self.ood;
        if !(ood.alpha > 0.0 && ood.alpha <= 1.0) {
            out.push(Diagnostic::new("ood.alpha", "must lie in (0, 1]"));
        }
        positive(&mut out, "ood.n_mc", ood.n_mc);
        positive(&mut out, "ood.holder_pairs", ood.holder_pairs);
        let hull = self.ood_mixture().hull().clone();
        if let Some(s) = &ood.support {
            if !self.mixture.input.inside(s) {
                out.push(Diagnostic::new("ood.support", "must contain mixture.input"));
            }
        }
        for (i, t) in ood.targets.iter().enumerate() {
            if t.d_feat() != self.mixture.d_feat() {
                out.push(Diagnostic::new(format!("ood.targets.{i}"), "dimension differs from mixture.input"));
            } else if !t.inside(&hull) {
                out.push(Diagnostic::new(
                    format!("ood.targets.{i}"),
                    "target box must lie inside the support hull (set ood.support)",
                ));
            }
        }

        let h = &self.histo;
        if h.k == 0 || h.k > self.mixture.p {
            out.push(Diagnostic::new("histo.k", "must lie in 1..=mixture.p"));
        }
        if h.m_list.is_empty() {
            out.push(Diagnostic::new("histo.m_list", "needs at least one grid size"));
        }
        for (i, &m) in h.m_list.iter().enumerate() {
            let r = (m as f64).sqrt().round() as usize;
            if m < 4 || r * r != m {
                out.push(Diagnostic::new(
                    format!("histo.m_list.{i}"),
                    "must be a perfect square of at least 4 (two-dimensional grid)",
                ));
            }
        }
        positive(&mut out, "histo.n_mc", h.n_mc);
        positive(&mut out, "histo.n_queries", h.n_queries);
        if !(h.y_max > 0.0) {
            out.push(Diagnostic::new("histo.y_max", "must be positive"));
        }
        if !(h.alpha > 0.0 && h.alpha <= 1.0) {
            out.push(Diagnostic::new("histo.alpha", "must lie in (0, 1]"));
        }

        if self.sweep.n_list.is_empty() || self.sweep.n_list.contains(&0) {
            out.push(Diagnostic::new("sweep.n_list", "needs positive pretraining set sizes"));
        } else if self.sweep.n_list.windows(2).any(|w| w[1] <= w[0]) {
            out.push(Diagnostic::new("sweep.n_list", "must be strictly increasing"));
        }
        if self.sweep.seeds.is_empty() {
            out.push(Diagnostic::new("sweep.seeds", "needs at least one seed"));
        }
        positive(&mut out, "sweep.n_mc", self.sweep.n_mc);
        out
    }
}

/// Sets a dotted key (`train.steps`, `mixture.families.1.tau`) to a TOML
/// literal; bare words that do not parse are taken as strings.
pub fn apply_override(table: &mut Table, raw: &str) -> Result<(), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Override(raw.to_string(), "expected key=value".into()))?;
    let key = key.trim();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Override(key.to_string(), "empty path segment".into()));
    }
    set_table(table, &parts, parsed).map_err(|m| CliError::Override(key.to_string(), m))
}

fn set_table(t: &mut Table, path: &[&str], v: Value) -> Result<(), String> {
    let (head, rest) = (path[0], &path[1..]);
    if rest.is_empty() {
        t.insert(head.to_string(), v);
        return Ok(());
    }
    let slot = t.entry(head.to_string()).or_insert_with(|| Value::Table(Table::new()));
    set_value(slot, head, rest, v)
}

fn set_value(slot: &mut Value, name: &str, path: &[&str], v: Value) -> Result<(), String> {
    match slot {
        Value::Table(t) => set_table(t, path, v),
        Value::Array(a) => {
            let idx: usize = path[0].parse().map_err(|_| format!("`{}` is not an array index", path[0]))?;
            let len = a.len();
            let item = a.get_mut(idx).ok_or_else(|| format!("index {idx} out of range (length {len})"))?;
            if path.len() == 1 {
                *item = v;
                Ok(())
            } else {
                set_value(item, path[0], &path[1..], v)
            }
        }
        _ => Err(format!("`{name}` is not a table")),
    }
}
