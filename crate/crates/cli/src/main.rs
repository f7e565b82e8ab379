use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand as ClapSubcommand};

use icl_bayes_lab::{run, CliError, ExperimentConfig, Subcommand};

#[derive(Parser)]
#[command(name = "icl-bayes-lab", version, about = "Runs the in-context Bayes laboratories from a TOML config")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a dotted config key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Replace the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Exit with status 3 when any acceptance check fails.
    #[arg(long, global = true)]
    check: bool,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Dump sample prompts.
    Generate,
    /// Pretrain the transformer and store a checkpoint.
    Train,
    /// Risk decomposition, Bayes optimality, PV curve and minimax dominance.
    Decompose,
    /// Posterior concentration on the true family.
    Identify,
    /// Bayes-gap stability under input shift.
    Oodcheck,
    /// Soft-histogram / McShane approximation sweep.
    Approx,
    /// Pretraining-size sweep.
    Sweep,
    /// Every laboratory in order.
    All,
    /// Print config diagnostics without running anything.
    Validate,
    /// Print the shipped default config.
    DefaultConfig,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Parse("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path, &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    let sub = match cli.command {
        Command::DefaultConfig => {
            print!("{}", icl_bayes_lab::config::DEFAULT_CONFIG);
            return Ok(());
        }
        Command::Validate => {
            let diags = load(&cli)?.validate();
            if diags.is_empty() {
                println!("config ok");
                return Ok(());
            }
            return Err(CliError::Invalid(diags));
        }
        Command::Generate => Subcommand::Generate,
        Command::Train => Subcommand::Train,
        Command::Decompose => Subcommand::Decompose,
        Command::Identify => Subcommand::Identify,
        Command::Oodcheck => Subcommand::Oodcheck,
        Command::Approx => Subcommand::Approx,
        Command::Sweep => Subcommand::Sweep,
        Command::All => Subcommand::All,
    };
    let cfg = load(&cli)?;
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Parse(format!("--workers: {e}")))?;
    }
    let manifest = run(sub, &cfg)?;
    for step in &manifest.steps {
        for c in &step.checks {
            println!("[{}] {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, step.subcommand, c.name, c.detail);
        }
    }
    println!("outputs in {}", cfg.output_dir.display());
    if cli.check && !manifest.passed {
        return Err(CliError::CheckFailed(manifest.failed_checks()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
