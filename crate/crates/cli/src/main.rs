//! `uql`: command-line front end for the experiment harness.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, config, model
//! spec), 2 failure while running. `UQL_THREADS` caps the worker pool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uql::harness::{self, ExperimentConfig, RunOutput};
use uql::Error;

#[derive(Parser)]
#[command(name = "uql", version, about = "Uncertainty experiments on the synthetic multi-generator benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides any config key, e.g. `--set n=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the benchmark as PPM images plus labels.csv under <out>/data.
    GenData(Common),
    /// Train the deterministic detector of every setting.
    Train(Common),
    /// Convert trained detectors to Bayesian ones and fine-tune them.
    Convert(Common),
    /// Evaluate saved detectors and write per-sample reports.
    Eval(Common),
    /// Retention curves and uncertainty histograms from saved reports.
    Retention(Common),
    /// Leave-one-generator-out runs.
    Loo(Common),
    /// Source attribution over real plus every generator.
    Source(Common),
    /// One run per value of an ablation axis.
    Ablate(Common),
    /// FGSM against the detectors of every generator.
    Attack(Common),
    /// Saliency, Bayesian saliency and uncertainty maps.
    Maps {
        #[command(flatten)]
        common: Common,
        /// Sample ids; defaults to the first `map_count` fake test samples.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<usize>,
    },
    /// Run whatever `task` the config names.
    Run(Common),
}

fn load(common: &Common) -> uql::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            e => e,
        })?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> uql::Result<()> {
    let Ok(raw) = std::env::var("UQL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("UQL_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

fn execute(command: Command) -> uql::Result<RunOutput> {
    configure_threads()?;
    match command {
        Command::GenData(c) => harness::run_gen_data(&load(&c)?),
        Command::Train(c) => harness::stage_train(&load(&c)?),
        Command::Convert(c) => harness::stage_convert(&load(&c)?),
        Command::Eval(c) => harness::stage_eval(&load(&c)?),
        Command::Retention(c) => harness::stage_retention(&load(&c)?),
        Command::Loo(c) => harness::run_loo(&load(&c)?),
        Command::Source(c) => harness::run_source_detection(&load(&c)?),
        Command::Ablate(c) => harness::run_ablation(&load(&c)?),
        Command::Attack(c) => harness::run_attack(&load(&c)?),
        Command::Maps { common, ids } => harness::run_maps(&load(&common)?, Some(&ids)),
        Command::Run(c) => harness::run(&load(&c)?),
    }
}

fn report(out: &RunOutput) {
    if !out.rows.is_empty() {
        println!("{:<22} {:<22} {:<5} {:>8} {:>8} {:>8}", "setting", "subset", "model", "acc", "pu", "mu");
        for r in &out.rows {
            println!(
                "{:<22} {:<22} {:<5} {:>8.2} {:>8.4} {:>8.4}",
                r.setting, r.subset, r.model, r.accuracy, r.pu, r.mu
            );
        }
    }
    let m = out.manifest();
    let seconds: f64 = m.phases.iter().map(|p| p.seconds).sum();
    println!("{}: {} files, {:.1}s", m.run, m.files.len(), seconds);
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            report(&out);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
