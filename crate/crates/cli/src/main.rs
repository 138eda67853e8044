//! `imcsim`: compile, simulate, fine-tune and cost in-memory compute pipelines.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod data;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use imc_core::f64::Config;

use crate::output::Out;

#[derive(Debug, Parser)]
#[command(name = "imcsim", version, about = "Noise-aware crossbar + analog CAM simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config; built-in defaults otherwise.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Multiplies every noise sigma; 0 switches noise off.
    #[arg(long, global = true, value_name = "X")]
    pub noise_scale: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Compile a built-in function into per-bit decision trees and an ACAM image.
    CompileFn(commands::compile::CompileArgs),
    /// Run a pipeline against its float oracle.
    Simulate(commands::simulate::SimulateArgs),
    /// Noise-aware fine-tuning of a function's ACAM thresholds.
    Naf(commands::naf::NafArgs),
    /// Inject stuck-at faults and evaluate mitigation.
    Faults(commands::faults::FaultsArgs),
    /// Event ledger, energy breakdown and error statistics for a pipeline.
    Report(commands::simulate::SimulateArgs),
    /// Per-bit row counts for every built-in function and encoding.
    Table1(commands::table1::Table1Args),
}

fn load_config(g: &Global) -> Result<Config> {
    let mut cfg: Config = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| imc_core::Error::Config(e.to_string()))?
        }
        None => Config::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(x) = g.noise_scale {
        cfg.noise = cfg.noise.with_scale(x);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("building thread pool")?;
    }
    let cfg = load_config(&cli.global)?;
    let out = Out::create(&cli.global.out)?;
    match cli.cmd {
        Cmd::CompileFn(a) => commands::compile::run(&cfg, &a, &out),
        Cmd::Simulate(a) => commands::simulate::run(&cfg, &a, &out),
        Cmd::Naf(a) => commands::naf::run(&cfg, &a, cli.global.noise_scale, &out),
        Cmd::Faults(a) => commands::faults::run(&cfg, &a, &out),
        Cmd::Report(a) => commands::simulate::report(&cfg, &a, &out),
        Cmd::Table1(a) => commands::table1::run(&cfg, &a, &out),
    }
}

fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string().trim_end()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.downcast_ref::<imc_core::Error>() {
                Some(ie) => ie.kind(),
                None if e.downcast_ref::<std::io::Error>().is_some() => "io",
                None => "runtime",
            };
            eprintln!("{}", error_json(kind, &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
