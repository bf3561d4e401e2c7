//! Command line interface.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use moco_core::srr::RegularizerKind;

use crate::commands;
use crate::config::{Method, PipelineConfig, PRESETS};
use crate::error::{PipelineError, Result};

#[derive(Debug, Parser)]
#[command(name = "moco", version, about = "Slice-to-volume motion correction and evaluation of 4D series")]
pub struct Cli {
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// start from a named configuration instead of the defaults
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    pub preset: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,
    /// regularizer: tk1, tv or huber
    #[arg(long, global = true, value_parser = commands::parse_kind)]
    pub reg: Option<RegularizerKind>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// worker threads; outputs do not depend on it
    #[arg(long, global = true, env = "MOCO_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// 4D input series (NIfTI-1)
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// brain mask on the series grid (NIfTI-1)
    #[arg(long, global = true)]
    pub mask: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// simulate a moving phantom series with ground truth
    Simulate,
    /// build the high-resolution reference volume
    BuildRef,
    /// motion-correct the series with the configured method
    Correct,
    /// compute quality, motion and connectivity metrics
    Evaluate,
    /// residual against penalty over a range of regularization weights
    Lcurve,
    /// aggregate evaluated runs into a summary table
    Report,
    /// print the resolved configuration as JSON
    PrintConfig,
}

impl Cli {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => return Err(PipelineError::Usage("--config and --preset are exclusive".into())),
            (Some(p), None) => PipelineConfig::load(p)?,
            (None, Some(name)) => PipelineConfig::preset(name)?,
            (None, None) => PipelineConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(k) = self.reg {
            cfg.regularizer.kind = k;
        }
        if let Some(a) = self.alpha {
            cfg.regularizer.alpha = a;
        }
        if let Some(g) = self.gamma {
            cfg.regularizer.gamma = g;
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(i) = &self.input {
            cfg.input = Some(i.clone());
        }
        if let Some(m) = &self.mask {
            cfg.mask = Some(m.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn execute(command: Command, cfg: &PipelineConfig) -> Result<()> {
    let work = || match command {
        Command::Simulate => commands::simulate(cfg).map(|_| ()),
        Command::BuildRef => commands::build_ref(cfg).map(|_| ()),
        Command::Correct => commands::correct(cfg),
        Command::Evaluate => commands::evaluate(cfg),
        Command::Lcurve => commands::lcurve(cfg),
        Command::Report => commands::report(cfg),
        Command::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(cfg).map_err(moco_core::Error::from)?);
            Ok(())
        }
    };
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| PipelineError::Usage(format!("cannot start {n} workers: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Parse `args`, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = cli.resolve().and_then(|cfg| execute(cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
