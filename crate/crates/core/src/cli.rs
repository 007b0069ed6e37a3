//! Command-line entry point.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::error::{Error, Result};
use crate::event::MinMode;
use crate::io::{compare, load_config, write_run_files, write_summary, Summary, SummaryRow};
use crate::model::BoundVector;
use crate::sim::{run_batch, run_paired, Mode, NoiseConfig, SimConfig, SimOutput};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "OCBF_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Time,
    Event,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MinModeArg {
    Component,
    Joint,
}

#[derive(Debug, Parser)]
#[command(name = "ocbf", version, about = "Simulate CBF-controlled merging under time-driven and event-triggered updates")]
#[command(group = clap::ArgGroup::new("source").required(true).multiple(true).args(["config", "mode"]))]
pub struct Args {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Time-energy weight given directly, overriding alpha.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "s-x")]
    pub s_x: Option<f64>,
    #[arg(long = "s-v")]
    pub s_v: Option<f64>,
    /// First seed; run k uses seed + k.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    /// Vehicles per run.
    #[arg(long)]
    pub cavs: Option<usize>,
    /// Enable the default uniform disturbances.
    #[arg(long)]
    pub noise: bool,
    #[arg(long = "min-mode", value_enum)]
    pub min_mode: Option<MinModeArg>,
    /// Output directory; defaults to $OCBF_OUT_DIR, then `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Args {
    /// Config file (or defaults) with flag overrides applied.
    pub fn to_config(&self) -> Result<(SimConfig, ModeArg)> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => SimConfig::default(),
        };
        let mode = self.mode.unwrap_or(match cfg.mode {
            Mode::TimeDriven => ModeArg::Time,
            Mode::EventTriggered => ModeArg::Event,
        });
        if let Some(a) = self.alpha {
            cfg.alpha = a;
            cfg.beta = None;
        }
        if self.beta.is_some() {
            cfg.beta = self.beta;
        }
        cfg.s_default = BoundVector::new(
            self.s_x.unwrap_or(cfg.s_default.s_x),
            self.s_v.unwrap_or(cfg.s_default.s_v),
        );
        if let Some(s) = self.seed {
            cfg.rng_seed = s;
        }
        if let Some(n) = self.cavs {
            cfg.cav_count = n;
        }
        if self.noise && cfg.noise.is_none() {
            cfg.noise = Some(NoiseConfig::default());
        }
        if let Some(m) = self.min_mode {
            cfg.min_mode = match m {
                MinModeArg::Component => MinMode::Componentwise,
                MinModeArg::Joint => MinMode::Joint,
            };
        }
        if self.runs == 0 {
            return Err(Error::InvalidConfig("--runs must be at least 1".into()));
        }
        cfg.record_traces = true;
        cfg.validate()?;
        Ok((cfg, mode))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Runs everything first and writes files only when all runs succeeded.
pub fn execute(args: &Args) -> Result<Summary> {
    let (cfg, mode) = args.to_config()?;
    let seeds: Vec<u64> = (0..args.runs).map(|k| cfg.rng_seed.wrapping_add(k)).collect();
    let (outputs, comparison): (Vec<SimOutput>, _) = match mode {
        ModeArg::Both => {
            let pairs = run_paired(&cfg, &seeds)?;
            let c = compare(&pairs);
            let outs = pairs.into_iter().flat_map(|p| [p.time, p.event]).collect();
            (outs, Some(c))
        }
        ModeArg::Time | ModeArg::Event => {
            let cfg = SimConfig {
                mode: if mode == ModeArg::Time {
                    Mode::TimeDriven
                } else {
                    Mode::EventTriggered
                },
                ..cfg
            };
            let outs = run_batch(&cfg, &seeds).into_iter().collect::<Result<Vec<_>>>()?;
            (outs, None)
        }
    };
    let dir = args.out_dir();
    std::fs::create_dir_all(&dir)?;
    for o in &outputs {
        write_run_files(&dir, o)?;
    }
    let summary = Summary {
        runs: outputs.iter().map(SummaryRow::from).collect(),
        comparison,
    };
    write_summary(&dir, &summary)?;
    Ok(summary)
}

/// Parses `argv`, runs, and returns the process exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&args) {
        Ok(summary) => {
            if let Some(c) = &summary.comparison {
                print!("{}", crate::io::format_report(c));
            } else {
                println!("{} runs written to {}", summary.runs.len(), args.out_dir().display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
