//! Batch front end: every subcommand reads a [`config::RunConfig`], writes
//! its artifacts under the output directory and leaves a `manifest.json`
//! there, also when it fails.

pub mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use pm_gmrf::io::write_atomic;
use pm_gmrf::{Error, Result};
use serde::Serialize;
use serde_json::Value;

use commands::Outputs;
use config::{parse_settings, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "pm-gmrf",
    version,
    about = "GMRF and LMM models for daily PM2.5 from satellite AOD"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Any configuration key; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub input: Option<String>,
    #[arg(long, global = true)]
    pub output: Option<String>,
    /// Comma list of lmm, gmrf.
    #[arg(long, global = true)]
    pub models: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    #[arg(long, global = true)]
    pub day: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Draw a synthetic panel (data.csv, truth.json).
    Simulate,
    /// Fit the models on the input panel (fit_<model>.json, trace_<model>.csv).
    Fit,
    /// Predict targets from saved fits (predictions_<model>.csv).
    Predict,
    /// Cross-validate (cv_table.csv, cv_folds.csv, cv_paired.csv, cv_report.json).
    Cv,
    /// RMSE against the exclusion radius (sweep.csv, sweep_summary.csv).
    Sweep,
    /// One day's latent precision in coordinate format with labels.
    ExportPrecision,
    /// One day's spatial intercept on a raster.
    ExportSurface,
}

impl Cli {
    fn overrides(&self) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        for (k, v) in [
            ("input", &self.input),
            ("output", &self.output),
            ("models", &self.models),
            ("seed", &self.seed),
            ("day", &self.day),
        ] {
            if let Some(v) = v {
                map.insert(k.to_string(), v.clone());
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Serialize)]
struct ErrorRecord {
    kind: String,
    message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        ErrorRecord {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: Command,
    status: &'static str,
    error: Option<ErrorRecord>,
    config: Option<RunConfig>,
    settings: BTreeMap<String, String>,
    versions: BTreeMap<&'static str, String>,
    seed: Option<u64>,
    wall_time_seconds: f64,
    outputs: Vec<String>,
    summary: Value,
}

fn versions() -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("pm-gmrf-cli", env!("CARGO_PKG_VERSION").to_string()),
        ("pm-gmrf", pm_gmrf::VERSION.to_string()),
        ("parallel", pm_gmrf::par::enabled().to_string()),
    ])
}

/// Best guess at the output directory when the configuration is invalid.
fn fallback_output(cli: &Cli) -> PathBuf {
    if let Some(o) = &cli.output {
        return o.into();
    }
    if let Some(kv) = cli.set.iter().rev().find_map(|kv| kv.strip_prefix("output=")) {
        return kv.trim().into();
    }
    cli.config
        .as_ref()
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| parse_settings(&t).ok())
        .and_then(|m| m.get("output").cloned())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn dispatch(command: Command, cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    match command {
        Command::Simulate => commands::simulate_cmd(cfg, out),
        Command::Fit => commands::fit_cmd(cfg, out),
        Command::Predict => commands::predict_cmd(cfg, out),
        Command::Cv => commands::cv_cmd(cfg, out),
        Command::Sweep => commands::sweep_cmd(cfg, out),
        Command::ExportPrecision => commands::export_precision_cmd(cfg, out),
        Command::ExportSurface => commands::export_surface_cmd(cfg, out),
    }
}

/// Runs one command and writes the manifest; returns the first error.
pub fn execute(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let loaded = cli.overrides().and_then(|o| RunConfig::load(cli.config.as_deref(), &o));
    let (cfg, settings, load_error) = match loaded {
        Ok((c, s)) => (Some(c), s, None),
        Err(e) => (None, BTreeMap::new(), Some(e)),
    };
    let output = cfg
        .as_ref()
        .map(|c| c.output.clone())
        .unwrap_or_else(|| fallback_output(cli));
    let mut out = Outputs::new(&output)?;
    let result = match (load_error, &cfg) {
        (Some(e), _) => Err(e),
        (None, Some(c)) => dispatch(cli.command, c, &mut out),
        (None, None) => Err(Error::Config("no configuration".into())),
    };
    let manifest = Manifest {
        command: cli.command,
        status: if result.is_ok() { "ok" } else { "error" },
        error: result.as_ref().err().map(ErrorRecord::from),
        seed: cfg.as_ref().map(|c| c.seed),
        config: cfg,
        settings,
        versions: versions(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        outputs: out.files.clone(),
        summary: result.as_ref().ok().cloned().unwrap_or(Value::Null),
    };
    write_atomic(
        &output.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    result.map(|_| ())
}
