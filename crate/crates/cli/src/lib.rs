//! Configuration-driven front end: every run is described by one file and
//! produces JSON or CSV artifacts stamped with the hash of that file's
//! resolved contents.

pub mod commands;
pub mod config;
pub mod output;

use std::io::Write;
use std::path::PathBuf;

use serde_json::json;

use crate::commands::{execute, Command};
use crate::config::{ConfigError, Format, RunConfig};
use crate::output::{render, Rendered};

/// Why a run failed; decides the exit status.
#[derive(Debug)]
pub enum Failure {
    /// Unparseable or invalid configuration (exit status 2).
    Config(ConfigError),
    /// Anything that goes wrong once the run has started (exit status 1).
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    /// Machine-readable error report.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Failure::Config(e) => json!({ "error": "config", "key": e.key, "message": e.message }),
            Failure::Runtime(e) => json!({ "error": "runtime", "message": format!("{e:#}") }),
        }
    }
}

/// Command-line options after parsing.
#[derive(Clone, Debug)]
pub struct Options {
    pub command: Command,
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

/// Load the configuration and apply command-line overrides.
pub fn resolve(opts: &Options) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.output.dir = Some(out.display().to_string());
    }
    if let Some(format) = opts.format {
        cfg.output.format = format;
    }
    Ok(cfg)
}

/// Run one command; return the rendered files, primary output first.
pub fn run_config(command: Command, cfg: &RunConfig, workers: Option<usize>) -> Result<Vec<Rendered>, Failure> {
    if workers == Some(0) {
        return Err(ConfigError::new("--workers", "must be at least 1").into());
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Failure::Runtime(e.into()))?;
    let artifact = pool.install(|| execute(command, cfg))?;
    render(&artifact, cfg, cfg.output.format).map_err(Failure::Runtime)
}

/// Full run: write artifacts to the output directory, or the primary one to `stdout`.
pub fn run(opts: &Options, stdout: &mut dyn Write) -> Result<Vec<PathBuf>, Failure> {
    let cfg = resolve(opts)?;
    let files = run_config(opts.command, &cfg, opts.workers)?;
    let io = |e: std::io::Error| Failure::Runtime(e.into());
    match &cfg.output.dir {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            std::fs::create_dir_all(&dir).map_err(io)?;
            let mut written = Vec::with_capacity(files.len());
            for f in files {
                let path = dir.join(&f.name);
                std::fs::write(&path, &f.body).map_err(io)?;
                written.push(path);
            }
            Ok(written)
        }
        None => {
            stdout.write_all(&files[0].body).map_err(io)?;
            Ok(Vec::new())
        }
    }
}
