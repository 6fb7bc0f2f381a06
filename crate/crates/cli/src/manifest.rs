use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::args::Cli;
use crate::files::sibling;

/// Provenance record written next to every artifact a run produces.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub subcommand: &'a str,
    pub version: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub config: &'a Cli,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_at_unix: u64,
    pub wall_clock_seconds: f64,
}

impl<'a> RunManifest<'a> {
    pub fn new(subcommand: &'a str, config: &'a Cli) -> Self {
        Self {
            subcommand,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.global.seed,
            threads: config.global.threads,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn path_for(primary: &Path) -> PathBuf {
        sibling(primary, "manifest.json")
    }
}
