use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shell `{shell}`: {reason}")]
    InvalidShell { shell: String, reason: String },

    #[error(
        "shell `{shell}` declares {declared} satellites but {planes} planes x {per_plane} per plane = {}",
        planes * per_plane
    )]
    ShellTotalMismatch {
        shell: String,
        declared: u32,
        planes: u32,
        per_plane: u32,
    },

    #[error("invalid cell grid: {0}")]
    InvalidGrid(String),

    #[error("population file {path}: expected {expected} rows, found {found}")]
    PopulationRowCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("population file {path}: {reason}")]
    PopulationFile { path: PathBuf, reason: String },

    #[error("link below the horizon (elevation {elevation_deg} deg) has no rain slant path")]
    BelowHorizon { elevation_deg: f64 },

    #[error("shell `{shell}` does not take part in sensing")]
    NotSensingShell { shell: String },

    #[error("frame budget exhausted: N_T = {total} but sensing uses {sensing} and feedback {feedback} OFDMA frames")]
    FrameBudget { total: u32, sensing: u32, feedback: u32 },

    #[error("invalid frame timing: {0}")]
    FrameTiming(String),

    #[error("config error{}: {message}", location(.key, .line))]
    Config {
        key: Option<String>,
        line: Option<usize>,
        message: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn location(key: &Option<String>, line: &Option<usize>) -> String {
    match (key, line) {
        (Some(k), Some(l)) => format!(" at `{k}` (line {l})"),
        (Some(k), None) => format!(" at `{k}`"),
        (None, Some(l)) => format!(" (line {l})"),
        (None, None) => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
