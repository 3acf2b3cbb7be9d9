//! Shared command plumbing: config loading, error-to-exit-code mapping,
//! and the handful of path helpers every subcommand needs.

pub mod calibrate;
pub mod evaluate;
pub mod gradcam;
pub mod infer;
pub mod preprocess;
pub mod synth;
pub mod train;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use birdsed::config::{ConfigError, PipelineConfig};

/// Command failure, split by exit code: usage and configuration problems
/// exit 2, everything that went wrong while doing the work exits 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    #[must_use]
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Domain(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Domain(msg) => f.write_str(msg),
        }
    }
}

/// Wraps a worker error as a domain failure (exit code 1).
pub fn domain<E: fmt::Display>(e: E) -> CliError {
    CliError::Domain(e.to_string())
}

/// Builds a usage failure (exit code 2).
pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Per-invocation state shared by all subcommands.
pub struct Context {
    pub config: PipelineConfig,
    seed_flag: Option<u64>,
    pub out: PathBuf,
}

impl Context {
    pub fn new(
        config_path: Option<&Path>,
        seed_flag: Option<u64>,
        out: PathBuf,
    ) -> Result<Self, CliError> {
        let config = match config_path {
            Some(path) => {
                require_exists(path, "config file")?;
                PipelineConfig::from_path(path)?
            }
            None => PipelineConfig::default(),
        };
        std::fs::create_dir_all(&out).map_err(|e| {
            usage(format!("cannot create output directory {}: {e}", out.display()))
        })?;
        Ok(Self {
            config,
            seed_flag,
            out,
        })
    }

    /// The effective base seed; the --seed flag beats the config file.
    pub fn seed(&self) -> Result<u64, CliError> {
        Ok(self.config.resolve_seed(self.seed_flag)?)
    }
}

/// Input paths must resolve before any work starts.
pub fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Sorted .wav files directly under a directory.
pub fn sorted_wavs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    require_exists(dir, "audio directory")?;
    birdsed::config::list_wavs(dir).map_err(domain)
}

/// File stem used as the recording id in prediction and truth tables.
pub fn recording_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
