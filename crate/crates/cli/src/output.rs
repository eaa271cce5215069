use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::{EXIT_CONFIG, EXIT_NUMERIC};

#[derive(Debug)]
pub enum CliError {
    Core(mfwsn::Error),
    Usage(String),
    Io(PathBuf, io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<mfwsn::Error> for CliError {
    fn from(e: mfwsn::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Resolved configuration and provenance of one run. Written next to the
/// output as `<out>.manifest.json`, so the data file itself stays
/// byte-identical across repeated runs.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize, S: Serialize> {
    pub subcommand: &'a str,
    pub tool_version: &'a str,
    pub config: &'a C,
    /// SHA-256 of the model file bytes.
    pub model_file_hash: Option<String>,
    /// Fingerprint of the compiled population model.
    pub model_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub tolerances: serde_json::Value,
    pub summary: S,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
}

pub struct Clock {
    start: Instant,
    unix: u64,
}

impl Clock {
    pub fn start() -> Self {
        Self {
            start: Instant::now(),
            unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn started_unix(&self) -> u64 {
        self.unix
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// Opens `--out` or stdout.
pub fn open_output(out: Option<&Path>) -> CliResult<Box<dyn Write>> {
    match out {
        Some(path) => {
            let file = File::create(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
            Ok(Box::new(BufWriter::new(file)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

pub fn csv_writer(out: Option<&Path>) -> CliResult<csv::Writer<Box<dyn Write>>> {
    Ok(csv::Writer::from_writer(open_output(out)?))
}

pub fn csv_error(out: Option<&Path>, e: csv::Error) -> CliError {
    let path = out.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf);
    CliError::Io(path, io::Error::other(e))
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Writes the manifest sidecar when the run has an output file.
pub fn write_manifest<C: Serialize, S: Serialize>(out: Option<&Path>, manifest: &Manifest<C, S>) -> CliResult<()> {
    let Some(out) = out else {
        return Ok(());
    };
    let path = manifest_path(out);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(path, e))
}
