//! Failures with exit codes, and atomic output.

use std::fmt::Display;
use std::io::Write;
use std::path::Path;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_BUDGET: u8 = 4;
pub const EXIT_CHECK: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Display) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }

    pub fn usage(message: impl Display) -> Self {
        Failure::new(EXIT_USAGE, message)
    }

    pub fn check(message: impl Display) -> Self {
        Failure::new(EXIT_CHECK, message)
    }

    /// Prefixes the message, e.g. with a file name.
    pub fn context(self, what: impl Display) -> Self {
        Failure {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl From<ctxbp::Error> for Failure {
    fn from(e: ctxbp::Error) -> Self {
        use ctxbp::Error::*;
        let code = match e {
            Infeasible => EXIT_INFEASIBLE,
            BudgetExceeded { .. } => EXIT_BUDGET,
            Invariant(_) | NotNormalized { .. } | PolicyFailure { .. } => EXIT_CHECK,
            _ => EXIT_USAGE,
        };
        Failure::new(code, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_OTHER, e)
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Writes `content` to `path` through a temporary file and rename, or to
/// standard output when no path is given.
pub fn emit(path: Option<&Path>, content: &str) -> CliResult {
    match path {
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(content.as_bytes())?;
            out.flush()?;
        }
        Some(path) => {
            let dir = match path.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(dir)
                .map_err(|e| Failure::from(e).context(dir.display()))?;
            tmp.write_all(content.as_bytes())?;
            tmp.flush()?;
            tmp.persist(path)
                .map_err(|e| Failure::from(e.error).context(path.display()))?;
        }
    }
    Ok(())
}

pub fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::from(e).context(path.display()))
}
