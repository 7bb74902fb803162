//! Subcommand implementations. Each returns `Ok(())` or a [`CliError`]
//! carrying the process exit code: 1 for check failures, 2 for numerical
//! aborts, 64 for usage errors.

pub mod analyze;
pub mod compare;
pub mod decay;
pub mod flops;
pub mod gradcheck;
pub mod rf;
pub mod train;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::args::Args;

pub const EXIT_CHECK_FAILURE: i32 = 1;
pub const EXIT_NUMERIC_ABORT: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CHECK_FAILURE,
            message: message.into(),
        }
    }
}

impl From<String> for CliError {
    fn from(message: String) -> Self {
        CliError::usage(message)
    }
}

impl From<evt_core::Error> for CliError {
    fn from(e: evt_core::Error) -> Self {
        let code = match e {
            evt_core::Error::Numeric { .. } => EXIT_NUMERIC_ABORT,
            _ => EXIT_CHECK_FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CmdResult = Result<(), CliError>;

/// Output directory: --out flag, then EVT_OUT_DIR, then ./evt-out.
pub fn resolve_out_dir(args: &Args) -> PathBuf {
    if let Some(dir) = args.get("out") {
        return PathBuf::from(dir);
    }
    if let Ok(dir) = std::env::var("EVT_OUT_DIR") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from("evt-out")
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::check(format!("cannot create {dir:?}: {e}")))
}

/// Line-oriented run manifest: the command, the seed, and every resolved
/// flag. No timestamps, so identical invocations are byte-identical.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    args: &Args,
    extra: &[(&str, String)],
) -> Result<(), CliError> {
    let mut text = String::new();
    let _ = writeln!(text, "command {command}");
    for (k, v) in args.entries() {
        let _ = writeln!(text, "flag.{k} {v}");
    }
    for (k, v) in extra {
        let _ = writeln!(text, "{k} {v}");
    }
    std::fs::write(dir.join("manifest.txt"), text)
        .map_err(|e| CliError::check(format!("cannot write manifest: {e}")))?;
    Ok(())
}

pub fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    std::fs::write(dir.join(name), content)
        .map_err(|e| CliError::check(format!("cannot write {name}: {e}")))
}
