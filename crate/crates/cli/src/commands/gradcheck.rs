//! `evt gradcheck`: finite-difference validation of the gradient engine at
//! three scopes. Exit 0 if every group stays under its threshold, 1
//! otherwise (naming the offending tensor).

use evt_core::gradcheck::{attn_checks, block_checks, model_checks};

use super::{CliError, CmdResult, EXIT_CHECK_FAILURE};
use crate::args::Args;

const FLAGS: &[&str] = &["scope", "seed"];

pub fn run(argv: &[String]) -> CmdResult {
    let args = Args::parse(argv, FLAGS)?;
    let scope = args.require("scope")?;
    let seed = args.get_u64("seed", 0)?;
    let reports = match scope {
        "attn" => attn_checks(seed).map_err(CliError::from)?,
        "block" => block_checks(seed).map_err(CliError::from)?,
        "model" => model_checks(seed).map_err(CliError::from)?,
        other => return Err(CliError::usage(format!("unknown scope {other:?}"))),
    };
    let mut failed = None;
    for r in &reports {
        println!(
            "{} max_rel_err {:.3e} threshold {:.0e} {}",
            r.name,
            r.max_rel_err,
            r.threshold,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() && failed.is_none() {
            failed = Some(r.name.clone());
        }
    }
    match failed {
        None => Ok(()),
        Some(name) => Err(CliError {
            code: EXIT_CHECK_FAILURE,
            message: format!("gradient check failed at {name}"),
        }),
    }
}
