//! `evt rf`: receptive-field growth bounds against exact brute-force
//! reachability for a sequence of grouping plans.

use std::fmt::Write as _;

use evt_core::analysis::{coverage_fraction, rf_bounds, rf_bruteforce, RfModel};
use evt_core::attention::{make_group_plan, GroupKind, GroupPlan};
use evt_core::textio::fmt_g17;

use super::{ensure_dir, resolve_out_dir, write_file, write_manifest, CliError, CmdResult};
use crate::args::Args;

const FLAGS: &[&str] = &["n", "k", "plan", "w", "g", "l", "out", "seed"];

pub fn run(argv: &[String]) -> CmdResult {
    let args = Args::parse(argv, FLAGS)?;
    let n = args.require_usize("n")?;
    let k = args.require_usize("k")?;
    let plan_tokens = args.require("plan")?;
    let mut plans: Vec<GroupPlan> = Vec::new();
    for token in plan_tokens.split(',') {
        let kind = match token.trim() {
            "contiguous" => GroupKind::Contiguous,
            "dilated" => GroupKind::Dilated,
            other => return Err(CliError::usage(format!("unknown plan kind {other:?}"))),
        };
        plans.push(make_group_plan(n, k, kind).map_err(CliError::from)?);
    }
    if plans.is_empty() {
        return Err(CliError::usage("--plan needs at least one kind"));
    }

    let g_default = plans[0].num_groups as u64;
    let model = RfModel {
        w: args.get_u64("w", k as u64)?,
        g: args.get_u64("g", g_default)?,
        layers: args.get_u64("l", plans.len() as u64)?,
        n: n as u64,
    };
    let bounds = rf_bounds(model);
    let reach = rf_bruteforce(&plans, n).map_err(CliError::from)?;
    let coverage = coverage_fraction(&reach, n);

    let mut max_reach = 0u64;
    for row in 0..n {
        let size = (0..n).filter(|&j| reach[row * n + j]).count() as u64;
        max_reach = max_reach.max(size);
    }
    let within = max_reach <= bounds.f_1d.min(n as u64).max(1);

    let mut text = String::new();
    let _ = writeln!(text, "bounds.f_1d {}", bounds.f_1d);
    let _ = writeln!(text, "bounds.f_2d {}", bounds.f_2d);
    let _ = writeln!(text, "bounds.ratio {}", bounds.ratio);
    let _ = writeln!(text, "bounds.upper_single {}", bounds.upper_bound_single);
    let _ = writeln!(
        text,
        "bounds.full_coverage_layers {}",
        bounds.full_coverage_layers
    );
    let _ = writeln!(text, "brute.max_reach {max_reach}");
    let _ = writeln!(text, "brute.coverage {}", fmt_g17(coverage));
    let _ = writeln!(text, "brute.within_bounds {within}");
    print!("{text}");

    let out_dir = resolve_out_dir(&args);
    ensure_dir(&out_dir)?;
    write_file(&out_dir, "rf.txt", &text)?;
    write_manifest(
        &out_dir,
        "rf",
        &args,
        &[("seed", args.get_u64("seed", 0)?.to_string())],
    )?;

    if !within {
        return Err(CliError::check("brute-force reach exceeded the bound"));
    }
    Ok(())
}
