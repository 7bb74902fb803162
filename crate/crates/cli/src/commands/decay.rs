//! `evt decay`: dump decay matrices as CSV with summary statistics.

use std::fmt::Write as _;

use evt_core::decay::{decay_matrix_2d, gamma_schedule, DecaySpec, GridCoords};
use evt_core::tensor::Tensor;
use evt_core::textio::{csv_matrix, fmt_g17};

use super::{ensure_dir, resolve_out_dir, write_file, write_manifest, CliError, CmdResult};
use crate::args::Args;
use crate::config::parse_decay_kind;

const FLAGS: &[&str] = &[
    "h",
    "w",
    "kind",
    "gamma",
    "p",
    "rbf-scale",
    "schedule-heads",
    "gamma-base",
    "out",
    "seed",
];

fn matrix_stats(name: &str, t: &Tensor) -> String {
    let n = t.rows();
    let mut mn = f64::INFINITY;
    let mut mx = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut sym = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let v = t.at2(i, j);
            mn = mn.min(v);
            mx = mx.max(v);
            sum += v;
            sym = sym.max((v - t.at2(j, i)).abs());
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "{name}.min {}", fmt_g17(mn));
    let _ = writeln!(out, "{name}.max {}", fmt_g17(mx));
    let _ = writeln!(out, "{name}.mean {}", fmt_g17(sum / (n * n) as f64));
    let _ = writeln!(out, "{name}.symmetry_residual {}", fmt_g17(sym));
    out
}

pub fn run(argv: &[String]) -> CmdResult {
    let args = Args::parse(argv, FLAGS)?;
    let h = args.require_usize("h")?;
    let w = args.require_usize("w")?;
    let kind_token = args.require("kind")?;
    let p = match args.get("p") {
        Some(v) => Some(
            v.parse::<f64>()
                .map_err(|_| CliError::usage("--p: bad number"))?,
        ),
        None => None,
    };
    let kind = parse_decay_kind(kind_token, p)?;
    let rbf_scale = args.get_f64("rbf-scale", 1.0)?;
    let grid = GridCoords::new(h, w);
    let out_dir = resolve_out_dir(&args);
    ensure_dir(&out_dir)?;

    let mut stats = String::new();
    let mut written = Vec::new();
    match args.get("schedule-heads") {
        Some(_) => {
            let heads = args.require_usize("schedule-heads")?;
            let base = args.get_usize("gamma-base", 3)? as i32;
            let gammas = gamma_schedule(heads, base).map_err(CliError::from)?;
            for (n, &gamma) in gammas.iter().enumerate() {
                let spec = DecaySpec::with_scale(kind, gamma, rbf_scale).map_err(CliError::from)?;
                let e = decay_matrix_2d(grid, &spec);
                let file = format!("decay_head{n}.csv");
                write_file(&out_dir, &file, &csv_matrix(&e))?;
                stats.push_str(&format!("head{n}.gamma {}\n", fmt_g17(gamma)));
                stats.push_str(&matrix_stats(&format!("head{n}"), &e));
                written.push(file);
            }
        }
        None => {
            let gamma = args.get_f64("gamma", 0.875)?;
            let spec = DecaySpec::with_scale(kind, gamma, rbf_scale).map_err(CliError::from)?;
            let e = decay_matrix_2d(grid, &spec);
            write_file(&out_dir, "decay.csv", &csv_matrix(&e))?;
            stats.push_str(&matrix_stats("decay", &e));
            written.push("decay.csv".to_string());
        }
    }
    write_file(&out_dir, "stats.txt", &stats)?;
    write_manifest(
        &out_dir,
        "decay",
        &args,
        &[
            ("resolved.kind", kind_token.to_string()),
            ("resolved.tokens", grid.tokens().to_string()),
            ("seed", args.get_u64("seed", 0)?.to_string()),
        ],
    )?;
    print!("{stats}");
    println!("wrote {} file(s) to {}", written.len(), out_dir.display());
    Ok(())
}
