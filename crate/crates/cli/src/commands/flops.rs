//! `evt flops`: parameter and multiply-add accounting with a per-stage
//! breakdown. Counts are in multiply-adds (the unit that published cost
//! tables label FLOPs); the doubled FLOP figure is printed alongside.

use std::fmt::Write as _;

use evt_core::model::{count_macs, count_params, variant_by_name, VariantConfig};

use super::{ensure_dir, resolve_out_dir, write_file, write_manifest, CliError, CmdResult};
use crate::args::Args;
use crate::config::{model_from_config, parse_config};

const FLAGS: &[&str] = &["variant", "config", "res", "paper-defaults", "out", "seed"];

pub fn load_model_config(args: &Args) -> Result<VariantConfig, CliError> {
    match (args.get("variant"), args.get("config")) {
        (Some(name), None) => variant_by_name(name)
            .ok_or_else(|| CliError::usage(format!("unknown variant {name:?}"))),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read {path}: {e}")))?;
            Ok(model_from_config(&parse_config(&text)?)?)
        }
        (Some(_), Some(_)) => Err(CliError::usage("--variant and --config are exclusive")),
        (None, None) => Err(CliError::usage("need --variant or --config")),
    }
}

pub fn run(argv: &[String]) -> CmdResult {
    let args = Args::parse(argv, FLAGS)?;
    let mut cfg = load_model_config(&args)?;
    if args.get("paper-defaults") == Some("true") {
        super::train::apply_paper_defaults(&mut cfg);
    }
    let cfg = cfg;
    let res = args.get_usize("res", 224)?;
    let params = count_params(&cfg);
    let macs = count_macs(&cfg, res).map_err(CliError::from)?;

    let mut text = String::new();
    let _ = writeln!(text, "variant {}", cfg.name);
    let _ = writeln!(text, "resolution {res}");
    let _ = writeln!(text, "params {params}");
    let _ = writeln!(text, "stem.macs {}", macs.stem);
    let _ = writeln!(text, "merges.macs {}", macs.merges);
    for (s, (attn, proj, dw)) in macs.stages.iter().enumerate() {
        let _ = writeln!(text, "stage{s}.attention.macs {attn}");
        let _ = writeln!(text, "stage{s}.projections.macs {proj}");
        let _ = writeln!(text, "stage{s}.depthwise.macs {dw}");
    }
    let _ = writeln!(text, "head.macs {}", macs.head);
    let total = macs.total();
    let _ = writeln!(text, "total.macs {total}");
    let _ = writeln!(text, "total.flops {}", 2 * total);
    print!("{text}");

    let out_dir = resolve_out_dir(&args);
    ensure_dir(&out_dir)?;
    write_file(&out_dir, "flops.txt", &text)?;
    write_manifest(
        &out_dir,
        "flops",
        &args,
        &[("seed", args.get_u64("seed", 0)?.to_string())],
    )?;
    Ok(())
}
