//! `evt compare`: train the same config under several decay kinds and seeds
//! and emit a comparison CSV. No assertions; the table is the product.

use std::fmt::Write as _;

use evt_core::textio::fmt_g17;
use evt_core::train::{toy_train, TrainEvent};

use super::{ensure_dir, resolve_out_dir, write_file, write_manifest, CliError, CmdResult};
use crate::args::Args;
use crate::config::parse_decay_kind;

const FLAGS: &[&str] = &[
    "variant",
    "config",
    "decays",
    "seeds",
    "steps",
    "lr",
    "batch",
    "optim",
    "samples",
    "image-size",
    "gamma-base",
    "rbf-scale",
    "p",
    "out",
    "seed",
];

pub fn run(argv: &[String]) -> CmdResult {
    let args = Args::parse(argv, FLAGS)?;
    let decays = args.require("decays")?;
    let seeds = args.get_u64("seeds", 1)?;

    let mut csv =
        String::from("decay,seed,steps_run,final_loss,final_accuracy,spikes,non_finite\n");
    for token in decays.split(',') {
        let kind = parse_decay_kind(token.trim(), None).map_err(CliError::usage)?;
        for seed in 0..seeds {
            // reuse the train command's resolution, overriding decay and seed
            let (mut cfg, mut tc) = super::train::resolve_train_setup(&args)?;
            cfg.decay_kind = kind;
            tc.seed = seed;
            let (_, result) = toy_train(&cfg, &tc).map_err(CliError::from)?;
            let spikes = result
                .events
                .iter()
                .filter(|e| matches!(e, TrainEvent::Spike { .. }))
                .count();
            let non_finite = result
                .events
                .iter()
                .filter(|e| matches!(e, TrainEvent::NonFinite { .. }))
                .count();
            let final_loss = result.losses.last().copied().unwrap_or(f64::NAN);
            let _ = writeln!(
                csv,
                "{},{seed},{},{},{},{spikes},{non_finite}",
                token.trim(),
                result.steps_run,
                fmt_g17(final_loss),
                fmt_g17(result.final_accuracy),
            );
        }
    }
    print!("{csv}");
    let out_dir = resolve_out_dir(&args);
    ensure_dir(&out_dir)?;
    write_file(&out_dir, "comparison.csv", &csv)?;
    write_manifest(&out_dir, "compare", &args, &[])?;
    Ok(())
}
