//! Command line front end for the distance-decay attention laboratory.

mod args;
mod commands;
mod config;

use commands::{CliError, EXIT_USAGE};

const USAGE: &str = "\
usage: evt <command> [flags]

commands:
  decay      dump a decay matrix (or a per-head schedule) as CSV
             --h H --w W --kind KIND [--gamma G] [--p P] [--rbf-scale S]
             [--schedule-heads N --gamma-base B] [--out DIR]
  gradcheck  finite-difference validation of the gradient engine
             --scope attn|block|model [--seed N]
  rf         receptive-field bounds vs exact brute-force reachability
             --n N --k K --plan contiguous,dilated[,...] [--w W --g G --l L]
  flops      parameter and multiply-add accounting
             --variant NAME | --config FILE [--res R]
  train      toy training on the quadrant-blob task
             [--variant NAME | --config FILE] [--decay KIND] [--steps N]
             [--lr F] [--batch N] [--optim adam|sgd] [--seed N] [--out DIR]
  compare    train under several decay kinds and seeds, emit a CSV
             --decays a,b[,...] [--seeds N] [train flags]
  analyze    capture attention from trained weights and emit metrics
             --weights FILE --config FILE [--metrics js,entropy,rollout]
             [--seed N] [--images M] [--out DIR]

decay kinds: euclidean, manhattan, minkowski[:p], gaussian-rbf,
             multiquadric-rbf, inverse-multiquadric-rbf, none

The output directory defaults to $EVT_OUT_DIR, then ./evt-out. Every run
writes a manifest.txt recording the resolved configuration and seed.
";

fn dispatch(command: &str, rest: &[String]) -> Result<(), CliError> {
    match command {
        "decay" => commands::decay::run(rest),
        "gradcheck" => commands::gradcheck::run(rest),
        "rf" => commands::rf::run(rest),
        "flops" => commands::flops::run(rest),
        "train" => commands::train::run(rest),
        "compare" => commands::compare::run(rest),
        "analyze" => commands::analyze::run(rest),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::usage(format!("unknown command {other:?}"))),
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = argv.first() else {
        eprint!("{USAGE}");
        std::process::exit(EXIT_USAGE);
    };
    match dispatch(command, &argv[1..]) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("evt {command}: {}", e.message);
            if e.code == EXIT_USAGE {
                eprint!("{USAGE}");
            }
            std::process::exit(e.code);
        }
    }
}
