//! `evt train`: toy training on the quadrant-blob task. Writes a loss curve
//! CSV, final metrics, the spike/NaN event log, serialized weights, and the
//! resolved model config. A non-finite loss halts gracefully with exit 2.

use std::fmt::Write as _;

use evt_core::model::{count_params, variant_by_name, VariantConfig};
use evt_core::synthetic::SyntheticSpec;
use evt_core::textio::fmt_g17;
use evt_core::train::{toy_train, OptimKind, TrainConfig, TrainEvent, TrainResult};
use evt_core::weights;

use super::{
    ensure_dir, resolve_out_dir, write_file, write_manifest, CliError, CmdResult,
    EXIT_NUMERIC_ABORT,
};
use crate::args::Args;
use crate::config::{model_from_config, model_to_config_text, parse_config, parse_decay_kind};

const FLAGS: &[&str] = &[
    "variant",
    "config",
    "decay",
    "p",
    "rbf-scale",
    "gamma-base",
    "steps",
    "lr",
    "batch",
    "optim",
    "seed",
    "samples",
    "image-size",
    "paper-defaults",
    "out",
];

/// Overwrite the published-table constants onto a config: group size 98 for
/// every stage except the last (49 there), FFN ratio 3, gamma base 3.
pub fn apply_paper_defaults(cfg: &mut VariantConfig) {
    let last = cfg.stages.len() - 1;
    for (i, stage) in cfg.stages.iter_mut().enumerate() {
        stage.group_size = if i == last { 49 } else { 98 };
        stage.ffn_ratio = 3;
    }
    cfg.gamma_base_exponent = 3;
}

pub fn resolve_train_setup(args: &Args) -> Result<(VariantConfig, TrainConfig), CliError> {
    let mut cfg = match (args.get("variant"), args.get("config")) {
        (Some(name), None) => variant_by_name(name)
            .ok_or_else(|| CliError::usage(format!("unknown variant {name:?}")))?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read {path}: {e}")))?;
            model_from_config(&parse_config(&text)?)?
        }
        (Some(_), Some(_)) => return Err(CliError::usage("--variant and --config are exclusive")),
        (None, None) => variant_by_name("micro").unwrap(),
    };
    if let Some(token) = args.get("decay") {
        let p = match args.get("p") {
            Some(v) => Some(
                v.parse::<f64>()
                    .map_err(|_| CliError::usage("--p: bad number"))?,
            ),
            None => None,
        };
        cfg.decay_kind = parse_decay_kind(token, p)?;
    }
    if let Some(flag) = args.get("paper-defaults") {
        match flag {
            "true" => apply_paper_defaults(&mut cfg),
            "false" => {}
            other => {
                return Err(CliError::usage(format!(
                    "--paper-defaults: expected true or false, got {other:?}"
                )))
            }
        }
    }
    cfg.rbf_scale = args.get_f64("rbf-scale", cfg.rbf_scale)?;
    cfg.gamma_base_exponent =
        args.get_usize("gamma-base", cfg.gamma_base_exponent as usize)? as i32;

    let optim = match args.get("optim").unwrap_or("adam") {
        "adam" => OptimKind::Adam,
        "sgd" => OptimKind::Sgd,
        other => return Err(CliError::usage(format!("unknown optimizer {other:?}"))),
    };
    let tc = TrainConfig {
        optim,
        lr: args.get_f64("lr", 3e-3)?,
        steps: args.get_usize("steps", 500)?,
        batch: args.get_usize("batch", 8)?,
        seed: args.get_u64("seed", 0)?,
        dataset: SyntheticSpec {
            image_size: args.get_usize("image-size", 32)?,
            samples: args.get_usize("samples", 128)?,
            ..SyntheticSpec::default()
        },
    };
    Ok((cfg, tc))
}

pub fn loss_csv(result: &TrainResult) -> String {
    let mut out = String::from("step,loss\n");
    for (i, loss) in result.losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", fmt_g17(*loss));
    }
    out
}

pub fn events_log(result: &TrainResult) -> String {
    let mut out = String::new();
    for event in &result.events {
        match event {
            TrainEvent::Spike {
                step,
                loss,
                trailing,
            } => {
                let _ = writeln!(
                    out,
                    "spike step {step} loss {} trailing {}",
                    fmt_g17(*loss),
                    fmt_g17(*trailing)
                );
            }
            TrainEvent::NonFinite { step } => {
                let _ = writeln!(out, "non-finite step {step}");
            }
        }
    }
    out
}

pub fn metrics_text(result: &TrainResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "steps_run {}", result.steps_run);
    let _ = writeln!(out, "final_accuracy {}", fmt_g17(result.final_accuracy));
    let _ = writeln!(out, "events {}", result.events.len());
    let _ = writeln!(out, "halted {}", result.halted);
    if let Some(last) = result.losses.last() {
        let _ = writeln!(out, "final_loss {}", fmt_g17(*last));
    }
    out
}

pub fn run(argv: &[String]) -> CmdResult {
    let args = Args::parse(argv, FLAGS)?;
    let (cfg, tc) = resolve_train_setup(&args)?;
    let out_dir = resolve_out_dir(&args);
    ensure_dir(&out_dir)?;

    let (model, result) = toy_train(&cfg, &tc).map_err(CliError::from)?;

    write_file(&out_dir, "loss.csv", &loss_csv(&result))?;
    write_file(&out_dir, "metrics.txt", &metrics_text(&result))?;
    write_file(&out_dir, "events.log", &events_log(&result))?;
    write_file(&out_dir, "config.txt", &model_to_config_text(&cfg))?;
    weights::save(&model.weights, &out_dir.join("weights.evt")).map_err(CliError::from)?;
    write_manifest(
        &out_dir,
        "train",
        &args,
        &[
            ("resolved.params", count_params(&cfg).to_string()),
            ("resolved.variant", cfg.name.clone()),
            ("seed", tc.seed.to_string()),
        ],
    )?;
    print!("{}", metrics_text(&result));

    if result.halted {
        return Err(CliError {
            code: EXIT_NUMERIC_ABORT,
            message: "training halted on a non-finite loss; partial outputs written".to_string(),
        });
    }
    Ok(())
}
