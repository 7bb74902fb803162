//! `evt analyze`: run a trained model over seeded synthetic inputs, capture
//! per-layer attention, and emit divergence, entropy, and rollout artifacts.

use std::fmt::Write as _;

use evt_core::analysis::{
    attention_js_protocol, attention_js_protocol_report, attention_rollout, spatial_entropy,
    AttnReport,
};
use evt_core::decay::{decay_matrix_2d, DecayKind, DecaySpec, GridCoords};
use evt_core::model::{weight_specs, Model, ModelWeights, VariantConfig};
use evt_core::synthetic::{quadrant_blob_dataset, SyntheticSpec};
use evt_core::tensor::Tensor;
use evt_core::textio::{fmt_g17, pgm_p2};
use evt_core::weights as weight_io;

use super::{ensure_dir, resolve_out_dir, write_file, write_manifest, CliError, CmdResult};
use crate::args::Args;
use crate::config::{model_from_config, parse_config};

const FLAGS: &[&str] = &[
    "weights",
    "config",
    "metrics",
    "seed",
    "images",
    "image-size",
    "gamma",
    "rf-threshold",
    "out",
];

/// Grid of each stage for a given input resolution.
fn stage_grids(cfg: &VariantConfig, resolution: usize) -> Vec<GridCoords> {
    let stem_stride: usize = cfg.stem.strides.iter().product();
    let mut hw = resolution / stem_stride;
    let mut grids = Vec::new();
    for s in 0..cfg.stages.len() {
        if s > 0 {
            hw /= 2;
        }
        grids.push(GridCoords::new(hw, hw));
    }
    grids
}

fn stage_report(report: &AttnReport, stage: usize) -> AttnReport {
    AttnReport {
        layers: report
            .layers
            .iter()
            .filter(|l| l.stage == stage)
            .cloned()
            .collect(),
    }
}

pub fn run(argv: &[String]) -> CmdResult {
    let args = Args::parse(argv, FLAGS)?;
    let weights_path = args.require("weights")?;
    let config_path = args.require("config")?;
    let metrics = args.get("metrics").unwrap_or("js,entropy,rollout");
    let seed = args.get_u64("seed", 0)?;
    let num_images = args.get_usize("images", 4)?.max(1);
    let image_size = args.get_usize("image-size", 32)?;

    let config_text = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::usage(format!("cannot read {config_path}: {e}")))?;
    let cfg = model_from_config(&parse_config(&config_text)?)?;
    let loaded = weight_io::load(std::path::Path::new(weights_path)).map_err(CliError::from)?;

    // loaded tensors must line up with the config's weight enumeration
    let expected = weight_specs(&cfg);
    if expected.len() != loaded.specs.len() {
        return Err(CliError::check(format!(
            "weights hold {} tensors, config expects {}",
            loaded.specs.len(),
            expected.len()
        )));
    }
    for (e, l) in expected.iter().zip(&loaded.specs) {
        if e.name != l.name || e.shape != l.shape {
            return Err(CliError::check(format!(
                "weight mismatch: config expects {} {:?}, file has {} {:?}",
                e.name, e.shape, l.name, l.shape
            )));
        }
    }
    let weights = ModelWeights::from_tensors(expected, loaded.tensors).map_err(CliError::from)?;
    let mut model = Model::with_weights(cfg.clone(), weights).map_err(CliError::from)?;

    let spec = SyntheticSpec {
        image_size,
        samples: num_images,
        ..SyntheticSpec::default()
    };
    let (images, _) = quadrant_blob_dataset(&spec, seed ^ 0xe7a1);
    let reports: Vec<AttnReport> = images
        .iter()
        .map(|img| {
            let mut rep = AttnReport::new();
            model.forward(img, Some(&mut rep)).map(|_| rep)
        })
        .collect::<Result<_, _>>()
        .map_err(CliError::from)?;
    for rep in &reports {
        rep.validate().map_err(CliError::from)?;
    }

    let out_dir = resolve_out_dir(&args);
    ensure_dir(&out_dir)?;
    let grids = stage_grids(&cfg, image_size);
    let gamma = args.get_f64("gamma", 1.0 - 2f64.powi(-cfg.gamma_base_exponent))?;

    let want_js = metrics.split(',').any(|m| m.trim() == "js");
    let want_entropy = metrics.split(',').any(|m| m.trim() == "entropy");
    let want_rollout = metrics.split(',').any(|m| m.trim() == "rollout");

    if want_js {
        let mut text = String::new();
        for (s, &grid) in grids.iter().enumerate() {
            for kind in [DecayKind::Euclidean, DecayKind::Manhattan] {
                let candidate =
                    decay_matrix_2d(grid, &DecaySpec::new(kind, gamma).map_err(CliError::from)?);
                let mut total = 0.0;
                for rep in &reports {
                    total += attention_js_protocol(&stage_report(rep, s), &candidate)
                        .map_err(CliError::from)?;
                }
                let _ = writeln!(
                    text,
                    "js stage {s} candidate {} gamma {} value {}",
                    kind.name(),
                    fmt_g17(gamma),
                    fmt_g17(total / reports.len() as f64)
                );
            }
            let self_js = attention_js_protocol_report(
                &stage_report(&reports[0], s),
                &stage_report(&reports[0], s),
            )
            .map_err(CliError::from)?;
            let _ = writeln!(
                text,
                "js stage {s} candidate self value {}",
                fmt_g17(self_js)
            );
        }
        write_file(&out_dir, "js.txt", &text)?;
        print!("{text}");
    }

    if want_entropy {
        let mut text = String::new();
        for (li, layer) in reports[0].layers.iter().enumerate() {
            for (h, _) in layer.heads.iter().enumerate() {
                let mut total = 0.0;
                let mut rf_total = 0.0;
                let mut count = 0usize;
                // receptive field = tokens whose attention weight exceeds
                // the threshold (default 1/N: above the uniform level)
                let n0 = reports[0].layers[li].heads[h].rows();
                let rf_threshold = args.get_f64("rf-threshold", 1.0 / n0 as f64)?;
                for rep in &reports {
                    let head = &rep.layers[li].heads[h];
                    let n = head.rows();
                    for i in 0..n {
                        let row = &head.data()[i * n..(i + 1) * n];
                        total += spatial_entropy(row).map_err(CliError::from)?;
                        rf_total += row.iter().filter(|&&v| v > rf_threshold).count() as f64;
                        count += 1;
                    }
                }
                let _ = writeln!(
                    text,
                    "entropy stage {} layer {} head {h} value {}",
                    layer.stage,
                    layer.layer,
                    fmt_g17(total / count as f64)
                );
                let _ = writeln!(
                    text,
                    "rf_size stage {} layer {} head {h} value {}",
                    layer.stage,
                    layer.layer,
                    fmt_g17(rf_total / count as f64)
                );
            }
        }
        write_file(&out_dir, "entropy.txt", &text)?;
        print!("{text}");
    }

    if want_rollout {
        for (s, &grid) in grids.iter().enumerate() {
            let sub = stage_report(&reports[0], s);
            if sub.layers.is_empty() {
                continue;
            }
            let rollout = attention_rollout(&sub).map_err(CliError::from)?;
            let n = grid.tokens();
            // center-token attribution row reshaped to the stage grid
            let center = n / 2 + grid.width / 2;
            let row = Tensor::new(
                vec![grid.height, grid.width],
                rollout.data()[center * n..(center + 1) * n].to_vec(),
            )
            .map_err(CliError::from)?;
            write_file(&out_dir, &format!("rollout_stage{s}.pgm"), &pgm_p2(&row))?;
            // mean incoming attribution per token
            let mut mean = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    mean[j] += rollout.at2(i, j);
                }
            }
            for v in mean.iter_mut() {
                *v /= n as f64;
            }
            let mean_map =
                Tensor::new(vec![grid.height, grid.width], mean).map_err(CliError::from)?;
            write_file(
                &out_dir,
                &format!("rollout_stage{s}_mean.pgm"),
                &pgm_p2(&mean_map),
            )?;
        }
    }

    write_manifest(
        &out_dir,
        "analyze",
        &args,
        &[
            ("resolved.images", num_images.to_string()),
            ("resolved.gamma", fmt_g17(gamma)),
            ("seed", seed.to_string()),
        ],
    )?;
    Ok(())
}
