//! Finite-difference validation suites for the gradient engine, from single
//! attention ops up to the full micro model.

use crate::attention::{
    attend_grouped_head, attend_head, make_group_plan, masa_head, AttnMode, GroupKind,
};
use crate::decay::{decay_matrix_2d, DecayKind, DecaySpec, GridCoords};
use crate::error::Result;
use crate::model::{block_weight_specs, evt_block, micro_small, BlockMixer, BoundWeights, Model};
use crate::rng::Rng;
use crate::tape::{check_gradients, Tape};
use crate::tensor::{finite_diff_grad, max_rel_err, Tensor, FD_STEP};

pub const ATTN_THRESHOLD: f64 = 1e-4;
pub const MODEL_THRESHOLD: f64 = 1e-3;

pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

/// Attention-level checks: full decayed attention in both modes, grouped
/// attention, and the decomposed form, each against finite differences over
/// q, k, and v.
pub fn attn_checks(seed: u64) -> Result<Vec<GroupReport>> {
    let mut rng = Rng::new(seed);
    let grid = GridCoords::new(2, 3);
    let n = grid.tokens();
    let d = 4;
    let q = rand(&[n, d], &mut rng);
    let k = rand(&[n, d], &mut rng);
    let v = rand(&[n, d], &mut rng);
    let spec = DecaySpec::new(DecayKind::Euclidean, 0.875)?;
    let e = decay_matrix_2d(grid, &spec);
    let plan = make_group_plan(n, 4, GroupKind::Dilated)?;
    let mut out = Vec::new();

    for (name, mode) in [
        ("eusa_full.post_softmax", AttnMode::default()),
        ("eusa_full.renormalized", AttnMode::renormalized()),
    ] {
        let errs = check_gradients(
            |t, ids| {
                let head = attend_head(t, ids[0], ids[1], ids[2], Some(&e), None, mode)?;
                Ok(t.sum(head.out))
            },
            &[q.clone(), k.clone(), v.clone()],
            FD_STEP,
        )?;
        for (err, operand) in errs.iter().zip(["q", "k", "v"]) {
            out.push(GroupReport {
                name: format!("{name}.{operand}"),
                max_rel_err: *err,
                threshold: ATTN_THRESHOLD,
            });
        }
    }

    let errs = check_gradients(
        |t, ids| {
            let o = attend_grouped_head(
                t,
                ids[0],
                ids[1],
                ids[2],
                &e,
                &plan,
                AttnMode::default(),
                None,
            )?;
            Ok(t.sum(o))
        },
        &[q.clone(), k.clone(), v.clone()],
        FD_STEP,
    )?;
    for (err, operand) in errs.iter().zip(["q", "k", "v"]) {
        out.push(GroupReport {
            name: format!("eusa_grouped.{operand}"),
            max_rel_err: *err,
            threshold: ATTN_THRESHOLD,
        });
    }

    let errs = check_gradients(
        |t, ids| {
            let o = masa_head(t, ids[0], ids[1], ids[2], grid, 0.875)?;
            Ok(t.sum(o))
        },
        &[q, k, v],
        FD_STEP,
    )?;
    for (err, operand) in errs.iter().zip(["q", "k", "v"]) {
        out.push(GroupReport {
            name: format!("masa_decomposed.{operand}"),
            max_rel_err: *err,
            threshold: ATTN_THRESHOLD,
        });
    }
    Ok(out)
}

/// One block, checked against finite differences over its input and every
/// block weight.
pub fn block_checks(seed: u64) -> Result<Vec<GroupReport>> {
    let c = 4usize;
    let grid = GridCoords::new(2, 2);
    let mut specs = Vec::new();
    block_weight_specs(&mut specs, "block", c, 2);
    let mut rng = Rng::new(seed ^ 0xb10c);
    let tensors: Vec<Tensor> = specs
        .iter()
        .map(|s| {
            let numel: usize = s.shape.iter().product();
            Tensor::new(
                s.shape.clone(),
                (0..numel).map(|_| rng.uniform(-0.4, 0.4)).collect(),
            )
            .unwrap()
        })
        .collect();
    let x = rand(&[c, 2, 2], &mut rng);
    let decay = decay_matrix_2d(grid, &DecaySpec::new(DecayKind::Euclidean, 0.875)?);
    let decays = vec![decay; 2];

    let mut inputs = vec![x];
    inputs.extend(tensors.iter().cloned());
    let spec_list = specs.clone();
    let errs = check_gradients(
        move |t: &mut Tape, ids| {
            let bound = BoundWeights::from_ids(ids[1..].to_vec(), &spec_list);
            let out = evt_block(
                t,
                ids[0],
                &bound,
                "block",
                grid,
                2,
                &decays,
                &BlockMixer::Full,
                AttnMode::default(),
                None,
            )?;
            Ok(t.sum(out))
        },
        &inputs,
        FD_STEP,
    )?;
    let mut out = vec![GroupReport {
        name: "block.input".to_string(),
        max_rel_err: errs[0],
        threshold: ATTN_THRESHOLD,
    }];
    for (err, spec) in errs[1..].iter().zip(&specs) {
        out.push(GroupReport {
            name: format!("block.{}", spec.name),
            max_rel_err: *err,
            threshold: ATTN_THRESHOLD,
        });
    }
    Ok(out)
}

/// Full micro model: every parameter tensor against finite differences.
pub fn model_checks(seed: u64) -> Result<Vec<GroupReport>> {
    let cfg = micro_small();
    let mut model = Model::new(cfg, seed)?;
    let mut rng = Rng::new(seed.wrapping_mul(31).wrapping_add(7));
    let images = vec![rand(&[3, 16, 16], &mut rng)];
    let labels = vec![(seed % 4) as usize];
    let (_, grads) = model.loss_and_grads(&images, &labels)?;
    let mut out = Vec::new();
    for idx in 0..model.weights.tensors.len() {
        let base = model.weights.tensors[idx].clone();
        let fd = finite_diff_grad(
            |probe| {
                model.weights.tensors[idx] = probe.clone();
                let l = model.loss_only(&images, &labels).unwrap();
                model.weights.tensors[idx] = base.clone();
                l
            },
            &base,
            FD_STEP,
        );
        out.push(GroupReport {
            name: model.weights.specs[idx].name.clone(),
            max_rel_err: max_rel_err(&grads[idx], &fd, 1e-6),
            threshold: MODEL_THRESHOLD,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attn_and_block_suites_pass_seed_zero() {
        for report in attn_checks(0)
            .unwrap()
            .iter()
            .chain(block_checks(0).unwrap().iter())
        {
            assert!(report.passed(), "{}: {}", report.name, report.max_rel_err);
        }
    }
}
