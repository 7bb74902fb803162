//! Analysis machinery: divergence protocols, spatial entropy, coordinate
//! gradients of decayed attention, receptive-field theory with a brute-force
//! oracle, graph Laplacian construction, and attention rollout.

use crate::attention::{AttentionInputs, GroupPlan};
use crate::decay::GridCoords;
use crate::error::{Error, Result};
use crate::tensor::{row_normalize, Tensor};

// ---------------------------------------------------------------------------
// divergences and entropy
// ---------------------------------------------------------------------------

fn check_distribution(op: &'static str, p: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for &v in p {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::argument(
                op,
                format!("entry {v} is not a probability"),
            ));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::argument(op, format!("distribution sums to {sum}")));
    }
    Ok(())
}

/// KL(P||Q) with natural log. Terms with p_i = 0 contribute 0; q_i = 0 with
/// p_i > 0 gives +infinity.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", "length mismatch"));
    }
    check_distribution("kl_divergence", p)?;
    check_distribution("kl_divergence", q)?;
    let mut d = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi > 0.0 {
            if qi == 0.0 {
                return Ok(f64::INFINITY);
            }
            d += pi * (pi / qi).ln();
        }
    }
    Ok(d)
}

/// Jensen-Shannon divergence: 0.5 KL(P||M) + 0.5 KL(Q||M) with M the average
/// distribution. Always finite, bounded by ln 2.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("js_divergence", "length mismatch"));
    }
    check_distribution("js_divergence", p)?;
    check_distribution("js_divergence", q)?;
    let m: Vec<f64> = p.iter().zip(q.iter()).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut d = 0.0;
    for (&pi, &mi) in p.iter().zip(m.iter()) {
        if pi > 0.0 {
            d += 0.5 * pi * (pi / mi).ln();
        }
    }
    for (&qi, &mi) in q.iter().zip(m.iter()) {
        if qi > 0.0 {
            d += 0.5 * qi * (qi / mi).ln();
        }
    }
    Ok(d)
}

/// Shannon entropy of a normalized attention row, natural log, 0 log 0 = 0.
pub fn spatial_entropy(row: &[f64]) -> Result<f64> {
    check_distribution("spatial_entropy", row)?;
    let mut h = 0.0;
    for &p in row {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// attention reports and the JS protocol
// ---------------------------------------------------------------------------

/// One captured attention layer: per-head N x N row-stochastic matrices.
/// Grouped layers are embedded into the full size with zeros outside groups
/// and rows renormalized.
#[derive(Clone, Debug)]
pub struct AttnLayer {
    pub stage: usize,
    pub layer: usize,
    pub heads: Vec<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct AttnReport {
    pub layers: Vec<AttnLayer>,
}

impl AttnReport {
    pub fn new() -> Self {
        AttnReport { layers: Vec::new() }
    }

    /// Every stored row must sum to 1 within 1e-9.
    pub fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            for head in &layer.heads {
                let n = head.rows();
                for i in 0..n {
                    let s: f64 = (0..n).map(|j| head.at2(i, j)).sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return Err(Error::argument(
                            "attn_report",
                            format!(
                                "stage {} layer {} row {i} sums to {s}",
                                layer.stage, layer.layer
                            ),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Place grouped attention blocks into a full N x N matrix (zeros outside
/// groups), then renormalize each row to a distribution.
pub fn embed_group_attention(n: usize, pieces: &[(Vec<isize>, Tensor)]) -> Tensor {
    let mut full = Tensor::zeros(&[n, n]);
    for (indices, block) in pieces {
        for (a, &ia) in indices.iter().enumerate() {
            if ia < 0 {
                continue;
            }
            for (b, &ib) in indices.iter().enumerate() {
                if ib < 0 {
                    continue;
                }
                full.set2(ia as usize, ib as usize, block.at2(a, b));
            }
        }
    }
    row_normalize(&full).expect("rank-2 by construction")
}

/// Average JS divergence between each reference attention row and the
/// matching row of a candidate decay matrix (rows normalized to
/// distributions), over all rows, heads, and layers whose token count matches
/// the candidate.
pub fn attention_js_protocol(reference: &AttnReport, candidate: &Tensor) -> Result<f64> {
    if candidate.rank() != 2 || candidate.rows() != candidate.cols() {
        return Err(Error::shape(
            "attention_js_protocol",
            "candidate must be square",
        ));
    }
    let n = candidate.rows();
    let cand_rows = row_normalize(candidate)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for layer in &reference.layers {
        for head in &layer.heads {
            if head.rows() != n {
                continue;
            }
            for i in 0..n {
                let p = &head.data()[i * n..(i + 1) * n];
                let q = &cand_rows.data()[i * n..(i + 1) * n];
                total += js_divergence(p, q)?;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::shape(
            "attention_js_protocol",
            format!("no layers with {n} tokens in the report"),
        ));
    }
    Ok(total / count as f64)
}

/// Same protocol with another report as the candidate row source; layers and
/// heads are matched positionally.
pub fn attention_js_protocol_report(reference: &AttnReport, candidate: &AttnReport) -> Result<f64> {
    if reference.layers.len() != candidate.layers.len() {
        return Err(Error::shape("attention_js_protocol", "layer counts differ"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (lr, lc) in reference.layers.iter().zip(candidate.layers.iter()) {
        if lr.heads.len() != lc.heads.len() {
            return Err(Error::shape("attention_js_protocol", "head counts differ"));
        }
        for (hr, hc) in lr.heads.iter().zip(lc.heads.iter()) {
            let n = hr.rows();
            if hc.rows() != n {
                return Err(Error::shape("attention_js_protocol", "token counts differ"));
            }
            for i in 0..n {
                total += js_divergence(
                    &hr.data()[i * n..(i + 1) * n],
                    &hc.data()[i * n..(i + 1) * n],
                )?;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// coordinate gradients
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Renormalized decayed attention row for token n with the self term
/// excluded: A_nm = exp(q_n k_m / sqrt(d)) E_nm / sum_{k != n} (...).
/// Coordinates are continuous so the row can be differentiated in x_n.
fn decayed_row_excl_self(
    q: &Tensor,
    k: &Tensor,
    coords: &[(f64, f64)],
    n: usize,
    gamma: f64,
    l2: bool,
) -> Vec<f64> {
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let ntok = coords.len();
    let (xn, yn) = coords[n];
    let mut row = vec![0.0; ntok];
    let mut denom = 0.0;
    for m in 0..ntok {
        if m == n {
            continue;
        }
        let mut dot = 0.0;
        for t in 0..d {
            dot += q.at2(n, t) * k.at2(m, t);
        }
        let (xm, ym) = coords[m];
        let dist = if l2 {
            ((xn - xm) * (xn - xm) + (yn - ym) * (yn - ym)).sqrt()
        } else {
            (xn - xm).abs() + (yn - ym).abs()
        };
        let val = (dot * scale).exp() * gamma.powf(dist);
        row[m] = val;
        denom += val;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
    row
}

fn grid_coords_f64(grid: GridCoords) -> Vec<(f64, f64)> {
    (0..grid.tokens())
        .map(|i| {
            let (x, y) = grid.xy(i);
            (x as f64, y as f64)
        })
        .collect()
}

fn coord_grad_impl(
    inp: &AttentionInputs,
    head: usize,
    gamma: f64,
    n: usize,
    axis: Axis,
    l2: bool,
) -> Result<Tensor> {
    let grid = inp.grid;
    let ntok = grid.tokens();
    if n >= ntok {
        return Err(Error::Index {
            op: "coord_grad",
            index: n as isize,
            len: ntok,
        });
    }
    if head >= inp.heads() {
        return Err(Error::Index {
            op: "coord_grad",
            index: head as isize,
            len: inp.heads(),
        });
    }
    let q = crate::attention::head_slice(&inp.q, head);
    let k = crate::attention::head_slice(&inp.k, head);
    let coords = grid_coords_f64(grid);
    let a_row = decayed_row_excl_self(&q, &k, &coords, n, gamma, l2);

    // directional term u_m and its attention-weighted mean
    let (xn, yn) = coords[n];
    let u = |m: usize| -> f64 {
        let (xm, ym) = coords[m];
        let (dc, dx, dy) = match axis {
            Axis::X => (xn - xm, xn - xm, yn - ym),
            Axis::Y => (yn - ym, xn - xm, yn - ym),
        };
        if l2 {
            let dist = (dx * dx + dy * dy).sqrt();
            dc / dist
        } else if dc > 0.0 {
            1.0
        } else if dc < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let mut mean_u = 0.0;
    for m in 0..ntok {
        if m != n {
            mean_u += a_row[m] * u(m);
        }
    }
    let lg = gamma.ln();
    let mut out = Tensor::zeros(&[ntok]);
    for m in 0..ntok {
        if m == n {
            continue;
        }
        out.data_mut()[m] = lg * a_row[m] * (u(m) - mean_u);
    }
    Ok(out)
}

/// Analytic d A_nm / d x_n for Euclidean decay:
/// log(gamma) * A_nm * ((x_n - x_m)/d_nm - sum_k A_nk (x_n - x_k)/d_nk).
/// The self entry is 0. Assumes the renormalized mode with the self term
/// excluded from the neighborhood.
pub fn coord_grad_l2(
    inp: &AttentionInputs,
    head: usize,
    gamma: f64,
    n: usize,
    axis: Axis,
) -> Result<Tensor> {
    coord_grad_impl(inp, head, gamma, n, axis, true)
}

/// Analytic d A_nm / d x_n for Manhattan decay:
/// log(gamma) * A_nm * (sign(x_n - x_m) - sum_k A_nk sign(x_n - x_k)),
/// with sign(0) = 0.
pub fn coord_grad_l1(
    inp: &AttentionInputs,
    head: usize,
    gamma: f64,
    n: usize,
    axis: Axis,
) -> Result<Tensor> {
    coord_grad_impl(inp, head, gamma, n, axis, false)
}

/// Finite-difference oracle for the coordinate gradients: perturb token n's
/// continuous coordinate and re-evaluate the renormalized attention row.
pub fn coord_grad_fd(
    inp: &AttentionInputs,
    head: usize,
    gamma: f64,
    n: usize,
    axis: Axis,
    l2: bool,
    h: f64,
) -> Result<Tensor> {
    let grid = inp.grid;
    let ntok = grid.tokens();
    if n >= ntok || head >= inp.heads() {
        return Err(Error::Index {
            op: "coord_grad_fd",
            index: n as isize,
            len: ntok,
        });
    }
    let q = crate::attention::head_slice(&inp.q, head);
    let k = crate::attention::head_slice(&inp.k, head);
    let mut coords = grid_coords_f64(grid);
    let orig = coords[n];
    match axis {
        Axis::X => coords[n] = (orig.0 + h, orig.1),
        Axis::Y => coords[n] = (orig.0, orig.1 + h),
    }
    let up = decayed_row_excl_self(&q, &k, &coords, n, gamma, l2);
    match axis {
        Axis::X => coords[n] = (orig.0 - h, orig.1),
        Axis::Y => coords[n] = (orig.0, orig.1 - h),
    }
    let down = decayed_row_excl_self(&q, &k, &coords, n, gamma, l2);
    let mut out = Tensor::zeros(&[ntok]);
    for m in 0..ntok {
        out.data_mut()[m] = (up[m] - down[m]) / (2.0 * h);
    }
    Ok(out)
}

/// Second derivative of the Euclidean decay entry with respect to x_n:
/// E_nm (log gamma)^2 (y_n - y_m)^2 / ((x_n-x_m)^2 + (y_n-y_m)^2)^(3/2),
/// exactly as printed. n = m has zero distance and is an argument error.
pub fn second_deriv_l2(grid: GridCoords, gamma: f64, n: usize, m: usize) -> Result<f64> {
    let ntok = grid.tokens();
    if n >= ntok || m >= ntok {
        return Err(Error::Index {
            op: "second_deriv_l2",
            index: n.max(m) as isize,
            len: ntok,
        });
    }
    if n == m {
        return Err(Error::argument(
            "second_deriv_l2",
            "n == m has zero distance",
        ));
    }
    let (xn, yn) = grid.xy(n);
    let (xm, ym) = grid.xy(m);
    let dx = xn as f64 - xm as f64;
    let dy = yn as f64 - ym as f64;
    let d2 = dx * dx + dy * dy;
    let e = gamma.powf(d2.sqrt());
    let lg = gamma.ln();
    Ok(e * lg * lg * dy * dy / d2.powf(1.5))
}

// ---------------------------------------------------------------------------
// receptive fields
// ---------------------------------------------------------------------------

/// Parameters of the receptive-field growth model: each group attends w
/// tokens per layer, g groups, L layers, N tokens total.
#[derive(Clone, Copy, Debug)]
pub struct RfModel {
    pub w: u64,
    pub g: u64,
    pub layers: u64,
    pub n: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfBounds {
    /// 1-D growth curve g * w * L.
    pub f_1d: u64,
    /// 2-D growth curve w * L.
    pub f_2d: u64,
    /// Coverage ratio f_1d / f_2d = g.
    pub ratio: u64,
    /// Single-group upper bound 1 + w * L.
    pub upper_bound_single: u64,
    /// Smallest L with g * w * L >= N (full 1-D coverage).
    pub full_coverage_layers: u64,
}

pub fn rf_bounds(model: RfModel) -> RfBounds {
    RfBounds {
        f_1d: model.g * model.w * model.layers,
        f_2d: model.w * model.layers,
        ratio: model.g,
        upper_bound_single: 1 + model.w * model.layers,
        full_coverage_layers: model.n.div_ceil(model.g * model.w),
    }
}

/// Exact reachability after applying each plan's within-group adjacency in
/// sequence: R <- R union (R . A) per layer, starting from the identity.
/// Entry (n, j) says token j's information can reach token n.
pub fn rf_bruteforce(plans: &[GroupPlan], n: usize) -> Result<Vec<bool>> {
    for plan in plans {
        if plan.n_tokens != n {
            return Err(Error::shape(
                "rf_bruteforce",
                format!("plan covers {} tokens, expected {n}", plan.n_tokens),
            ));
        }
    }
    let mut reach = vec![false; n * n];
    for i in 0..n {
        reach[i * n + i] = true;
    }
    for plan in plans {
        let mut group_of = vec![usize::MAX; n];
        for (gi, group) in plan.groups.iter().enumerate() {
            for &tok in group {
                if tok >= 0 {
                    group_of[tok as usize] = gi;
                }
            }
        }
        let members: Vec<Vec<usize>> = plan
            .groups
            .iter()
            .map(|g| g.iter().filter(|&&t| t >= 0).map(|&t| t as usize).collect())
            .collect();
        let mut next = reach.clone();
        let mut touched = vec![false; plan.groups.len()];
        for row in 0..n {
            for t in touched.iter_mut() {
                *t = false;
            }
            for m in 0..n {
                if reach[row * n + m] {
                    touched[group_of[m]] = true;
                }
            }
            for (gi, hit) in touched.iter().enumerate() {
                if *hit {
                    for &j in &members[gi] {
                        next[row * n + j] = true;
                    }
                }
            }
        }
        reach = next;
    }
    Ok(reach)
}

/// Fraction of true entries in a reachability matrix.
pub fn coverage_fraction(reach: &[bool], n: usize) -> f64 {
    reach.iter().filter(|&&b| b).count() as f64 / (n * n) as f64
}

// ---------------------------------------------------------------------------
// Laplacian and rollout
// ---------------------------------------------------------------------------

/// Graph Laplacian L = D - E of a symmetric weighted adjacency matrix, with
/// D the diagonal of row sums.
pub fn laplacian(e: &Tensor) -> Result<Tensor> {
    if e.rank() != 2 || e.rows() != e.cols() {
        return Err(Error::shape("laplacian", "matrix must be square"));
    }
    let n = e.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            if e.at2(i, j).to_bits() != e.at2(j, i).to_bits() {
                return Err(Error::argument(
                    "laplacian",
                    format!("asymmetric at ({i},{j})"),
                ));
            }
        }
    }
    let mut out = e.map(|v| -v);
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            degree += e.at2(i, j);
        }
        out.set2(i, i, degree - e.at2(i, i));
    }
    Ok(out)
}

/// Attention rollout: per layer average heads, add the identity for the
/// residual path, renormalize rows, and left-multiply the running product.
/// The result maps input tokens to output attribution, rows summing to 1.
pub fn attention_rollout(report: &AttnReport) -> Result<Tensor> {
    if report.layers.is_empty() {
        return Err(Error::argument("attention_rollout", "empty report"));
    }
    let n = report.layers[0].heads[0].rows();
    let mut rollout: Option<Tensor> = None;
    for layer in &report.layers {
        let mut mean = Tensor::zeros(&[n, n]);
        for head in &layer.heads {
            if head.rows() != n {
                return Err(Error::argument(
                    "attention_rollout",
                    format!("mixed token counts: {} vs {n}", head.rows()),
                ));
            }
            for (dst, src) in mean.data_mut().iter_mut().zip(head.data()) {
                *dst += src;
            }
        }
        let h = layer.heads.len() as f64;
        let mut mixed = mean.map(|v| v / h);
        for i in 0..n {
            mixed.set2(i, i, mixed.at2(i, i) + 1.0);
        }
        let bar = row_normalize(&mixed)?;
        rollout = Some(match rollout {
            None => bar,
            Some(prev) => crate::tensor::matmul(&bar, &prev)?,
        });
    }
    Ok(rollout.unwrap())
}
