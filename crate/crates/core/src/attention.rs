//! Attention variants: standard softmax attention, decay-modulated full
//! attention, the decomposed horizontal/vertical form, and 1-D grouped and
//! dilated attention with padding. Also exact multiply-add accounting for the
//! cost claims.

use crate::decay::{decay_matrix_1d_axis, decay_submatrix, GridCoords, PAD};
use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Per-head queries, keys, and values: each of q, k, v is [heads, N, d_head]
/// over tokens of an H x W grid with H*W == N.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub grid: GridCoords,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, grid: GridCoords) -> Result<Self> {
        if q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::shape(
                "attention_inputs",
                format!(
                    "q/k/v must share a [heads, N, d] shape, got {:?} {:?} {:?}",
                    q.shape(),
                    k.shape(),
                    v.shape()
                ),
            ));
        }
        if q.shape()[1] != grid.tokens() {
            return Err(Error::shape(
                "attention_inputs",
                format!("{} tokens but grid has {}", q.shape()[1], grid.tokens()),
            ));
        }
        Ok(AttentionInputs { q, k, v, grid })
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[2]
    }
}

/// Extract head h of a [heads, N, d] tensor as an [N, d] matrix.
pub fn head_slice(t: &Tensor, h: usize) -> Tensor {
    let (n, d) = (t.shape()[1], t.shape()[2]);
    let start = h * n * d;
    Tensor::new(vec![n, d], t.data()[start..start + n * d].to_vec()).unwrap()
}

/// Stack per-head [N, d] matrices back into [heads, N, d].
pub fn stack_heads(heads: &[Tensor]) -> Tensor {
    let (n, d) = (heads[0].shape()[0], heads[0].shape()[1]);
    let mut data = Vec::with_capacity(heads.len() * n * d);
    for h in heads {
        data.extend_from_slice(h.data());
    }
    Tensor::new(vec![heads.len(), n, d], data).unwrap()
}

/// How the decay factor combines with the softmax output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayNorm {
    /// scores -> softmax -> Hadamard with the decay matrix. Row sums end up
    /// <= 1 and are not renormalized.
    PostSoftmaxDecay,
    /// As above, then rows renormalized to sum 1.
    RenormalizedDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnMode {
    pub norm: DecayNorm,
    pub scale_by_sqrt_d: bool,
}

impl Default for AttnMode {
    fn default() -> Self {
        AttnMode {
            norm: DecayNorm::PostSoftmaxDecay,
            scale_by_sqrt_d: true,
        }
    }
}

impl AttnMode {
    pub fn renormalized() -> Self {
        AttnMode {
            norm: DecayNorm::RenormalizedDecay,
            scale_by_sqrt_d: true,
        }
    }
}

/// Tape nodes produced for one attention head.
pub struct HeadAttn {
    pub out: VarId,
    /// Attention weights after decay (and renormalization when requested).
    pub weights: VarId,
}

/// One attention head on the tape: q, k, v are [N, d] (or [k, d] for a
/// group). `decay` is constant with respect to gradients.
pub fn attend_head(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    decay: Option<&Tensor>,
    mask: Option<Vec<bool>>,
    mode: AttnMode,
) -> Result<HeadAttn> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let mut scores = tape.matmul(q, kt)?;
    if mode.scale_by_sqrt_d {
        scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    }
    let probs = tape.softmax_rows(scores, mask)?;
    let weights = match decay {
        None => probs,
        Some(e) => {
            let damped = tape.mul_const(probs, e)?;
            match mode.norm {
                DecayNorm::PostSoftmaxDecay => damped,
                DecayNorm::RenormalizedDecay => tape.row_normalize(damped)?,
            }
        }
    };
    let out = tape.matmul(weights, v)?;
    Ok(HeadAttn { out, weights })
}

fn run_per_head(
    inp: &AttentionInputs,
    mut f: impl FnMut(&mut Tape, VarId, VarId, VarId) -> Result<VarId>,
) -> Result<Tensor> {
    let mut outs = Vec::with_capacity(inp.heads());
    for h in 0..inp.heads() {
        let mut tape = Tape::new();
        let q = tape.leaf(head_slice(&inp.q, h));
        let k = tape.leaf(head_slice(&inp.k, h));
        let v = tape.leaf(head_slice(&inp.v, h));
        let out = f(&mut tape, q, k, v)?;
        outs.push(tape.value(out).clone());
    }
    Ok(stack_heads(&outs))
}

/// Plain softmax(Q K^T / sqrt(d)) V per head; no spatial prior.
pub fn standard_attention(inp: &AttentionInputs) -> Result<Tensor> {
    let mode = AttnMode::default();
    run_per_head(inp, |tape, q, k, v| {
        Ok(attend_head(tape, q, k, v, None, None, mode)?.out)
    })
}

/// Full decayed attention with the same decay matrix for every head.
pub fn eusa_full(inp: &AttentionInputs, decay: &Tensor, mode: AttnMode) -> Result<Tensor> {
    let n = inp.tokens();
    if decay.shape() != [n, n] {
        return Err(Error::shape(
            "eusa_full",
            format!("decay is {:?}, tokens are {n}", decay.shape()),
        ));
    }
    run_per_head(inp, |tape, q, k, v| {
        Ok(attend_head(tape, q, k, v, Some(decay), None, mode)?.out)
    })
}

/// Full decayed attention with one decay matrix per head (the per-head gamma
/// schedule).
pub fn eusa_full_multi(inp: &AttentionInputs, decays: &[Tensor], mode: AttnMode) -> Result<Tensor> {
    if decays.len() != inp.heads() {
        return Err(Error::shape(
            "eusa_full_multi",
            format!("{} decay matrices for {} heads", decays.len(), inp.heads()),
        ));
    }
    let mut outs = Vec::with_capacity(inp.heads());
    for h in 0..inp.heads() {
        let mut tape = Tape::new();
        let q = tape.leaf(head_slice(&inp.q, h));
        let k = tape.leaf(head_slice(&inp.k, h));
        let v = tape.leaf(head_slice(&inp.v, h));
        let out = attend_head(&mut tape, q, k, v, Some(&decays[h]), None, mode)?.out;
        outs.push(tape.value(out).clone());
    }
    Ok(stack_heads(&outs))
}

/// Decay-modulated attention weights per head, for analysis. Each returned
/// matrix is N x N, after decay and the mode's normalization.
pub fn attention_rows(
    inp: &AttentionInputs,
    decay: Option<&Tensor>,
    mode: AttnMode,
) -> Result<Vec<Tensor>> {
    let mut rows = Vec::with_capacity(inp.heads());
    for h in 0..inp.heads() {
        let mut tape = Tape::new();
        let q = tape.leaf(head_slice(&inp.q, h));
        let k = tape.leaf(head_slice(&inp.k, h));
        let v = tape.leaf(head_slice(&inp.v, h));
        let head = attend_head(&mut tape, q, k, v, decay, None, mode)?;
        rows.push(tape.value(head.weights).clone());
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// decomposed form
// ---------------------------------------------------------------------------

/// One decomposed-attention head on the tape: horizontal attention within
/// each grid row first, then vertical attention within each grid column on
/// the transposed intermediate, each modulated by a 1-D axis decay. Operand
/// order follows the definition exactly: Attn_H (Attn_W V)^T.
pub fn masa_head(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    grid: GridCoords,
    gamma: f64,
) -> Result<VarId> {
    let (h, w) = (grid.height, grid.width);
    if tape.shape(q)[0] != h * w {
        return Err(Error::shape("masa_head", "token count must match grid"));
    }
    let d_w = decay_matrix_1d_axis(w, gamma)?;
    let d_h = decay_matrix_1d_axis(h, gamma)?;
    let mode = AttnMode::default();

    // horizontal pass: attention within each row of the grid
    let row_groups: Vec<Vec<isize>> = (0..h)
        .map(|y| (0..w).map(|x| (y * w + x) as isize).collect())
        .collect();
    let mut row_outs = Vec::with_capacity(h);
    for idx in &row_groups {
        let qr = tape.gather_rows(q, idx, 0.0)?;
        let kr = tape.gather_rows(k, idx, 0.0)?;
        let vr = tape.gather_rows(v, idx, 0.0)?;
        let head = attend_head(tape, qr, kr, vr, Some(&d_w), None, mode)?;
        row_outs.push(head.out);
    }
    let z = tape.assemble_rows(&row_outs, &row_groups, h * w)?;

    // vertical pass on the transposed intermediate
    let col_groups: Vec<Vec<isize>> = (0..w)
        .map(|x| (0..h).map(|y| (y * w + x) as isize).collect())
        .collect();
    let mut col_outs = Vec::with_capacity(w);
    for idx in &col_groups {
        let qc = tape.gather_rows(q, idx, 0.0)?;
        let kc = tape.gather_rows(k, idx, 0.0)?;
        let zc = tape.gather_rows(z, idx, 0.0)?;
        let head = attend_head(tape, qc, kc, zc, Some(&d_h), None, mode)?;
        col_outs.push(head.out);
    }
    tape.assemble_rows(&col_outs, &col_groups, h * w)
}

/// Decomposed Manhattan attention over all heads.
pub fn masa_decomposed(inp: &AttentionInputs, gamma: f64) -> Result<Tensor> {
    let grid = inp.grid;
    run_per_head(inp, |tape, q, k, v| masa_head(tape, q, k, v, grid, gamma))
}

// ---------------------------------------------------------------------------
// 1-D grouping
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Contiguous,
    Dilated,
}

/// Partition of the flattened (and padded) token sequence into groups of
/// exactly k slots. Padding slots carry the PAD sentinel.
#[derive(Clone, Debug)]
pub struct GroupPlan {
    pub kind: GroupKind,
    pub group_size: usize,
    pub num_groups: usize,
    pub pad_count: usize,
    pub n_tokens: usize,
    pub groups: Vec<Vec<isize>>,
}

/// Pad the flattened sequence up to a multiple of k, then split it into
/// contiguous chunks or stride-g interleaves.
pub fn make_group_plan(n: usize, k: usize, kind: GroupKind) -> Result<GroupPlan> {
    if k < 1 || n < 1 {
        return Err(Error::argument("make_group_plan", "n and k must be >= 1"));
    }
    let pad_count = (k - n % k) % k;
    let padded = n + pad_count;
    let g = padded / k;
    let slot = |i: usize| -> isize {
        if i < n {
            i as isize
        } else {
            PAD
        }
    };
    let groups: Vec<Vec<isize>> = match kind {
        GroupKind::Contiguous => (0..g)
            .map(|j| (j * k..(j + 1) * k).map(slot).collect())
            .collect(),
        GroupKind::Dilated => (0..g)
            .map(|j| (0..k).map(|t| slot(j + t * g)).collect())
            .collect(),
    };
    Ok(GroupPlan {
        kind,
        group_size: k,
        num_groups: g,
        pad_count,
        n_tokens: n,
        groups,
    })
}

/// One grouped/dilated attention head on the tape. Group outputs land back
/// at their token rows; PAD rows are dropped.
pub fn attend_grouped_head(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    decay: &Tensor,
    plan: &GroupPlan,
    mode: AttnMode,
    mut capture: Option<&mut Vec<(Vec<isize>, Tensor)>>,
) -> Result<VarId> {
    let n = tape.shape(q)[0];
    if plan.n_tokens != n {
        return Err(Error::shape(
            "eusa_grouped",
            format!("plan covers {} tokens, inputs have {n}", plan.n_tokens),
        ));
    }
    if decay.shape() != [n, n] {
        return Err(Error::shape(
            "eusa_grouped",
            format!("decay is {:?}, tokens are {n}", decay.shape()),
        ));
    }
    let kk = plan.group_size;
    let mut group_outs = Vec::with_capacity(plan.groups.len());
    for group in &plan.groups {
        let qg = tape.gather_rows(q, group, 0.0)?;
        let kg = tape.gather_rows(k, group, 0.0)?;
        let vg = tape.gather_rows(v, group, 0.0)?;
        let sub = decay_submatrix(decay, group)?;
        // every row may attend any non-PAD slot of its group
        let mut mask = vec![true; kk * kk];
        for (b, &ib) in group.iter().enumerate() {
            if ib < 0 {
                for a in 0..kk {
                    mask[a * kk + b] = false;
                }
            }
        }
        let head = attend_head(tape, qg, kg, vg, Some(&sub), Some(mask), mode)?;
        if let Some(cap) = capture.as_deref_mut() {
            cap.push((group.clone(), tape.value(head.weights).clone()));
        }
        group_outs.push(head.out);
    }
    tape.assemble_rows(&group_outs, &plan.groups, n)
}

/// Grouped/dilated decayed attention. Non-PAD token outputs depend only on
/// tokens in the same group.
pub fn eusa_grouped(
    inp: &AttentionInputs,
    decay: &Tensor,
    plan: &GroupPlan,
    mode: AttnMode,
) -> Result<Tensor> {
    run_per_head(inp, |tape, q, k, v| {
        attend_grouped_head(tape, q, k, v, decay, plan, mode, None)
    })
}

// ---------------------------------------------------------------------------
// local context enhancement
// ---------------------------------------------------------------------------

/// Depthwise 5x5 convolution over the value map, stride 1, pad 2. The caller
/// adds the result to the attention output.
pub fn lce(v_map: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if kernel.rank() != 3 || kernel.shape()[1] != 5 || kernel.shape()[2] != 5 {
        return Err(Error::shape(
            "lce",
            format!("kernel must be [C,5,5], got {:?}", kernel.shape()),
        ));
    }
    crate::tensor::depthwise_conv2d(v_map, kernel, 1, 2)
}

// ---------------------------------------------------------------------------
// cost accounting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopsVariant {
    Full,
    Decomposed { h: usize, w: usize },
    Grouped { k: usize },
}

/// Exact FLOP count of the attention arithmetic, with 1 multiply-add = 2
/// FLOPs. Only the score and weighted-sum matmuls count; softmax, the decay
/// Hadamard, and masks are excluded.
pub fn attention_flops(n: usize, d: usize, variant: FlopsVariant) -> Result<u64> {
    let (n, d) = (n as u64, d as u64);
    match variant {
        FlopsVariant::Full => Ok(4 * n * n * d),
        FlopsVariant::Decomposed { h, w } => {
            let (h, w) = (h as u64, w as u64);
            if h * w != n {
                return Err(Error::argument(
                    "attention_flops",
                    format!("decomposed wants h*w == n, got {h}*{w} != {n}"),
                ));
            }
            Ok(4 * (h * w * w * d + h * h * w * d))
        }
        FlopsVariant::Grouped { k } => {
            let k = k as u64;
            if k == 0 {
                return Err(Error::argument("attention_flops", "k must be >= 1"));
            }
            let padded = n.div_ceil(k) * k;
            Ok(4 * padded * k * d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::{decay_matrix_2d, DecayKind, DecaySpec};
    use crate::rng::Rng;
    use crate::tensor::max_rel_err;

    fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    fn random_inputs(heads: usize, grid: GridCoords, d: usize, seed: u64) -> AttentionInputs {
        let mut rng = Rng::new(seed);
        let n = grid.tokens();
        AttentionInputs::new(
            rand(&[heads, n, d], &mut rng),
            rand(&[heads, n, d], &mut rng),
            rand(&[heads, n, d], &mut rng),
            grid,
        )
        .unwrap()
    }

    #[test]
    fn standard_single_token_returns_v() {
        let inp = random_inputs(2, GridCoords::new(1, 1), 4, 0);
        let out = standard_attention(&inp).unwrap();
        assert!(out.bits_eq(&inp.v));
    }

    #[test]
    fn standard_identical_keys_average_values() {
        let mut rng = Rng::new(1);
        let n = 5;
        let d = 3;
        let krow = rand(&[1, d], &mut rng);
        let mut kdata = Vec::new();
        for _ in 0..n {
            kdata.extend_from_slice(krow.data());
        }
        let inp = AttentionInputs::new(
            rand(&[1, n, d], &mut rng),
            Tensor::new(vec![1, n, d], kdata).unwrap(),
            rand(&[1, n, d], &mut rng),
            GridCoords::new(1, 5),
        )
        .unwrap();
        let out = standard_attention(&inp).unwrap();
        for j in 0..d {
            let mean: f64 = (0..n).map(|i| inp.v.data()[i * d + j]).sum::<f64>() / n as f64;
            for i in 0..n {
                assert!((out.data()[i * d + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standard_matches_per_row_formula_oracle() {
        let inp = random_inputs(1, GridCoords::new(1, 5), 3, 2);
        let out = standard_attention(&inp).unwrap();
        let (n, d) = (5, 3);
        let q = &inp.q;
        let k = &inp.k;
        let v = &inp.v;
        for i in 0..n {
            // independent oracle: direct exp/sum formula per row
            let mut weights = vec![0.0; n];
            let mut denom = 0.0;
            for j in 0..n {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q.data()[i * d + t] * k.data()[j * d + t];
                }
                weights[j] = (dot / (d as f64).sqrt()).exp();
                denom += weights[j];
            }
            for j in 0..n {
                weights[j] /= denom;
            }
            for t in 0..d {
                let mut want = 0.0;
                for j in 0..n {
                    want += weights[j] * v.data()[j * d + t];
                }
                assert!((out.data()[i * d + t] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_ones_decay_degenerates_to_standard() {
        let inp = random_inputs(2, GridCoords::new(2, 3), 4, 3);
        let ones = Tensor::ones(&[6, 6]);
        let std = standard_attention(&inp).unwrap();
        let post = eusa_full(&inp, &ones, AttnMode::default()).unwrap();
        assert!(
            post.bits_eq(&std),
            "post-softmax mode must be bitwise equal"
        );
        let renorm = eusa_full(&inp, &ones, AttnMode::renormalized()).unwrap();
        assert!(max_rel_err(&renorm, &std, 1e-12) < 1e-12);
    }

    #[test]
    fn eusa_single_token_returns_v() {
        let inp = random_inputs(1, GridCoords::new(1, 1), 3, 4);
        let e = Tensor::ones(&[1, 1]);
        let out = eusa_full(&inp, &e, AttnMode::default()).unwrap();
        assert!(out.bits_eq(&inp.v));
    }

    #[test]
    fn eusa_full_matches_hand_rolled_oracle_both_modes() {
        let grid = GridCoords::new(2, 2);
        let inp = random_inputs(1, grid, 3, 5);
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap();
        let e = decay_matrix_2d(grid, &spec);
        for mode in [AttnMode::default(), AttnMode::renormalized()] {
            let out = eusa_full(&inp, &e, mode).unwrap();
            let (n, d) = (4, 3);
            for i in 0..n {
                // oracle: direct formula with explicit renormalization choice
                let mut w = vec![0.0; n];
                let mut denom = 0.0;
                for j in 0..n {
                    let mut dot = 0.0;
                    for t in 0..d {
                        dot += inp.q.data()[i * d + t] * inp.k.data()[j * d + t];
                    }
                    w[j] = (dot / (d as f64).sqrt()).exp();
                    denom += w[j];
                }
                for j in 0..n {
                    w[j] = w[j] / denom * e.at2(i, j);
                }
                if mode.norm == DecayNorm::RenormalizedDecay {
                    let s: f64 = w.iter().sum();
                    for wj in w.iter_mut() {
                        *wj /= s;
                    }
                }
                for t in 0..d {
                    let mut want = 0.0;
                    for j in 0..n {
                        want += w[j] * inp.v.data()[j * d + t];
                    }
                    assert!((out.data()[i * d + t] - want).abs() < 1e-12, "{mode:?}");
                }
            }
        }
    }

    #[test]
    fn row_sums_post_softmax_at_most_one_renormalized_exactly_one() {
        let grid = GridCoords::new(3, 3);
        let inp = random_inputs(2, grid, 4, 6);
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap();
        let e = decay_matrix_2d(grid, &spec);
        let post = attention_rows(&inp, Some(&e), AttnMode::default()).unwrap();
        for head in &post {
            for i in 0..9 {
                let s: f64 = (0..9).map(|j| head.at2(i, j)).sum();
                assert!(s <= 1.0 + 1e-12);
                assert!(s < 1.0, "decay strictly shrinks off-diagonal mass");
            }
        }
        let renorm = attention_rows(&inp, Some(&e), AttnMode::renormalized()).unwrap();
        for head in &renorm {
            for i in 0..9 {
                let s: f64 = (0..9).map(|j| head.at2(i, j)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masa_on_single_row_grid_equals_full_with_axis_decay() {
        let gamma = 0.875;
        let grid = GridCoords::new(1, 6);
        let inp = random_inputs(1, grid, 4, 7);
        let decomposed = masa_decomposed(&inp, gamma).unwrap();
        let spec = DecaySpec::new(DecayKind::Manhattan, gamma).unwrap();
        let e = decay_matrix_2d(grid, &spec);
        let full = eusa_full(&inp, &e, AttnMode::default()).unwrap();
        assert!(max_rel_err(&decomposed, &full, 1e-12) < 1e-12);
    }

    #[test]
    fn masa_on_1x1_grid_returns_v() {
        let inp = random_inputs(2, GridCoords::new(1, 1), 3, 8);
        let out = masa_decomposed(&inp, 0.875).unwrap();
        assert!(max_rel_err(&out, &inp.v, 1e-12) < 1e-12);
    }

    /// Literal re-implementation of the decomposed form as an independent
    /// oracle: O[y][x] = sum_y' A_H[x][y,y'] * sum_x' A_W[y'][x,x'] V[y',x'].
    fn masa_literal_oracle(inp: &AttentionInputs, gamma: f64) -> Tensor {
        let (gh, gw) = (inp.grid.height, inp.grid.width);
        let d = inp.head_dim();
        let mut heads = Vec::new();
        for h in 0..inp.heads() {
            let q = head_slice(&inp.q, h);
            let k = head_slice(&inp.k, h);
            let v = head_slice(&inp.v, h);
            let scale = 1.0 / (d as f64).sqrt();
            // A_W[y]: within-row attention, [W x W] per grid row y
            let mut a_w = vec![vec![0.0; gw * gw]; gh];
            for y in 0..gh {
                for xi in 0..gw {
                    let qi = y * gw + xi;
                    let mut denom = 0.0;
                    let mut row = vec![0.0; gw];
                    for xj in 0..gw {
                        let kj = y * gw + xj;
                        let mut dot = 0.0;
                        for t in 0..d {
                            dot += q.data()[qi * d + t] * k.data()[kj * d + t];
                        }
                        row[xj] = (dot * scale).exp();
                        denom += row[xj];
                    }
                    for xj in 0..gw {
                        a_w[y][xi * gw + xj] =
                            row[xj] / denom * gamma.powf((xi as f64 - xj as f64).abs());
                    }
                }
            }
            // A_H[x]: within-column attention, [H x H] per grid column x
            let mut a_h = vec![vec![0.0; gh * gh]; gw];
            for x in 0..gw {
                for yi in 0..gh {
                    let qi = yi * gw + x;
                    let mut denom = 0.0;
                    let mut row = vec![0.0; gh];
                    for yj in 0..gh {
                        let kj = yj * gw + x;
                        let mut dot = 0.0;
                        for t in 0..d {
                            dot += q.data()[qi * d + t] * k.data()[kj * d + t];
                        }
                        row[yj] = (dot * scale).exp();
                        denom += row[yj];
                    }
                    for yj in 0..gh {
                        a_h[x][yi * gh + yj] =
                            row[yj] / denom * gamma.powf((yi as f64 - yj as f64).abs());
                    }
                }
            }
            let mut out = Tensor::zeros(&[gh * gw, d]);
            for y in 0..gh {
                for x in 0..gw {
                    for t in 0..d {
                        let mut acc = 0.0;
                        for yp in 0..gh {
                            let mut inner = 0.0;
                            for xp in 0..gw {
                                inner += a_w[yp][x * gw + xp] * v.data()[(yp * gw + xp) * d + t];
                            }
                            acc += a_h[x][y * gh + yp] * inner;
                        }
                        out.data_mut()[(y * gw + x) * d + t] = acc;
                    }
                }
            }
            heads.push(out);
        }
        stack_heads(&heads)
    }

    #[test]
    fn masa_matches_literal_oracle() {
        for (h, w, seed) in [(2usize, 2usize, 9u64), (3, 4, 10), (4, 4, 11)] {
            let grid = GridCoords::new(h, w);
            let inp = random_inputs(2, grid, 4, seed);
            let got = masa_decomposed(&inp, 0.875).unwrap();
            let want = masa_literal_oracle(&inp, 0.875);
            assert!(
                max_rel_err(&got, &want, 1e-9) < 1e-9,
                "grid {h}x{w}: {}",
                max_rel_err(&got, &want, 1e-9)
            );
        }
    }

    #[test]
    fn group_plans_match_spec_arithmetic() {
        let p = make_group_plan(8, 4, GroupKind::Contiguous).unwrap();
        assert_eq!(p.pad_count, 0);
        assert_eq!(p.groups, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);

        let p = make_group_plan(8, 4, GroupKind::Dilated).unwrap();
        assert_eq!(p.num_groups, 2);
        assert_eq!(p.groups, vec![vec![0, 2, 4, 6], vec![1, 3, 5, 7]]);

        let p = make_group_plan(10, 4, GroupKind::Contiguous).unwrap();
        assert_eq!(p.pad_count, 2);
        assert_eq!(p.num_groups, 3);
        assert_eq!(p.groups[2], vec![8, 9, PAD, PAD]);
    }

    #[test]
    fn every_token_in_exactly_one_group() {
        for kind in [GroupKind::Contiguous, GroupKind::Dilated] {
            for n in [1usize, 5, 10, 49, 196] {
                for k in [1usize, 3, 4, 7, 50] {
                    let p = make_group_plan(n, k, kind).unwrap();
                    let mut seen = vec![0usize; n];
                    for group in &p.groups {
                        assert_eq!(group.len(), k);
                        for &i in group {
                            if i >= 0 {
                                seen[i as usize] += 1;
                            }
                        }
                    }
                    assert!(seen.iter().all(|&c| c == 1), "n={n} k={k} {kind:?}");
                }
            }
        }
    }

    #[test]
    fn single_group_equals_full_bitwise() {
        let grid = GridCoords::new(2, 3);
        let inp = random_inputs(2, grid, 4, 12);
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap();
        let e = decay_matrix_2d(grid, &spec);
        let full = eusa_full(&inp, &e, AttnMode::default()).unwrap();
        for k in [6usize, 7, 11] {
            let plan = make_group_plan(6, k, GroupKind::Contiguous).unwrap();
            let grouped = eusa_grouped(&inp, &e, &plan, AttnMode::default()).unwrap();
            assert!(grouped.bits_eq(&full), "k={k}");
        }
    }

    #[test]
    fn grouped_rows_match_restriction_oracle() {
        let grid = GridCoords::new(2, 4);
        let inp = random_inputs(1, grid, 3, 13);
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.9375).unwrap();
        let e = decay_matrix_2d(grid, &spec);
        let plan = make_group_plan(8, 4, GroupKind::Dilated).unwrap();
        let grouped = eusa_grouped(&inp, &e, &plan, AttnMode::default()).unwrap();
        let d = 3;
        for group in &plan.groups {
            let members: Vec<usize> = group
                .iter()
                .filter(|&&i| i >= 0)
                .map(|&i| i as usize)
                .collect();
            // restriction oracle: full attention on just this group's tokens
            let m = members.len();
            let gather = |t: &Tensor| {
                let mut data = Vec::new();
                for &i in &members {
                    data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
                }
                Tensor::new(vec![1, m, d], data).unwrap()
            };
            let sub_inp = AttentionInputs::new(
                gather(&inp.q),
                gather(&inp.k),
                gather(&inp.v),
                GridCoords::new(1, m),
            )
            .unwrap();
            let idx: Vec<isize> = members.iter().map(|&i| i as isize).collect();
            let sub_e = decay_submatrix(&e, &idx).unwrap();
            let restricted = eusa_full(&sub_inp, &sub_e, AttnMode::default()).unwrap();
            for (a, &tok) in members.iter().enumerate() {
                for t in 0..d {
                    let got = grouped.data()[tok * d + t];
                    let want = restricted.data()[a * d + t];
                    assert_eq!(got.to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn outputs_invariant_to_pad_fill_content() {
        let grid = GridCoords::new(2, 5);
        let inp = random_inputs(2, grid, 4, 14);
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap();
        let e = decay_matrix_2d(grid, &spec);
        let plan = make_group_plan(10, 4, GroupKind::Contiguous).unwrap();
        assert_eq!(plan.pad_count, 2);

        let run_with_fill = |fill: f64| {
            let mut outs = Vec::new();
            for h in 0..inp.heads() {
                let mut tape = Tape::new();
                let q = tape.leaf(head_slice(&inp.q, h));
                let k = tape.leaf(head_slice(&inp.k, h));
                let v = tape.leaf(head_slice(&inp.v, h));
                // inline grouped attention with a poisoned pad fill
                let n = 10;
                let mut out = None;
                for group in &plan.groups {
                    let qg = tape.gather_rows(q, group, fill).unwrap();
                    let kg = tape.gather_rows(k, group, fill).unwrap();
                    let vg = tape.gather_rows(v, group, fill).unwrap();
                    let sub = decay_submatrix(&e, group).unwrap();
                    let kk = plan.group_size;
                    let mut mask = vec![true; kk * kk];
                    for (b, &ib) in group.iter().enumerate() {
                        if ib < 0 {
                            for a in 0..kk {
                                mask[a * kk + b] = false;
                            }
                        }
                    }
                    let head = attend_head(
                        &mut tape,
                        qg,
                        kg,
                        vg,
                        Some(&sub),
                        Some(mask),
                        AttnMode::default(),
                    )
                    .unwrap();
                    let scattered = tape.scatter_rows(head.out, group, n).unwrap();
                    out = Some(match out {
                        None => scattered,
                        Some(acc) => tape.add(acc, scattered).unwrap(),
                    });
                }
                outs.push(tape.value(out.unwrap()).clone());
            }
            stack_heads(&outs)
        };

        let clean = run_with_fill(0.0);
        let poisoned = run_with_fill(987.654);
        assert!(clean.bits_eq(&poisoned));
        let library = eusa_grouped(&inp, &e, &plan, AttnMode::default()).unwrap();
        assert!(clean.bits_eq(&library));
    }

    #[test]
    fn attention_is_linear_in_v() {
        let grid = GridCoords::new(2, 3);
        let mut rng = Rng::new(15);
        let n = 6;
        let d = 4;
        let q = rand(&[1, n, d], &mut rng);
        let k = rand(&[1, n, d], &mut rng);
        let v1 = rand(&[1, n, d], &mut rng);
        let v2 = rand(&[1, n, d], &mut rng);
        let vsum = crate::tensor::add(&v1, &v2).unwrap();
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap();
        let e = decay_matrix_2d(grid, &spec);
        let plan = make_group_plan(n, 3, GroupKind::Dilated).unwrap();
        let run = |v: &Tensor| {
            let inp = AttentionInputs::new(q.clone(), k.clone(), v.clone(), grid).unwrap();
            eusa_grouped(&inp, &e, &plan, AttnMode::default()).unwrap()
        };
        let out_sum = run(&vsum);
        let sum_outs = crate::tensor::add(&run(&v1), &run(&v2)).unwrap();
        assert!(max_rel_err(&out_sum, &sum_outs, 1e-10) < 1e-10);
    }

    #[test]
    fn lce_identity_zero_and_oracle() {
        let mut rng = Rng::new(16);
        let v = rand(&[2, 4, 4], &mut rng);
        let zero = Tensor::zeros(&[2, 5, 5]);
        assert!(lce(&v, &zero).unwrap().data().iter().all(|&x| x == 0.0));

        let mut center = Tensor::zeros(&[2, 5, 5]);
        center.data_mut()[12] = 1.0;
        center.data_mut()[25 + 12] = 1.0;
        assert!(lce(&v, &center).unwrap().bits_eq(&v));

        let k = rand(&[2, 5, 5], &mut rng);
        let got = lce(&v, &k).unwrap();
        let want = crate::tensor::depthwise_conv2d(&v, &k, 1, 2).unwrap();
        assert!(got.bits_eq(&want));
        assert!(lce(&v, &rand(&[2, 3, 3], &mut rng)).is_err());
    }

    #[test]
    fn flop_counts_match_closed_forms() {
        assert_eq!(
            attention_flops(3136, 64, FlopsVariant::Decomposed { h: 56, w: 56 }).unwrap(),
            89_915_392
        );
        assert_eq!(
            attention_flops(3136, 64, FlopsVariant::Grouped { k: 98 }).unwrap(),
            78_675_968
        );
        assert_eq!(
            attention_flops(49, 64, FlopsVariant::Full).unwrap(),
            614_656
        );
        assert!(attention_flops(10, 8, FlopsVariant::Decomposed { h: 3, w: 4 }).is_err());
    }

    #[test]
    fn flop_scaling_exponents() {
        // log-log slope over N in {196, 784, 3136}
        let slope = |f: &dyn Fn(usize) -> u64| {
            let ns = [196usize, 784, 3136];
            let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
            let ys: Vec<f64> = ns.iter().map(|&n| (f(n) as f64).ln()).collect();
            let xm = xs.iter().sum::<f64>() / 3.0;
            let ym = ys.iter().sum::<f64>() / 3.0;
            let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
            let den: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
            num / den
        };
        let grouped = |n: usize| attention_flops(n, 64, FlopsVariant::Grouped { k: 98 }).unwrap();
        let decomposed = |n: usize| {
            let side = (n as f64).sqrt() as usize;
            attention_flops(n, 64, FlopsVariant::Decomposed { h: side, w: side }).unwrap()
        };
        assert!((slope(&grouped) - 1.0).abs() < 0.01);
        assert!((slope(&decomposed) - 1.5).abs() < 0.01);
    }

    #[test]
    fn gradients_flow_through_attention_variants() {
        use crate::tape::check_gradients;
        let grid = GridCoords::new(2, 3);
        let n = 6;
        let d = 4;
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap();
        let e = decay_matrix_2d(grid, &spec);
        let plan = make_group_plan(n, 4, GroupKind::Dilated).unwrap();
        let mut rng = Rng::new(17);
        let q = rand(&[n, d], &mut rng);
        let k = rand(&[n, d], &mut rng);
        let v = rand(&[n, d], &mut rng);

        for mode in [AttnMode::default(), AttnMode::renormalized()] {
            let errs = check_gradients(
                |t, ids| {
                    let head = attend_head(t, ids[0], ids[1], ids[2], Some(&e), None, mode)?;
                    Ok(t.sum(head.out))
                },
                &[q.clone(), k.clone(), v.clone()],
                crate::tensor::FD_STEP,
            )
            .unwrap();
            for err in errs {
                assert!(err < 1e-5, "full attention grad err {err} ({mode:?})");
            }
        }

        let errs = check_gradients(
            |t, ids| {
                let out = attend_grouped_head(
                    t,
                    ids[0],
                    ids[1],
                    ids[2],
                    &e,
                    &plan,
                    AttnMode::default(),
                    None,
                )?;
                Ok(t.sum(out))
            },
            &[q, k, v],
            crate::tensor::FD_STEP,
        )
        .unwrap();
        for err in errs {
            assert!(err < 1e-5, "grouped attention grad err {err}");
        }
    }
}
