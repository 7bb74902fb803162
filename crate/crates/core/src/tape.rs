//! Reverse-mode gradient tape over the tensor kernels.
//!
//! Nodes are appended in construction order, so ids are already a topological
//! order and the backward sweep is a single reverse pass. Values are computed
//! eagerly; a tape can therefore double as a plain forward evaluator.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    /// a: [r, c], bias: [c] broadcast over rows.
    AddBias(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    /// Hadamard with a constant tensor that carries no gradient
    /// (decay matrices are constants with respect to training).
    MulConst(VarId, Tensor),
    MatMul(VarId, VarId),
    Transpose(VarId),
    Reshape(VarId),
    // the mask is not stored: masked outputs are exactly zero, which makes
    // their backward contributions vanish on their own
    Softmax {
        x: VarId,
    },
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    },
    Gelu(VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv2d {
        x: VarId,
        w: VarId,
        stride: usize,
        pad: usize,
    },
    /// out[a] = x[idx[a]] for idx[a] >= 0, else a fill constant.
    GatherRows {
        x: VarId,
        idx: Vec<isize>,
    },
    /// out[idx[a]] = x[a] for idx[a] >= 0 into a fresh zero tensor.
    ScatterRows {
        x: VarId,
        idx: Vec<isize>,
    },
    /// Assemble disjoint row groups into one tensor in a single pass:
    /// out[groups[p][a]] = parts[p][a] for non-PAD indices.
    AssembleRows {
        parts: Vec<VarId>,
        groups: Vec<Vec<isize>>,
    },
    SliceCols {
        x: VarId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<VarId>),
    Sum(VarId),
    MeanRows(VarId),
    RowNormalize(VarId),
    CrossEntropy {
        logits: VarId,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: VarId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.slots[id.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let av = self.value(a);
        let bv = self.value(bias);
        if av.rank() != 2 || bv.numel() != av.cols() {
            return Err(Error::shape("add_bias", "expected [r,c] plus [c]"));
        }
        let (r, c) = (av.rows(), av.cols());
        let mut out = av.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bv.data()[j];
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn mul_const(&mut self, a: VarId, c: &Tensor) -> Result<VarId> {
        let v = tensor::mul(self.value(a), c)?;
        Ok(self.push(v, Op::MulConst(a, c.clone())))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let v = tensor::transpose2(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn softmax_rows(&mut self, x: VarId, mask: Option<Vec<bool>>) -> Result<VarId> {
        let v = tensor::masked_softmax_rows(self.value(x), mask.as_deref())?;
        Ok(self.push(v, Op::Softmax { x }))
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let v = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(tensor::gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let v = tensor::conv2d(
            self.value(x),
            self.value(w),
            b.map(|id| self.value(id)),
            stride,
            pad,
        )?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let v = tensor::depthwise_conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(v, Op::DepthwiseConv2d { x, w, stride, pad }))
    }

    pub fn gather_rows(&mut self, x: VarId, idx: &[isize], fill: f64) -> Result<VarId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("gather_rows", "operand must be rank 2"));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i < 0 {
                out.extend(std::iter::repeat(fill).take(c));
            } else if (i as usize) < r {
                out.extend_from_slice(&xv.data()[i as usize * c..(i as usize + 1) * c]);
            } else {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
        }
        let v = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn scatter_rows(&mut self, x: VarId, idx: &[isize], rows: usize) -> Result<VarId> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.rows() != idx.len() {
            return Err(Error::shape("scatter_rows", "index count must match rows"));
        }
        let c = xv.cols();
        let mut out = vec![0.0; rows * c];
        for (a, &i) in idx.iter().enumerate() {
            if i < 0 {
                continue;
            }
            if (i as usize) >= rows {
                return Err(Error::Index {
                    op: "scatter_rows",
                    index: i,
                    len: rows,
                });
            }
            out[i as usize * c..(i as usize + 1) * c]
                .copy_from_slice(&xv.data()[a * c..(a + 1) * c]);
        }
        let v = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(
            v,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// One output row per non-PAD group slot; group index lists must
    /// partition the non-PAD rows (each row written exactly once).
    pub fn assemble_rows(
        &mut self,
        parts: &[VarId],
        groups: &[Vec<isize>],
        rows: usize,
    ) -> Result<VarId> {
        if parts.is_empty() || parts.len() != groups.len() {
            return Err(Error::shape("assemble_rows", "parts and groups must match"));
        }
        let c = self.value(parts[0]).cols();
        let mut out = vec![0.0; rows * c];
        for (&part, group) in parts.iter().zip(groups) {
            let pv = self.value(part);
            if pv.rank() != 2 || pv.cols() != c || pv.rows() != group.len() {
                return Err(Error::shape(
                    "assemble_rows",
                    format!("part is {:?}, group has {} slots", pv.shape(), group.len()),
                ));
            }
            for (a, &i) in group.iter().enumerate() {
                if i < 0 {
                    continue;
                }
                if (i as usize) >= rows {
                    return Err(Error::Index {
                        op: "assemble_rows",
                        index: i,
                        len: rows,
                    });
                }
                out[i as usize * c..(i as usize + 1) * c]
                    .copy_from_slice(&pv.data()[a * c..(a + 1) * c]);
            }
        }
        let v = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(
            v,
            Op::AssembleRows {
                parts: parts.to_vec(),
                groups: groups.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + len > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let v = Tensor::new(vec![r, len], out)?;
        Ok(self.push(v, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::argument("concat_cols", "no parts"));
        }
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pv = self.value(p);
                if pv.rows() != r {
                    return Err(Error::shape("concat_cols", "row counts differ"));
                }
                let c = pv.cols();
                out.extend_from_slice(&pv.data()[i * c..(i + 1) * c]);
            }
        }
        let v = Tensor::new(vec![r, total], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut acc = 0.0;
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum(x))
    }

    pub fn mean_rows(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("mean_rows", "operand must be rank 2"));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xv.data()[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v /= r as f64;
        }
        let v = Tensor::new(vec![1, c], out)?;
        Ok(self.push(v, Op::MeanRows(x)))
    }

    pub fn row_normalize(&mut self, x: VarId) -> Result<VarId> {
        let v = tensor::row_normalize(self.value(x))?;
        Ok(self.push(v, Op::RowNormalize(x)))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                "logits must be [batch, classes] matching targets",
            ));
        }
        let (b, k) = (lv.rows(), lv.cols());
        for &t in targets {
            if t >= k {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t as isize,
                    len: k,
                });
            }
        }
        let probs = tensor::masked_softmax_rows(lv, None)?;
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= probs.at2(i, t).ln();
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar root. Every node reachable from the root
    /// receives an adjoint of the same shape as its value.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(Tensor::ones(self.shape(root)));
        for id in (0..=root.0).rev() {
            let g = match slots[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_adjoints(id, &g, &mut slots)?;
            slots[id] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(slots: &mut [Option<Tensor>], id: VarId, delta: Tensor) {
        match &mut slots[id.0] {
            Some(existing) => {
                let summed = tensor::add(existing, &delta).expect("adjoint shape mismatch");
                *existing = summed;
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn push_adjoints(&self, id: usize, g: &Tensor, slots: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(slots, *a, g.clone());
                Self::accumulate(slots, *b, g.clone());
            }
            Op::AddBias(a, bias) => {
                Self::accumulate(slots, *a, g.clone());
                let (r, c) = (g.rows(), g.cols());
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g.data()[i * c + j];
                    }
                }
                Self::accumulate(slots, *bias, Tensor::new(vec![c], gb)?);
            }
            Op::Mul(a, b) => {
                let ga = tensor::mul(g, self.value(*b))?;
                let gb = tensor::mul(g, self.value(*a))?;
                Self::accumulate(slots, *a, ga);
                Self::accumulate(slots, *b, gb);
            }
            Op::Scale(a, s) => {
                Self::accumulate(slots, *a, g.map(|x| x * s));
            }
            Op::MulConst(a, c) => {
                Self::accumulate(slots, *a, tensor::mul(g, c)?);
            }
            Op::MatMul(a, b) => {
                let bt = tensor::transpose2(self.value(*b))?;
                let at = tensor::transpose2(self.value(*a))?;
                Self::accumulate(slots, *a, tensor::matmul(g, &bt)?);
                Self::accumulate(slots, *b, tensor::matmul(&at, g)?);
            }
            Op::Transpose(a) => {
                Self::accumulate(slots, *a, tensor::transpose2(g)?);
            }
            Op::Reshape(a) => {
                Self::accumulate(slots, *a, g.reshape(self.shape(*a))?);
            }
            Op::Softmax { x } => {
                // s_j (g_j - sum_t g_t s_t) per row; masked outputs are zero so
                // their terms vanish automatically.
                let s = &self.nodes[id].value;
                let (r, c) = (s.rows(), s.cols());
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.data()[i * c + j] * s.data()[i * c + j];
                    }
                    for j in 0..c {
                        gx[i * c + j] = s.data()[i * c + j] * (g.data()[i * c + j] - dot);
                    }
                }
                Self::accumulate(slots, *x, Tensor::new(vec![r, c], gx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = xv.cols();
                let slices = xv.numel() / d;
                let mut gx = vec![0.0; xv.numel()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for s in 0..slices {
                    let row = &xv.data()[s * d..(s + 1) * d];
                    let grow = &g.data()[s * d..(s + 1) * d];
                    let mut mean = 0.0;
                    for &v in row {
                        mean += v;
                    }
                    mean /= d as f64;
                    let mut var = 0.0;
                    for &v in row {
                        var += (v - mean) * (v - mean);
                    }
                    var /= d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat, dy = g*gamma, and the two row means the formula needs
                    let mut mean_dy = 0.0;
                    let mut mean_dy_xhat = 0.0;
                    let mut xhat = vec![0.0; d];
                    let mut dy = vec![0.0; d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv;
                        dy[j] = grow[j] * gv.data()[j];
                        mean_dy += dy[j];
                        mean_dy_xhat += dy[j] * xhat[j];
                        ggamma[j] += grow[j] * xhat[j];
                        gbeta[j] += grow[j];
                    }
                    mean_dy /= d as f64;
                    mean_dy_xhat /= d as f64;
                    for j in 0..d {
                        gx[s * d + j] = inv * (dy[j] - mean_dy - xhat[j] * mean_dy_xhat);
                    }
                }
                Self::accumulate(slots, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                Self::accumulate(slots, *gamma, Tensor::new(vec![d], ggamma)?);
                Self::accumulate(slots, *beta, Tensor::new(vec![d], gbeta)?);
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&x, &gg)| gg * tensor::gelu_grad(x))
                    .collect();
                Self::accumulate(slots, *a, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (cin, h, iw) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, _, kh, kw) =
                    (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let mut gx = vec![0.0; xv.numel()];
                let mut gw = vec![0.0; wv.numel()];
                let mut gb = vec![0.0; cout];
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[co * oh * ow + oy * ow + ox];
                            gb[co] += go;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= iw as isize {
                                            continue;
                                        }
                                        let xi = ci * h * iw + iy as usize * iw + ix as usize;
                                        let wi = (co * cin + ci) * kh * kw + ky * kw + kx;
                                        gx[xi] += go * wv.data()[wi];
                                        gw[wi] += go * xv.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accumulate(slots, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                Self::accumulate(slots, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                if let Some(bid) = b {
                    Self::accumulate(slots, *bid, Tensor::new(vec![cout], gb)?);
                }
            }
            Op::DepthwiseConv2d { x, w, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (c, h, iw) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (kh, kw) = (wv.shape()[1], wv.shape()[2]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let mut gx = vec![0.0; xv.numel()];
                let mut gw = vec![0.0; wv.numel()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[ch * oh * ow + oy * ow + ox];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    let xi = ch * h * iw + iy as usize * iw + ix as usize;
                                    let wi = ch * kh * kw + ky * kw + kx;
                                    gx[xi] += go * wv.data()[wi];
                                    gw[wi] += go * xv.data()[xi];
                                }
                            }
                        }
                    }
                }
                Self::accumulate(slots, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                Self::accumulate(slots, *w, Tensor::new(wv.shape().to_vec(), gw)?);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (a, &i) in idx.iter().enumerate() {
                    if i < 0 {
                        continue;
                    }
                    for j in 0..c {
                        gx[i as usize * c + j] += g.data()[a * c + j];
                    }
                }
                Self::accumulate(slots, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::ScatterRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (a, &i) in idx.iter().enumerate() {
                    if i < 0 {
                        continue;
                    }
                    for j in 0..c {
                        gx[a * c + j] = g.data()[i as usize * c + j];
                    }
                }
                Self::accumulate(slots, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::AssembleRows { parts, groups } => {
                let c = g.cols();
                for (&part, group) in parts.iter().zip(groups) {
                    let mut gp = vec![0.0; group.len() * c];
                    for (a, &i) in group.iter().enumerate() {
                        if i < 0 {
                            continue;
                        }
                        gp[a * c..(a + 1) * c]
                            .copy_from_slice(&g.data()[i as usize * c..(i as usize + 1) * c]);
                    }
                    Self::accumulate(slots, part, Tensor::new(vec![group.len(), c], gp)?);
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*len {
                        gx[i * c + start + j] = g.data()[i * len + j];
                    }
                }
                Self::accumulate(slots, *x, Tensor::new(vec![r, c], gx)?);
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let total = g.cols();
                    let mut gp = Vec::with_capacity(r * c);
                    for i in 0..r {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    Self::accumulate(slots, p, Tensor::new(vec![r, c], gp)?);
                    offset += c;
                }
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                Self::accumulate(slots, *a, Tensor::full(self.shape(*a), s));
            }
            Op::MeanRows(a) => {
                let xv = self.value(*a);
                let (r, c) = (xv.rows(), xv.cols());
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g.data()[j] / r as f64;
                    }
                }
                Self::accumulate(slots, *a, Tensor::new(vec![r, c], gx)?);
            }
            Op::RowNormalize(a) => {
                // out = x / S row-wise; rows with S == 0 stay zero and get zero grads
                let xv = self.value(*a);
                let out = &self.nodes[id].value;
                let (r, c) = (xv.rows(), xv.cols());
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += xv.data()[i * c + j];
                    }
                    if s == 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.data()[i * c + j] * out.data()[i * c + j];
                    }
                    for j in 0..c {
                        gx[i * c + j] = (g.data()[i * c + j] - dot) / s;
                    }
                }
                Self::accumulate(slots, *a, Tensor::new(vec![r, c], gx)?);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let (b, k) = (lv.rows(), lv.cols());
                let probs = tensor::masked_softmax_rows(lv, None)?;
                let scale = g.data()[0] / b as f64;
                let mut gl = vec![0.0; b * k];
                for i in 0..b {
                    for j in 0..k {
                        let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                        gl[i * k + j] = scale * (probs.at2(i, j) - onehot);
                    }
                }
                Self::accumulate(slots, *logits, Tensor::new(vec![b, k], gl)?);
            }
        }
        Ok(())
    }
}

/// Compare the tape gradient of a scalar-valued builder against central
/// finite differences, input tensor by input tensor. Returns the max relative
/// error per input.
pub fn check_gradients(
    build: impl Fn(&mut Tape, &[VarId]) -> Result<VarId>,
    inputs: &[Tensor],
    h: f64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let grads = tape.backward(root)?;

    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<VarId> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let r = build(&mut t, &ids).expect("forward rebuild failed");
        t.value(r).data()[0]
    };

    let mut errs = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(ids[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut work: Vec<Tensor> = inputs.to_vec();
        let fd = tensor::finite_diff_grad(
            |probe| {
                work[i] = probe.clone();
                eval(&work)
            },
            input,
            h,
        );
        errs.push(tensor::max_rel_err(&analytic, &fd, 1e-6));
    }
    Ok(errs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::FD_STEP;

    fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_square_is_two_x() {
        let mut tape = Tape::new();
        let data = vec![1.0, -2.0, 0.5, 3.0];
        let x = tape.leaf(Tensor::new(vec![4], data.clone()).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.wrt(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn matmul_grads_match_fd() {
        let mut rng = Rng::new(1);
        let a = rand(&[3, 4], &mut rng);
        let b = rand(&[4, 2], &mut rng);
        let errs = check_gradients(
            |t, ids| {
                let m = t.matmul(ids[0], ids[1])?;
                Ok(t.sum(m))
            },
            &[a, b],
            FD_STEP,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-7, "matmul grad err {e}");
        }
    }

    #[test]
    fn softmax_grads_match_fd() {
        let mut rng = Rng::new(2);
        let x = rand(&[4, 5], &mut rng);
        let w = rand(&[4, 5], &mut rng); // weights so the root mixes entries
        let errs = check_gradients(
            |t, ids| {
                let s = t.softmax_rows(ids[0], None)?;
                let weighted = t.mul(s, ids[1])?;
                Ok(t.sum(weighted))
            },
            &[x, w],
            FD_STEP,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-6, "softmax grad err {e}");
        }
    }

    #[test]
    fn masked_softmax_grads_match_fd() {
        let mut rng = Rng::new(3);
        let x = rand(&[3, 4], &mut rng);
        let w = rand(&[3, 4], &mut rng);
        let mask = vec![
            true, true, false, true, //
            true, false, true, true, //
            true, true, true, false,
        ];
        let errs = check_gradients(
            |t, ids| {
                let s = t.softmax_rows(ids[0], Some(mask.clone()))?;
                let weighted = t.mul(s, ids[1])?;
                Ok(t.sum(weighted))
            },
            &[x, w],
            FD_STEP,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-6, "masked softmax grad err {e}");
        }
    }

    #[test]
    fn layer_norm_grads_match_fd() {
        let mut rng = Rng::new(4);
        let x = rand(&[3, 6], &mut rng);
        let gamma = rand(&[6], &mut rng);
        let beta = rand(&[6], &mut rng);
        let w = rand(&[3, 6], &mut rng);
        let errs = check_gradients(
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let weighted = t.mul(y, ids[3])?;
                Ok(t.sum(weighted))
            },
            &[x, gamma, beta, w],
            FD_STEP,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-6, "layer_norm grad err {e}");
        }
    }

    #[test]
    fn gelu_grads_match_fd() {
        let mut rng = Rng::new(5);
        let x = rand(&[2, 7], &mut rng);
        let errs = check_gradients(
            |t, ids| {
                let y = t.gelu(ids[0]);
                Ok(t.sum(y))
            },
            &[x],
            FD_STEP,
        )
        .unwrap();
        assert!(errs[0] < 1e-7, "gelu grad err {}", errs[0]);
    }

    #[test]
    fn conv_grads_match_fd() {
        let mut rng = Rng::new(6);
        let x = rand(&[2, 5, 5], &mut rng);
        let w = rand(&[3, 2, 3, 3], &mut rng);
        let b = rand(&[3], &mut rng);
        let errs = check_gradients(
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
                Ok(t.sum(y))
            },
            &[x, w, b],
            FD_STEP,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-6, "conv2d grad err {e}");
        }
    }

    #[test]
    fn depthwise_grads_match_fd() {
        let mut rng = Rng::new(7);
        let x = rand(&[2, 4, 4], &mut rng);
        let w = rand(&[2, 3, 3], &mut rng);
        let errs = check_gradients(
            |t, ids| {
                let y = t.depthwise_conv2d(ids[0], ids[1], 1, 1)?;
                Ok(t.sum(y))
            },
            &[x, w],
            FD_STEP,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-6, "depthwise grad err {e}");
        }
    }

    #[test]
    fn gather_scatter_slice_concat_grads_match_fd() {
        let mut rng = Rng::new(8);
        let x = rand(&[5, 4], &mut rng);
        let w = rand(&[5, 4], &mut rng);
        let idx = vec![2isize, 0, -1, 4, 1, 3];
        let errs = check_gradients(
            |t, ids| {
                let gathered = t.gather_rows(ids[0], &idx, 0.0)?;
                let back = t.scatter_rows(gathered, &idx, 5)?;
                let left = t.slice_cols(back, 0, 2)?;
                let right = t.slice_cols(back, 2, 2)?;
                let cat = t.concat_cols(&[right, left])?;
                let weighted = t.mul(cat, ids[1])?;
                Ok(t.sum(weighted))
            },
            &[x, w],
            FD_STEP,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-7, "gather/scatter grad err {e}");
        }
    }

    #[test]
    fn row_normalize_and_mean_rows_grads_match_fd() {
        let mut rng = Rng::new(9);
        let x = rand(&[4, 5], &mut rng).map(|v| v.abs() + 0.1);
        let w = rand(&[1, 5], &mut rng);
        let errs = check_gradients(
            |t, ids| {
                let n = t.row_normalize(ids[0])?;
                let m = t.mean_rows(n)?;
                let weighted = t.mul(m, ids[1])?;
                Ok(t.sum(weighted))
            },
            &[x, w],
            FD_STEP,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-6, "row_normalize grad err {e}");
        }
    }

    #[test]
    fn cross_entropy_grads_match_fd() {
        let mut rng = Rng::new(10);
        let logits = rand(&[3, 4], &mut rng);
        let targets = vec![1usize, 3, 0];
        let errs = check_gradients(
            |t, ids| t.cross_entropy(ids[0], &targets),
            &[logits],
            FD_STEP,
        )
        .unwrap();
        assert!(errs[0] < 1e-6, "cross_entropy grad err {}", errs[0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x) + sum(x) must give gradient 2 everywhere
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let total = tape.add(s1, s2).unwrap();
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
