//! Dense f64 tensors with deterministic forward kernels.
//!
//! Everything is row-major and summation order is fixed (sequential over the
//! innermost loop), so repeated runs on identical inputs are bit-identical.

use crate::error::{Error, Result};

/// Dense N-dimensional array of f64 in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::argument("tensor", "zero-sized dimension"));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Max over coordinates of |a-b| / max(|a|, |b|, floor).
pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err shape mismatch");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// special functions
// ---------------------------------------------------------------------------

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Error function, accurate to ~1e-15 over the full range.
///
/// Maclaurin series for |x| <= 2.5, Lentz continued fraction for erfc beyond,
/// saturating at |x| >= 6 where erfc underflows the f64 epsilon.
pub fn erf(x: f64) -> f64 {
    if x == 0.0 {
        return x; // preserves signed zero
    }
    let ax = x.abs();
    if ax >= 6.0 {
        return 1.0_f64.copysign(x);
    }
    if ax <= 2.5 {
        // erf(x) = 2/sqrt(pi) * sum_{n>=0} (-1)^n x^(2n+1) / (n! (2n+1))
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 1.0;
        loop {
            term *= -x2 / n;
            let contrib = term / (2.0 * n + 1.0);
            sum += contrib;
            if contrib.abs() < 1e-18 * sum.abs() {
                break;
            }
            n += 1.0;
        }
        FRAC_2_SQRT_PI * sum
    } else {
        1.0_f64.copysign(x) * (1.0 - erfc_cf(ax))
    }
}

/// erfc(x) for x > 0 via the Lentz continued fraction
/// erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + 1/2/(x + 1/(x + 3/2/(x + ...))))
fn erfc_cf(x: f64) -> f64 {
    // modified Lentz with b_j = x and a_j = j/2
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    let mut k = 0.5;
    for _ in 0..200 {
        d = x + k * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + k / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
        k += 0.5;
    }
    (-x * x).exp() / std::f64::consts::PI.sqrt() / f
}

/// Exact-erf GELU: x/2 * (1 + erf(x / sqrt(2))).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
pub fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

// ---------------------------------------------------------------------------
// forward kernels
// ---------------------------------------------------------------------------

/// c[i][j] = sum_t a[i][t] * b[t][j], accumulated sequentially over t.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul", "operands must be rank 2"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions disagree: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a.data[i * k + t];
            let brow = &b.data[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Reference triple loop with the canonical i,j,t nesting. Kept separate from
/// `matmul` (which hoists the t loop) so tests can cross-check the two orders.
pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    if b.shape[0] != k {
        return Err(Error::shape("matmul_naive", "inner dimensions disagree"));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a.data[i * k + t] * b.data[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("transpose", "operand must be rank 2"));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Row-wise softmax where `mask[i*c+j] == false` pins entry (i,j) to exactly 0.
///
/// Each row subtracts its max over unmasked entries before exponentiating.
/// A fully masked row is an error.
pub fn masked_softmax_rows(m: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::shape(
            "masked_softmax_rows",
            "operand must be rank 2",
        ));
    }
    let (r, c) = (m.shape[0], m.shape[1]);
    if let Some(mk) = mask {
        if mk.len() != r * c {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!("mask length {} != {}", mk.len(), r * c),
            ));
        }
    }
    let live = |i: usize, j: usize| mask.map(|mk| mk[i * c + j]).unwrap_or(true);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..c {
            if live(i, j) {
                mx = mx.max(m.data[i * c + j]);
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow {
                op: "masked_softmax_rows",
                row: i,
            });
        }
        let mut denom = 0.0;
        for j in 0..c {
            if live(i, j) {
                let e = (m.data[i * c + j] - mx).exp();
                out[i * c + j] = e;
                denom += e;
            }
        }
        for j in 0..c {
            if live(i, j) {
                out[i * c + j] /= denom;
            }
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Layer norm over the last axis with population variance (divide by d).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if eps < 0.0 {
        return Err(Error::argument("layer_norm", "eps must be >= 0"));
    }
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma/beta length must be {d}"),
        ));
    }
    let slices = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    for s in 0..slices {
        let row = &x.data[s * d..(s + 1) * d];
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
        for j in 0..d {
            out[s * d + j] = gamma.data[j] * (row[j] - mean) * inv + beta.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Per-channel 2D cross-correlation with zero padding.
///
/// x: [C, H, W], kernel: [C, kh, kw] with odd kh/kw. Output spatial size is
/// floor((H + 2*pad - kh)/stride) + 1.
pub fn depthwise_conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if x.rank() != 3 || kernel.rank() != 3 {
        return Err(Error::shape(
            "depthwise_conv2d",
            "x and kernel must be rank 3",
        ));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kc, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2]);
    if kc != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("kernel channels {kc} != input channels {c}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::argument(
            "depthwise_conv2d",
            "kernel dims must be odd",
        ));
    }
    if stride < 1 {
        return Err(Error::argument("depthwise_conv2d", "stride must be >= 1"));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let xin = &x.data[ch * h * w..(ch + 1) * h * w];
        let k = &kernel.data[ch * kh * kw..(ch + 1) * kh * kw];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += xin[iy as usize * w + ix as usize] * k[ky * kw + kx];
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Dense 2D cross-correlation. x: [Cin, H, W], w: [Cout, Cin, kh, kw],
/// optional bias [Cout].
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if x.rank() != 3 || weight.rank() != 4 {
        return Err(Error::shape("conv2d", "x must be rank 3, weight rank 4"));
    }
    let (cin, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (cout, wcin, kh, kw) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("weight expects {wcin} input channels, got {cin}"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape("conv2d", "bias length must equal Cout"));
        }
    }
    if stride < 1 {
        return Err(Error::argument("conv2d", "stride must be >= 1"));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let base = if let Some(b) = bias { b.data[co] } else { 0.0 };
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = base;
                for ci in 0..cin {
                    let xin = &x.data[ci * h * w..(ci + 1) * h * w];
                    let k = &weight.data[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xin[iy as usize * w + ix as usize] * k[ky * kw + kx];
                        }
                    }
                }
                out[co * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(
            "mul",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| x * y)
        .collect();
    Tensor::new(a.shape.clone(), data)
}

/// Normalize each row of a 2D tensor to sum 1. Rows whose sum is exactly 0
/// stay 0 (used for padded rows whose output is discarded anyway).
pub fn row_normalize(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("row_normalize", "operand must be rank 2"));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = a.data.clone();
    for i in 0..r {
        let mut s = 0.0;
        for j in 0..c {
            s += out[i * c + j];
        }
        if s != 0.0 {
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
    }
    Tensor::new(a.shape.clone(), out)
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function of a tensor:
/// (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad: h must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * h);
    }
    grad
}

pub const FD_STEP: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn erf_reference_values() {
        // reference values from standard tables
        let cases = [
            (0.0, 0.0),
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497149),
            (2.0, 0.9953222650189527),
            (3.0, 0.9999779095030014),
            (4.0, 0.9999999845827421),
        ];
        for (x, want) in cases {
            assert!((erf(x) - want).abs() < 1e-14, "erf({x}) = {}", erf(x));
            assert!((erf(-x) + want).abs() < 1e-14, "erf(-{x})");
        }
        assert_eq!(erf(7.0), 1.0);
    }

    #[test]
    fn erf_derivative_matches_fd() {
        for &x in &[-2.7, -1.0, -0.3, 0.0, 0.4, 1.3, 2.6, 3.5] {
            let h = 1e-6;
            let fd = (erf(x + h) - erf(x - h)) / (2.0 * h);
            let exact = FRAC_2_SQRT_PI * (-x * x).exp();
            assert!((fd - exact).abs() < 1e-9, "x={x} fd={fd} exact={exact}");
        }
    }

    #[test]
    fn gelu_values_and_grad() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-14);
        for &x in &[-2.0, -0.5, 0.1, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut rng = Rng::new(0);
        let m = random_tensor(&[3, 3], &mut rng);
        let id = Tensor::eye(3);
        let prod = matmul(&id, &m).unwrap();
        assert!(prod.bits_eq(&m));
    }

    #[test]
    fn matmul_scalar_case() {
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle_exactly() {
        let mut rng = Rng::new(42);
        let a = random_tensor(&[5, 4], &mut rng);
        let b = random_tensor(&[4, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_naive(&a, &b).unwrap();
        // both accumulate over t in the same order, so equality is exact
        assert!(got.bits_eq(&want));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_associativity_within_tolerance() {
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let a = random_tensor(&[4, 5], &mut rng);
            let b = random_tensor(&[5, 3], &mut rng);
            let c = random_tensor(&[3, 6], &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(max_rel_err(&left, &right, 1e-9) < 1e-9);
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let m = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = masked_softmax_rows(&m, None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_survivor() {
        let m = Tensor::new(vec![1, 3], vec![5.0, -1.0, -1.0]).unwrap();
        let mask = [true, false, false];
        let s = masked_softmax_rows(&m, Some(&mask)).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let m = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = masked_softmax_rows(&m, None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            let want = ((j + 1) as f64).exp() / z;
            assert!((s.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = Rng::new(3);
        let m = random_tensor(&[6, 9], &mut rng);
        let s = masked_softmax_rows(&m, None).unwrap();
        for i in 0..6 {
            let sum: f64 = (0..9).map(|j| s.at2(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted = m.map(|v| v + 17.25);
        let s2 = masked_softmax_rows(&shifted, None).unwrap();
        assert!(max_rel_err(&s, &s2, 1e-12) < 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let m = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let mask = [false, false];
        assert!(matches!(
            masked_softmax_rows(&m, Some(&mask)),
            Err(Error::DegenerateRow { row: 0, .. })
        ));
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let x = Tensor::new(vec![1, 4], vec![3.0; 4]).unwrap();
        let g = Tensor::ones(&[4]);
        let b = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = Rng::new(5);
        let x = random_tensor(&[3, 4], &mut rng);
        let g = Tensor::zeros(&[4]);
        let b = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 7.0]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(y.at2(i, j), b.data()[j]);
            }
        }
    }

    #[test]
    fn layer_norm_unit_variance_pair() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-14);
        assert!((y.data()[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut rng = Rng::new(11);
        let x = random_tensor(&[2, 5, 5], &mut rng);
        let mut k = Tensor::zeros(&[2, 3, 3]);
        k.data_mut()[4] = 1.0; // center of channel 0
        k.data_mut()[9 + 4] = 1.0; // center of channel 1
        let y = depthwise_conv2d(&x, &k, 1, 1).unwrap();
        assert!(y.bits_eq(&x));
    }

    #[test]
    fn depthwise_ones_kernel_on_constant_input() {
        let c = 2.5;
        let x = Tensor::full(&[1, 5, 5], c);
        let k = Tensor::ones(&[1, 3, 3]);
        let y = depthwise_conv2d(&x, &k, 1, 1).unwrap();
        // interior pixel sees the full 3x3 window
        assert!((y.data()[2 * 5 + 2] - 9.0 * c).abs() < 1e-12);
    }

    #[test]
    fn depthwise_matches_nested_loop_oracle() {
        let mut rng = Rng::new(13);
        let x = random_tensor(&[1, 5, 5], &mut rng);
        let k = random_tensor(&[1, 3, 3], &mut rng);
        let y = depthwise_conv2d(&x, &k, 1, 1).unwrap();
        // independent oracle: direct summation per output pixel
        for oy in 0..5usize {
            for ox in 0..5usize {
                let mut want = 0.0;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        let ix = ox as isize + kx as isize - 1;
                        if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                            continue;
                        }
                        want += x.data()[iy as usize * 5 + ix as usize] * k.data()[ky * 3 + kx];
                    }
                }
                assert!((y.data()[oy * 5 + ox] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_kernel_too_large_is_error() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 5, 5]);
        assert!(depthwise_conv2d(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn conv2d_stride_and_shapes() {
        let x = Tensor::ones(&[3, 8, 8]);
        let w = Tensor::ones(&[4, 3, 3, 3]);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
        // interior output sees a full 3x3x3 window of ones
        assert!((y.data()[1 * 4 + 1] - 27.0).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let mut rng = Rng::new(17);
        let x = random_tensor(&[2, 3], &mut rng);
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, FD_STEP);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_of_square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn forward_kernels_are_bit_deterministic() {
        let mut rng = Rng::new(23);
        let a = random_tensor(&[7, 5], &mut rng);
        let b = random_tensor(&[5, 6], &mut rng);
        assert!(matmul(&a, &b).unwrap().bits_eq(&matmul(&a, &b).unwrap()));
        let s1 = masked_softmax_rows(&a, None).unwrap();
        let s2 = masked_softmax_rows(&a, None).unwrap();
        assert!(s1.bits_eq(&s2));
    }
}
