//! Spatial distance and decay matrices.
//!
//! Tokens live on an H x W grid, flattened row-major. A decay matrix assigns
//! every token pair a factor in (0, 1] that shrinks with spatial distance;
//! multiplying attention scores by it injects a spatial prior without any
//! learned parameters. Decay matrices are constants with respect to
//! gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sentinel index marking a padding slot in group index lists.
pub const PAD: isize = -1;

/// Row-major bijection between token index n and grid position (x, y):
/// n = y * width + x.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridCoords {
    pub height: usize,
    pub width: usize,
}

impl GridCoords {
    pub fn new(height: usize, width: usize) -> Self {
        GridCoords { height, width }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn xy(&self, n: usize) -> (usize, usize) {
        (n % self.width, n / self.width)
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Which kernel shapes the pairwise decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecayKind {
    Euclidean,
    Manhattan,
    Minkowski(f64),
    GaussianRbf,
    MultiquadricRbf,
    InverseMultiquadricRbf,
    None,
}

impl DecayKind {
    /// Kinds where the matrix entry is gamma raised to a true metric distance.
    pub fn is_distance(&self) -> bool {
        matches!(
            self,
            DecayKind::Euclidean | DecayKind::Manhattan | DecayKind::Minkowski(_)
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecayKind::Euclidean => "euclidean",
            DecayKind::Manhattan => "manhattan",
            DecayKind::Minkowski(_) => "minkowski",
            DecayKind::GaussianRbf => "gaussian-rbf",
            DecayKind::MultiquadricRbf => "multiquadric-rbf",
            DecayKind::InverseMultiquadricRbf => "inverse-multiquadric-rbf",
            DecayKind::None => "none",
        }
    }
}

/// Kernel kind plus its scalar knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecaySpec {
    pub kind: DecayKind,
    pub gamma: f64,
    /// Length scale for the RBF kinds; ignored elsewhere.
    pub rbf_scale: f64,
}

impl DecaySpec {
    pub fn new(kind: DecayKind, gamma: f64) -> Result<Self> {
        DecaySpec::with_scale(kind, gamma, 1.0)
    }

    pub fn with_scale(kind: DecayKind, gamma: f64, rbf_scale: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::argument(
                "decay_spec",
                format!("gamma must be in (0,1), got {gamma}"),
            ));
        }
        if let DecayKind::Minkowski(p) = kind {
            if !(p >= 1.0) {
                return Err(Error::argument(
                    "decay_spec",
                    format!("minkowski p must be >= 1, got {p}"),
                ));
            }
        }
        if !(rbf_scale > 0.0) {
            return Err(Error::argument(
                "decay_spec",
                format!("rbf_scale must be > 0, got {rbf_scale}"),
            ));
        }
        Ok(DecaySpec {
            kind,
            gamma,
            rbf_scale,
        })
    }

    pub fn none() -> Self {
        // gamma is irrelevant for the no-decay baseline but kept valid
        DecaySpec {
            kind: DecayKind::None,
            gamma: 0.5,
            rbf_scale: 1.0,
        }
    }
}

/// Per-head decay coefficients gamma_n = 1 - 2^(-base_exponent - n).
///
/// Powers of two are exact in binary floats, so the values are exact. The
/// schedule is strictly increasing, giving later heads wider receptive
/// fields.
#[derive(Clone, Debug)]
pub struct HeadGammaSchedule {
    pub num_heads: usize,
    pub base_exponent: i32,
    pub values: Vec<f64>,
}

impl HeadGammaSchedule {
    pub fn new(num_heads: usize, base_exponent: i32) -> Result<Self> {
        let values = gamma_schedule(num_heads, base_exponent)?;
        Ok(HeadGammaSchedule {
            num_heads,
            base_exponent,
            values,
        })
    }
}

/// gamma_n = 1 - 2^(-base_exponent - n) for n in 0..num_heads.
pub fn gamma_schedule(num_heads: usize, base_exponent: i32) -> Result<Vec<f64>> {
    if num_heads < 1 {
        return Err(Error::argument("gamma_schedule", "num_heads must be >= 1"));
    }
    Ok((0..num_heads)
        .map(|n| 1.0 - 2f64.powi(-base_exponent - n as i32))
        .collect())
}

/// Pairwise distances between grid positions.
///
/// Distance kinds use their own metric; the RBF kinds report the Euclidean
/// radius r (the kernel shaping happens in [`decay_matrix_2d`]); `None` has no
/// distance notion and returns zeros.
pub fn distance_matrix(grid: GridCoords, kind: DecayKind) -> Tensor {
    let n = grid.tokens();
    let mut out = Tensor::zeros(&[n, n]);
    for a in 0..n {
        let (xa, ya) = grid.xy(a);
        for b in 0..n {
            let (xb, yb) = grid.xy(b);
            let dx = xa as f64 - xb as f64;
            let dy = ya as f64 - yb as f64;
            let d = match kind {
                DecayKind::Manhattan => dx.abs() + dy.abs(),
                DecayKind::Minkowski(p) => (dx.abs().powf(p) + dy.abs().powf(p)).powf(1.0 / p),
                DecayKind::None => 0.0,
                // Euclidean, and the radius argument for every RBF kind
                _ => (dx * dx + dy * dy).sqrt(),
            };
            out.set2(a, b, d);
        }
    }
    out
}

/// The N x N decay matrix for a grid and spec.
///
/// Distance kinds produce gamma^distance. GaussianRbf is exp(-r^2/(2 s^2)),
/// InverseMultiquadricRbf is 1/sqrt(1 + (r/s)^2); MultiquadricRbf grows with
/// r, so it is folded into the exponent as gamma^sqrt(1 + (r/s)^2) to stay
/// comparable with the distance kinds. `None` is the all-ones baseline.
pub fn decay_matrix_2d(grid: GridCoords, spec: &DecaySpec) -> Tensor {
    let r = distance_matrix(grid, spec.kind);
    let s = spec.rbf_scale;
    match spec.kind {
        DecayKind::None => Tensor::ones(&[grid.tokens(), grid.tokens()]),
        DecayKind::GaussianRbf => r.map(|d| (-d * d / (2.0 * s * s)).exp()),
        DecayKind::InverseMultiquadricRbf => r.map(|d| 1.0 / (1.0 + (d / s) * (d / s)).sqrt()),
        DecayKind::MultiquadricRbf => r.map(|d| spec.gamma.powf((1.0 + (d / s) * (d / s)).sqrt())),
        _ => r.map(|d| spec.gamma.powf(d)),
    }
}

/// One-dimensional axis decay: entry (i, j) = gamma^|i - j|.
pub fn decay_matrix_1d_axis(length: usize, gamma: f64) -> Result<Tensor> {
    if length < 1 {
        return Err(Error::argument(
            "decay_matrix_1d_axis",
            "length must be >= 1",
        ));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::argument(
            "decay_matrix_1d_axis",
            format!("gamma must be in (0,1), got {gamma}"),
        ));
    }
    let mut out = Tensor::zeros(&[length, length]);
    for i in 0..length {
        for j in 0..length {
            let d = (i as f64 - j as f64).abs();
            out.set2(i, j, gamma.powf(d));
        }
    }
    Ok(out)
}

/// Slice a full decay matrix down to a group's index list. PAD slots produce
/// zero rows and columns; the zeros are never load-bearing because padded
/// positions are also masked in the softmax.
pub fn decay_submatrix(full: &Tensor, indices: &[isize]) -> Result<Tensor> {
    let n = full.rows();
    let k = indices.len();
    let mut out = Tensor::zeros(&[k, k]);
    for (a, &ia) in indices.iter().enumerate() {
        if ia < 0 {
            continue;
        }
        if ia as usize >= n {
            return Err(Error::Index {
                op: "decay_submatrix",
                index: ia,
                len: n,
            });
        }
        for (b, &ib) in indices.iter().enumerate() {
            if ib < 0 {
                continue;
            }
            if ib as usize >= n {
                return Err(Error::Index {
                    op: "decay_submatrix",
                    index: ib,
                    len: n,
                });
            }
            out.set2(a, b, full.at2(ia as usize, ib as usize));
        }
    }
    Ok(out)
}

/// Cache of decay matrices keyed by (grid, spec). Construction is pure, so
/// cached values are immutable and freely shareable.
#[derive(Default)]
pub struct DecayCache {
    map: BTreeMap<CacheKey, Tensor>,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct CacheKey {
    h: usize,
    w: usize,
    kind_tag: u8,
    kind_param: u64,
    gamma_bits: u64,
    scale_bits: u64,
}

fn cache_key(grid: GridCoords, spec: &DecaySpec) -> CacheKey {
    let (kind_tag, kind_param) = match spec.kind {
        DecayKind::Euclidean => (0u8, 0u64),
        DecayKind::Manhattan => (1, 0),
        DecayKind::Minkowski(p) => (2, p.to_bits()),
        DecayKind::GaussianRbf => (3, 0),
        DecayKind::MultiquadricRbf => (4, 0),
        DecayKind::InverseMultiquadricRbf => (5, 0),
        DecayKind::None => (6, 0),
    };
    CacheKey {
        h: grid.height,
        w: grid.width,
        kind_tag,
        kind_param,
        gamma_bits: spec.gamma.to_bits(),
        scale_bits: spec.rbf_scale.to_bits(),
    }
}

impl DecayCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, grid: GridCoords, spec: &DecaySpec) -> &Tensor {
        self.map
            .entry(cache_key(grid, spec))
            .or_insert_with(|| decay_matrix_2d(grid, spec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL_KINDS: [DecayKind; 7] = [
        DecayKind::Euclidean,
        DecayKind::Manhattan,
        DecayKind::Minkowski(3.0),
        DecayKind::GaussianRbf,
        DecayKind::MultiquadricRbf,
        DecayKind::InverseMultiquadricRbf,
        DecayKind::None,
    ];

    #[test]
    fn gamma_schedule_matches_formula() {
        assert_eq!(gamma_schedule(3, 3).unwrap(), vec![0.875, 0.9375, 0.96875]);
        assert_eq!(gamma_schedule(1, 7).unwrap(), vec![0.9921875]);
    }

    #[test]
    fn gamma_schedule_monotone_below_one() {
        let g = gamma_schedule(16, 3).unwrap();
        for w in g.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn gamma_schedule_rejects_zero_heads() {
        assert!(gamma_schedule(0, 3).is_err());
    }

    #[test]
    fn distances_on_tiny_grids() {
        let d = distance_matrix(GridCoords::new(1, 2), DecayKind::Euclidean);
        assert_eq!(d.data(), &[0.0, 1.0, 1.0, 0.0]);

        let g22 = GridCoords::new(2, 2);
        let dm = distance_matrix(g22, DecayKind::Manhattan);
        let de = distance_matrix(g22, DecayKind::Euclidean);
        // diagonal pair (0,0)-(1,1) is tokens 0 and 3
        assert_eq!(dm.at2(0, 3), 2.0);
        assert!((de.at2(0, 3) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn minkowski_corner_to_corner() {
        let g = GridCoords::new(3, 3);
        let d = distance_matrix(g, DecayKind::Minkowski(3.0));
        // corner (0,0) to corner (2,2): (2^3 + 2^3)^(1/3) = 16^(1/3)
        let want = 16f64.powf(1.0 / 3.0);
        assert!((d.at2(0, 8) - want).abs() < 1e-12);
        assert!((want - 2.5198420997897464).abs() < 1e-12);
    }

    #[test]
    fn none_decay_is_all_ones() {
        let e = decay_matrix_2d(GridCoords::new(3, 2), &DecaySpec::none());
        assert!(e.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn euclidean_decay_small_grids() {
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap();
        let e = decay_matrix_2d(GridCoords::new(1, 2), &spec);
        assert_eq!(e.data(), &[1.0, 0.875, 0.875, 1.0]);

        let e22 = decay_matrix_2d(GridCoords::new(2, 2), &spec);
        let want = 0.875f64.powf(2f64.sqrt());
        assert!((e22.at2(0, 3) - want).abs() < 1e-15);
        assert!((want - 0.827_92).abs() < 1e-5);
    }

    #[test]
    fn axis_decay_values() {
        assert_eq!(decay_matrix_1d_axis(1, 0.5).unwrap().data(), &[1.0]);
        let d = decay_matrix_1d_axis(3, 0.5).unwrap();
        assert_eq!(d.data(), &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn axis_decay_matches_one_row_grid() {
        let gamma = 0.9375;
        let axis = decay_matrix_1d_axis(7, gamma).unwrap();
        let spec = DecaySpec::new(DecayKind::Manhattan, gamma).unwrap();
        let grid = decay_matrix_2d(GridCoords::new(1, 7), &spec);
        assert!(axis.bits_eq(&grid));
    }

    #[test]
    fn submatrix_identity_and_singleton() {
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap();
        let full = decay_matrix_2d(GridCoords::new(2, 3), &spec);
        let all: Vec<isize> = (0..6).collect();
        assert!(decay_submatrix(&full, &all).unwrap().bits_eq(&full));
        let one = decay_submatrix(&full, &[0]).unwrap();
        assert_eq!(one.data(), &[1.0]);
    }

    #[test]
    fn submatrix_dilated_group_pattern() {
        let gamma = 0.875f64;
        let spec = DecaySpec::new(DecayKind::Euclidean, gamma).unwrap();
        let full = decay_matrix_2d(GridCoords::new(1, 8), &spec);
        let sub = decay_submatrix(&full, &[0, 2, 4, 6]).unwrap();
        for a in 0..4usize {
            for b in 0..4usize {
                let dist = 2.0 * (a as f64 - b as f64).abs();
                assert!((sub.at2(a, b) - gamma.powf(dist)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn submatrix_pad_rows_are_zero_and_bad_index_errors() {
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap();
        let full = decay_matrix_2d(GridCoords::new(2, 2), &spec);
        let sub = decay_submatrix(&full, &[0, PAD, 3]).unwrap();
        for j in 0..3 {
            assert_eq!(sub.at2(1, j), 0.0);
            assert_eq!(sub.at2(j, 1), 0.0);
        }
        assert!(matches!(
            decay_submatrix(&full, &[0, 9]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn symmetry_and_diagonal_for_all_kinds_up_to_8x8() {
        for h in 1..=8usize {
            for w in 1..=8usize {
                let grid = GridCoords::new(h, w);
                for kind in ALL_KINDS {
                    let spec = DecaySpec::with_scale(kind, 0.875, 1.0).unwrap();
                    let e = decay_matrix_2d(grid, &spec);
                    let n = grid.tokens();
                    for a in 0..n {
                        for b in 0..n {
                            assert_eq!(e.at2(a, b).to_bits(), e.at2(b, a).to_bits());
                        }
                    }
                    let unit_diag = kind.is_distance()
                        || matches!(
                            kind,
                            DecayKind::GaussianRbf
                                | DecayKind::InverseMultiquadricRbf
                                | DecayKind::None
                        );
                    if unit_diag {
                        for a in 0..n {
                            assert_eq!(e.at2(a, a), 1.0, "{kind:?} diag");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn strict_monotone_decay_in_distance() {
        let grid = GridCoords::new(8, 8);
        for kind in [
            DecayKind::Euclidean,
            DecayKind::Manhattan,
            DecayKind::Minkowski(3.0),
        ] {
            let spec = DecaySpec::new(kind, 0.875).unwrap();
            let d = distance_matrix(grid, kind);
            let e = decay_matrix_2d(grid, &spec);
            let n = grid.tokens();
            for a in 0..n {
                for b in 0..n {
                    for b2 in 0..n {
                        if d.at2(a, b) < d.at2(a, b2) {
                            assert!(e.at2(a, b) > e.at2(a, b2), "{kind:?} monotonicity");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn euclidean_entry_dominates_manhattan_entrywise() {
        let grid = GridCoords::new(8, 8);
        let ee = decay_matrix_2d(grid, &DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap());
        let em = decay_matrix_2d(grid, &DecaySpec::new(DecayKind::Manhattan, 0.875).unwrap());
        for (a, b) in ee.data().iter().zip(em.data().iter()) {
            assert!(a >= b);
        }
    }

    #[test]
    fn euclidean_decay_is_rotationally_symmetric() {
        // entries depend only on squared distance: equal squared distances
        // give bit-identical decay values
        let grid = GridCoords::new(8, 8);
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.9375).unwrap();
        let e = decay_matrix_2d(grid, &spec);
        let n = grid.tokens();
        let mut by_d2: BTreeMap<i64, u64> = BTreeMap::new();
        for a in 0..n {
            let (xa, ya) = grid.xy(a);
            for b in 0..n {
                let (xb, yb) = grid.xy(b);
                let dx = xa as i64 - xb as i64;
                let dy = ya as i64 - yb as i64;
                let d2 = dx * dx + dy * dy;
                let bits = e.at2(a, b).to_bits();
                match by_d2.get(&d2) {
                    Some(&prev) => assert_eq!(prev, bits, "d2={d2}"),
                    None => {
                        by_d2.insert(d2, bits);
                    }
                }
            }
        }
    }

    #[test]
    fn manhattan_anisotropy_witness() {
        // (dx,dy) = (5,0) and (3,4) have equal Euclidean distance 5 but
        // Manhattan distances 5 and 7, so the Manhattan decay differs.
        let grid = GridCoords::new(8, 8);
        let gamma = 0.875;
        let em = decay_matrix_2d(grid, &DecaySpec::new(DecayKind::Manhattan, gamma).unwrap());
        let ee = decay_matrix_2d(grid, &DecaySpec::new(DecayKind::Euclidean, gamma).unwrap());
        let origin = grid.index(0, 0);
        let axis = grid.index(5, 0);
        let diag = grid.index(3, 4);
        assert_eq!(
            ee.at2(origin, axis).to_bits(),
            ee.at2(origin, diag).to_bits()
        );
        assert!(em.at2(origin, axis) > em.at2(origin, diag));
    }

    #[test]
    fn cache_returns_identical_matrices() {
        let mut cache = DecayCache::new();
        let grid = GridCoords::new(4, 4);
        let spec = DecaySpec::new(DecayKind::Euclidean, 0.875).unwrap();
        let a = cache.get(grid, &spec).clone();
        let b = cache.get(grid, &spec).clone();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn spec_validation() {
        assert!(DecaySpec::new(DecayKind::Euclidean, 0.0).is_err());
        assert!(DecaySpec::new(DecayKind::Euclidean, 1.0).is_err());
        assert!(DecaySpec::new(DecayKind::Minkowski(0.5), 0.9).is_err());
        assert!(DecaySpec::with_scale(DecayKind::GaussianRbf, 0.9, 0.0).is_err());
    }
}
