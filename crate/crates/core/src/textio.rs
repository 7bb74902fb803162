//! Text output formats shared by the library and the CLI: 17-significant-digit
//! decimal (round-trip exact for f64), CSV matrices, and plain PGM heatmaps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Format with 17 significant digits, enough to round-trip any f64 exactly.
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Row-major CSV with one matrix row per line.
pub fn csv_matrix(t: &Tensor) -> String {
    assert_eq!(t.rank(), 2, "csv_matrix wants a rank-2 tensor");
    let (r, c) = (t.rows(), t.cols());
    let mut out = String::new();
    for i in 0..r {
        for j in 0..c {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt_g17(t.at2(i, j)));
        }
        out.push('\n');
    }
    out
}

pub fn parse_csv_matrix(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|e| Error::Format {
                    detail: format!("bad csv cell {cell:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format {
            detail: "empty csv".into(),
        });
    }
    Tensor::from_rows(&rows)
}

/// Plain (P2) portable graymap of a [H, W] tensor, linearly scaled so the
/// minimum maps to 0 and the maximum to 255. A constant map renders as 0.
pub fn pgm_p2(t: &Tensor) -> String {
    assert_eq!(t.rank(), 2, "pgm_p2 wants a rank-2 tensor");
    let (h, w) = (t.rows(), t.cols());
    let mn = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = mx - mn;
    let mut out = format!("P2\n{w} {h}\n255\n");
    for i in 0..h {
        for j in 0..w {
            if j > 0 {
                out.push(' ');
            }
            let level = if span > 0.0 {
                ((t.at2(i, j) - mn) / span * 255.0).round() as u32
            } else {
                0
            };
            out.push_str(&level.to_string());
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn g17_round_trips_exactly() {
        let mut rng = Rng::new(0);
        for _ in 0..200 {
            let v = rng.uniform(-1e3, 1e3) * rng.uniform(0.0, 1.0).powi(3);
            let back: f64 = fmt_g17(v).parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{v}");
        }
    }

    #[test]
    fn csv_round_trips_bitwise() {
        let mut rng = Rng::new(1);
        let t = Tensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let back = parse_csv_matrix(&csv_matrix(&t)).unwrap();
        assert!(t.bits_eq(&back));
    }

    #[test]
    fn pgm_header_and_range() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let pgm = pgm_p2(&t);
        assert!(pgm.starts_with("P2\n2 2\n255\n"));
        assert!(pgm.contains("255"));
        assert!(pgm.lines().count() == 5);
        let constant = pgm_p2(&Tensor::full(&[2, 2], 3.0));
        for line in constant.lines().skip(3) {
            assert_eq!(line, "0 0");
        }
    }
}
