//! Rotary position embedding: pairwise rotation of feature pairs by
//! position-dependent angles. Pure rotation, so norms are preserved and
//! query/key dot products depend only on relative position.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rotate row `t` of `x` (shape T×D, D even) by the angles of `positions[t]`:
/// pair `(x[2i], x[2i+1])` turns through `pos · base^(-2i/D)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    rope_apply_signed(x, positions, base, 1.0)
}

/// `sign = -1.0` applies the inverse rotation (used by the backward pass).
pub(crate) fn rope_apply_signed(
    x: &Tensor,
    positions: &[usize],
    base: f64,
    sign: f64,
) -> Result<Tensor> {
    let (rows, d) = x.dims2()?;
    if d % 2 != 0 {
        return Err(Error::Dim(format!("rope needs an even dimension, got {d}")));
    }
    if base <= 1.0 {
        return Err(Error::Config(format!("rope base must exceed 1, got {base}")));
    }
    if positions.len() != rows {
        return Err(Error::Dim(format!(
            "{} positions for {rows} rows",
            positions.len()
        )));
    }
    let half = d / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / d as f64))
        .collect();
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let xr = x.row(r);
        let pos = positions[r] as f64;
        for i in 0..half {
            let angle = sign * pos * inv_freq[i];
            let (sin, cos) = angle.sin_cos();
            let (x0, x1) = (xr[2 * i], xr[2 * i + 1]);
            out[r * d + 2 * i] = x0 * cos - x1 * sin;
            out[r * d + 2 * i + 1] = x0 * sin + x1 * cos;
        }
    }
    Tensor::new(vec![rows, d], out)
}

/// Rotate a single vector in place at the given position.
pub(crate) fn rotate_row_in_place(row: &mut [f64], position: usize, base: f64) {
    let d = row.len();
    debug_assert_eq!(d % 2, 0);
    let half = d / 2;
    let pos = position as f64;
    for i in 0..half {
        let angle = pos * base.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = angle.sin_cos();
        let (x0, x1) = (row[2 * i], row[2 * i + 1]);
        row[2 * i] = x0 * cos - x1 * sin;
        row[2 * i + 1] = x0 * sin + x1 * cos;
    }
}
