//! ALiBi: additive attention-score biases, linear in query/key distance,
//! with the geometric per-head slope schedule `2^(-8h/n_heads)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-head slopes, heads numbered 1..=n: `slope_h = 2^(-8h/n)`.
pub fn slopes(n_heads: usize) -> Vec<f64> {
    (1..=n_heads)
        .map(|h| 2.0_f64.powf(-8.0 * h as f64 / n_heads as f64))
        .collect()
}

/// Stacked bias of shape `[n_heads, t, t]`: `-slope_h · (i - j)` for `j <= i`
/// and `-inf` above the diagonal, so the bias doubles as the causal mask.
pub fn alibi_bias(n_heads: usize, t: usize) -> Result<Tensor> {
    if n_heads == 0 || t == 0 {
        return Err(Error::Config(format!(
            "alibi needs positive head count and length, got {n_heads} heads, t={t}"
        )));
    }
    let mut data = vec![0.0; n_heads * t * t];
    for (h, &slope) in slopes(n_heads).iter().enumerate() {
        for i in 0..t {
            for j in 0..t {
                data[h * t * t + i * t + j] = if j <= i {
                    -slope * (i - j) as f64
                } else {
                    f64::NEG_INFINITY
                };
            }
        }
    }
    Tensor::new(vec![n_heads, t, t], data)
}

/// One head's T×T bias (already causal-masked), for adding onto scores.
pub(crate) fn head_bias(slope: f64, t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            data[i * t + j] = if j <= i {
                -slope * (i - j) as f64
            } else {
                f64::NEG_INFINITY
            };
        }
    }
    Tensor::new(vec![t, t], data).expect("sized by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_zero_for_every_head() {
        let b = alibi_bias(4, 5).unwrap();
        for h in 0..4 {
            for i in 0..5 {
                assert_eq!(b.data()[h * 25 + i * 5 + i], 0.0);
            }
        }
    }

    #[test]
    fn eight_heads_give_inverse_powers_of_two() {
        let s = slopes(8);
        let want = [
            1.0 / 2.0,
            1.0 / 4.0,
            1.0 / 8.0,
            1.0 / 16.0,
            1.0 / 32.0,
            1.0 / 64.0,
            1.0 / 128.0,
            1.0 / 256.0,
        ];
        for (got, w) in s.iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
    }

    #[test]
    fn single_position_is_one_zero_per_head() {
        let b = alibi_bias(3, 1).unwrap();
        assert_eq!(b.shape(), &[3, 1, 1]);
        assert_eq!(b.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn future_positions_are_masked() {
        let b = alibi_bias(1, 3).unwrap();
        assert_eq!(b.data()[3 * 0 + 1], f64::NEG_INFINITY);
        assert_eq!(b.data()[3 * 0 + 2], f64::NEG_INFINITY);
        assert_eq!(b.data()[3 * 1 + 2], f64::NEG_INFINITY);
        // Single head: slope = 2^-8; distance one below the diagonal.
        assert!((b.data()[3 * 1] - (-1.0 / 256.0)).abs() < 1e-15);
    }
}
