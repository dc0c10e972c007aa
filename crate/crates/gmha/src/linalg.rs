//! Small-matrix singular values via one-sided Jacobi, used to verify the
//! rank bounds of folded attention matrices.

use crate::error::Result;
use crate::tensor::Tensor;

/// Singular values of a rank-2 tensor, descending. One-sided Jacobi on the
/// narrower orientation; plenty for the small folded matrices checked here.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = a.dims2()?;
    // Work with columns as vectors; transpose so cols <= rows.
    let (m, n, data) = if cols <= rows {
        (rows, cols, a.data().to_vec())
    } else {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a.data()[r * cols + c];
            }
        }
        (cols, rows, t)
    };
    // col(j)[i] = data[i*n + j]
    let mut cols_v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| data[i * n + j]).collect())
        .collect();

    let max_sweeps = 60;
    let tol = 1e-28;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: f64 = cols_v[p].iter().map(|v| v * v).sum();
                let beta: f64 = cols_v[q].iter().map(|v| v * v).sum();
                let gamma: f64 = cols_v[p].iter().zip(&cols_v[q]).map(|(a, b)| a * b).sum();
                if gamma * gamma <= tol * alpha * beta || gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(f64::MIN_POSITIVE));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let vp = cols_v[p][i];
                    let vq = cols_v[q][i];
                    cols_v[p][i] = c * vp - s * vq;
                    cols_v[q][i] = s * vp + c * vq;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    let mut sigmas: Vec<f64> = cols_v
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sigmas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sigmas)
}

/// Count of singular values at or above `rel_tol · σ_max`.
pub fn numerical_rank(a: &Tensor, rel_tol: f64) -> Result<usize> {
    let sigmas = singular_values(a)?;
    let max = sigmas.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sigmas.iter().filter(|&&s| s >= rel_tol * max).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::random_tensor;

    #[test]
    fn diagonal_matrix_recovers_entries() {
        let a = Tensor::new(vec![3, 3], vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0])
            .unwrap();
        let s = singular_values(&a).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.7, 0.1, -1.1];
        let mut data = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                data[i * 3 + j] = u[i] * v[j];
            }
        }
        let a = Tensor::new(vec![4, 3], data).unwrap();
        assert_eq!(numerical_rank(&a, 1e-10).unwrap(), 1);
        let s = singular_values(&a).unwrap();
        let unorm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vnorm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((s[0] - unorm * vnorm).abs() < 1e-10);
    }

    #[test]
    fn product_rank_is_bounded_by_inner_dimension() {
        let a = random_tensor(&[8, 3], 1.0, 4);
        let b = random_tensor(&[8, 3], 1.0, 5);
        let prod = a.matmul_nt(&b).unwrap(); // 8x8, rank <= 3
        assert_eq!(numerical_rank(&prod, 1e-10).unwrap(), 3);
    }

    #[test]
    fn frobenius_norm_is_preserved() {
        let a = random_tensor(&[5, 7], 1.0, 11);
        let s = singular_values(&a).unwrap();
        let fro: f64 = a.data().iter().map(|v| v * v).sum::<f64>();
        let ssum: f64 = s.iter().map(|v| v * v).sum();
        assert!((fro - ssum).abs() < 1e-10 * fro.max(1.0));
    }

    #[test]
    fn wide_and_tall_orientations_agree() {
        let a = random_tensor(&[3, 9], 1.0, 13);
        let mut t_data = vec![0.0; 27];
        for r in 0..3 {
            for c in 0..9 {
                t_data[c * 3 + r] = a.data()[r * 9 + c];
            }
        }
        let at = Tensor::new(vec![9, 3], t_data).unwrap();
        let sa = singular_values(&a).unwrap();
        let sat = singular_values(&at).unwrap();
        for (x, y) in sa.iter().zip(&sat) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
