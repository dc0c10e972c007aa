//! Dense row-major `f64` tensors plus the raw kernels shared by the autodiff
//! graph and the inference-only decode path.
//!
//! All arithmetic in this crate is 64-bit; reduced precision appears only in
//! cache-byte *accounting*, never in computation.

use crate::error::{Error, Result};

/// Dense tensor: a shape and a flat row-major value buffer. The gradient
/// buffer is populated by [`crate::graph::Graph::backward`] for leaves that
/// require gradients.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} wants {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, requires: bool) -> Self {
        self.requires_grad = requires;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Mutable gradient buffer, zero-initialized on first touch. Always the
    /// same shape as `data`.
    pub(crate) fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    /// Interpret as a matrix; errors unless rank is exactly 2.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dim(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Largest absolute element-wise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "cannot compare shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    // ── Inference-path operations (no gradient recording) ───────────────

    /// `self · b` for rank-2 tensors.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul {:?} x {:?}: inner dimensions {k} != {k2}",
                self.shape, b.shape
            )));
        }
        Tensor::new(vec![m, n], mm(&self.data, m, k, &b.data, n))
    }

    /// `self · bᵀ` for rank-2 tensors.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul_nt {:?} x {:?}ᵀ: inner dimensions {k} != {k2}",
                self.shape, b.shape
            )));
        }
        Tensor::new(vec![m, n], mm_nt(&self.data, m, k, &b.data, n))
    }

    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        if self.shape != b.shape {
            return Err(Error::Dim(format!(
                "add shapes {:?} and {:?}",
                self.shape, b.shape
            )));
        }
        let data = self.data.iter().zip(&b.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * factor).collect();
        Tensor { shape: self.shape.clone(), data, requires_grad: false, grad: None }
    }

    /// Row-wise softmax with max subtraction. `-inf` entries act as mask
    /// sentinels; a row with no finite entry is an error.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        let mut out = self.data.clone();
        for r in 0..rows {
            softmax_row(&mut out[r * cols..(r + 1) * cols], r)?;
        }
        Tensor::new(vec![rows, cols], out)
    }

    /// RMS normalization over the trailing dimension, scaled by `gamma`.
    pub fn rmsnorm(&self, gamma: &Tensor, eps: f64) -> Result<Tensor> {
        let h = *self.shape.last().unwrap();
        if gamma.shape() != [h] {
            return Err(Error::Dim(format!(
                "rmsnorm gamma shape {:?}, expected [{h}]",
                gamma.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("rmsnorm eps must be positive, got {eps}")));
        }
        let rows = self.numel() / h;
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data[r * h..(r + 1) * h];
            let inv = rms_inverse(x, eps);
            for i in 0..h {
                out[r * h + i] = x[i] * inv * gamma.data[i];
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

/// SwiGLU feed-forward: `(silu(x·w1) ⊙ (x·w3)) · w2`, no bias, no dropout.
pub fn swiglu_ffn(x: &Tensor, w1: &Tensor, w3: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let a = x.matmul(w1)?;
    let b = x.matmul(w3)?;
    let mut gated = vec![0.0; a.numel()];
    for i in 0..a.numel() {
        gated[i] = silu(a.data[i]) * b.data[i];
    }
    Tensor::new(a.shape.clone(), gated)?.matmul(w2)
}

/// Mean over positions of `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (t, v) = logits.dims2()?;
    if targets.len() != t {
        return Err(Error::Dim(format!(
            "{} targets for {t} logit rows",
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        if y >= v {
            return Err(Error::TargetOutOfRange { index: y, vocab: v });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[y];
    }
    Ok(total / t as f64)
}

// ── Raw kernels ──────────────────────────────────────────────────────────

/// `a (m×k) · b (k×n)`, accumulating row-by-row for cache locality.
pub(crate) fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `a (m×k) · b (n×k)ᵀ`.
pub(crate) fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            crow[j] = dot(arow, brow);
        }
    }
    c
}

/// `a (k×m)ᵀ · b (k×n)`.
pub(crate) fn mm_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place stable softmax of one row; `row_idx` only labels the error.
pub(crate) fn softmax_row(row: &mut [f64], row_idx: usize) -> Result<()> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateRow(row_idx));
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1 / sqrt(mean(x²) + eps)`.
pub(crate) fn rms_inverse(x: &[f64], eps: f64) -> f64 {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (mean_sq + eps).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let c = i.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_hand_check() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        // Deterministic pseudo-random fill, checked against the naive i/j/k sum.
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let ta = Tensor::new(vec![m, k], a.clone()).unwrap();
        let tb = Tensor::new(vec![k, n], b.clone()).unwrap();
        let c = ta.matmul(&tb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for kk in 0..k {
                    want += a[i * k + kk] * b[kk * n + j];
                }
                assert!((c.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "error should name shapes: {err}");
    }

    #[test]
    fn softmax_symmetric_pair() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_single_element_row() {
        let t = Tensor::new(vec![1, 1], vec![3.7]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let t = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (got, x) in s.data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - x.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_masked_row_sums_to_one() {
        let t = Tensor::new(vec![1, 3], vec![0.3, f64::NEG_INFINITY, -0.7]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert_eq!(s.data()[1], 0.0);
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_row_is_degenerate() {
        let t = Tensor::new(vec![1, 2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert!(matches!(t.softmax_rows(), Err(Error::DegenerateRow(0))));
    }

    #[test]
    fn rmsnorm_zero_input() {
        let x = Tensor::zeros(vec![2, 4]);
        let gamma = Tensor::filled(vec![4], 1.7);
        let y = x.rmsnorm(&gamma, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmsnorm_constant_vector_has_unit_magnitude() {
        let x = Tensor::filled(vec![1, 8], -3.0);
        let gamma = Tensor::filled(vec![8], 1.0);
        let y = x.rmsnorm(&gamma, 1e-12).unwrap();
        for &v in y.data() {
            assert!((v - (-1.0)).abs() < 1e-9, "got {v}");
        }
    }

    #[test]
    fn rmsnorm_matches_direct_formula() {
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.5, 2.0]).unwrap();
        let gamma = Tensor::new(vec![3], vec![1.1, 0.9, 1.3]).unwrap();
        let eps = 1e-6;
        let y = x.rmsnorm(&gamma, eps).unwrap();
        let ms = (0.25 + 2.25 + 4.0) / 3.0;
        let inv = 1.0 / (ms + eps).sqrt();
        let want = [0.5 * inv * 1.1, -1.5 * inv * 0.9, 2.0 * inv * 1.3];
        for (got, w) in y.data().iter().zip(want) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_wrong_gamma_length() {
        let x = Tensor::zeros(vec![2, 4]);
        let gamma = Tensor::zeros(vec![3]);
        assert!(x.rmsnorm(&gamma, 1e-6).is_err());
    }

    #[test]
    fn swiglu_zero_input_is_zero() {
        let x = Tensor::zeros(vec![2, 3]);
        let w1 = Tensor::filled(vec![3, 4], 0.3);
        let w3 = Tensor::filled(vec![3, 4], -0.2);
        let w2 = Tensor::filled(vec![4, 3], 0.1);
        let y = swiglu_ffn(&x, &w1, &w3, &w2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_zero_gate_annihilates() {
        let x = Tensor::filled(vec![2, 3], 1.5);
        let w1 = Tensor::filled(vec![3, 4], 0.3);
        let w3 = Tensor::zeros(vec![3, 4]);
        let w2 = Tensor::filled(vec![4, 3], 0.1);
        let y = swiglu_ffn(&x, &w1, &w3, &w2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_matches_composed_reference() {
        let x = Tensor::new(vec![1, 2], vec![0.4, -0.9]).unwrap();
        let w1 = Tensor::new(vec![2, 2], vec![0.2, -0.5, 0.7, 0.1]).unwrap();
        let w3 = Tensor::new(vec![2, 2], vec![-0.3, 0.6, 0.8, -0.4]).unwrap();
        let w2 = Tensor::new(vec![2, 2], vec![0.5, 0.2, -0.6, 0.9]).unwrap();
        let y = swiglu_ffn(&x, &w1, &w3, &w2).unwrap();
        // Element-by-element reference with explicit loops.
        let xa = [
            0.4 * 0.2 + -0.9 * 0.7, // x·w1 col 0
            0.4 * -0.5 + -0.9 * 0.1,
        ];
        let xb = [0.4 * -0.3 + -0.9 * 0.8, 0.4 * 0.6 + -0.9 * -0.4];
        let g = [silu(xa[0]) * xb[0], silu(xa[1]) * xb[1]];
        let want = [g[0] * 0.5 + g[1] * -0.6, g[0] * 0.2 + g[1] * 0.9];
        for (got, w) in y.data().iter().zip(want) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::filled(vec![3, 4], 0.25);
        let loss = cross_entropy(&logits, &[0, 3, 1]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct() {
        let mut data = vec![0.0; 8];
        data[2] = 1e4;
        data[4 + 1] = 1e4;
        let logits = Tensor::new(vec![2, 4], data).unwrap();
        let loss = cross_entropy(&logits, &[2, 1]).unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_per_row_formula() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let data: Vec<f64> = (0..35).map(|_| next()).collect();
        let logits = Tensor::new(vec![5, 7], data.clone()).unwrap();
        let targets = [6usize, 0, 3, 2, 5];
        let loss = cross_entropy(&logits, &targets).unwrap();
        let mut want = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &data[r * 7..(r + 1) * 7];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            want += -(row[y].exp() / z).ln();
        }
        want /= 5.0;
        assert!((loss - want).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let logits = Tensor::zeros(vec![2, 4]);
        assert!(matches!(
            cross_entropy(&logits, &[1, 4]),
            Err(Error::TargetOutOfRange { index: 4, vocab: 4 })
        ));
    }

    #[test]
    fn tensor_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
