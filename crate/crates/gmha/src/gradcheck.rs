//! Central-difference gradient verification for scalar functions of named
//! parameter sets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter collection with deterministic (sorted) iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter name, flat buffers matching parameter shape.
pub type GradMap = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar entries across all parameters.
    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Compare analytic gradients against central differences.
///
/// `f` evaluates the scalar objective and returns its gradients for every
/// parameter it touched; parameters it never reads may be absent from the
/// returned map and are treated as zero-gradient. Returns the maximum over
/// all parameter entries of `|grad - central_diff| / (|central_diff| + 1e-8)`.
pub fn finite_diff_gradcheck<F>(params: &ParamStore, step: f64, f: F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(f64, GradMap)>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Config(format!(
            "gradcheck step must be in (0, 1e-2], got {step}"
        )));
    }
    let (_, grads) = f(params)?;
    let mut scratch = params.clone();
    let mut worst = 0.0_f64;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let numel = params.get(name)?.numel();
        for i in 0..numel {
            let original = params.get(name)?.data()[i];

            scratch.get_mut(name)?.data_mut()[i] = original + step;
            let (up, _) = f(&scratch)?;
            scratch.get_mut(name)?.data_mut()[i] = original - step;
            let (down, _) = f(&scratch)?;
            scratch.get_mut(name)?.data_mut()[i] = original;

            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at perturbed {name}[{i}]"
                )));
            }
            let central = (up - down) / (2.0 * step);
            let analytic = grads.get(name).map_or(0.0, |g| g[i]);
            let rel = (analytic - central).abs() / (central.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn quadratic(params: &ParamStore) -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let w = g.leaf(params.get("w")?.clone(), true);
        let sq = g.mul(w, w)?;
        let loss = g.sum_all(sq)?;
        g.backward(loss)?;
        let mut grads = GradMap::new();
        grads.insert("w".into(), g.grad(w).unwrap().to_vec());
        Ok((g.value(loss).item(), grads))
    }

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let mut params = ParamStore::new();
        params.insert(
            "w",
            Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 2.5, -0.4, 0.05]).unwrap(),
        );
        let err = finite_diff_gradcheck(&params, 1e-5, quadratic).unwrap();
        assert!(err <= 1e-6, "max rel err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::filled(vec![2], 0.7));
        let err = finite_diff_gradcheck(&params, 1e-5, |_| Ok((4.25, GradMap::new()))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn step_outside_range_rejected() {
        let params = ParamStore::new();
        assert!(finite_diff_gradcheck(&params, 0.5, |_| Ok((0.0, GradMap::new()))).is_err());
        assert!(finite_diff_gradcheck(&params, 0.0, |_| Ok((0.0, GradMap::new()))).is_err());
    }

    #[test]
    fn softmax_cross_entropy_chain_passes() {
        let mut params = ParamStore::new();
        params.insert(
            "w",
            Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        );
        params.insert(
            "gamma",
            Tensor::new(vec![4], vec![1.0, 0.9, 1.1, 1.05]).unwrap(),
        );
        let f = |p: &ParamStore| -> Result<(f64, GradMap)> {
            let mut g = Graph::new();
            let x = g.leaf(
                Tensor::new(vec![3, 3], (0..9).map(|i| (i as f64 * 0.71).cos()).collect())?,
                false,
            );
            let w = g.leaf(p.get("w")?.clone(), true);
            let gamma = g.leaf(p.get("gamma")?.clone(), true);
            let y = g.matmul(x, w)?;
            let normed = g.rmsnorm(y, gamma, 1e-6)?;
            let loss = g.cross_entropy(normed, &[1, 3, 0])?;
            g.backward(loss)?;
            let mut grads = GradMap::new();
            grads.insert("w".into(), g.grad(w).unwrap().to_vec());
            grads.insert("gamma".into(), g.grad(gamma).unwrap().to_vec());
            Ok((g.value(loss).item(), grads))
        };
        let err = finite_diff_gradcheck(&params, 1e-5, f).unwrap();
        assert!(err <= 1e-6, "max rel err {err}");
    }
}
