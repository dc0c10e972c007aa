//! Attention weight sets: the canonical name/shape enumeration per
//! architecture, shape auditing, and deterministic random construction.
//!
//! Every weight's shape is fully determined by `(ArchSpec, ModelDims)`;
//! [`expected_shapes`] is the single source of that mapping and feeds weight
//! construction, auditing, and parameter counting alike.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{ArchKind, ArchSpec, ModelDims};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Named attention weights for one layer.
#[derive(Debug, Clone, Default)]
pub struct AttnWeights {
    map: BTreeMap<String, Tensor>,
}

/// Weight leaves registered on a graph, keyed by weight name.
pub type WireMap = BTreeMap<String, NodeId>;

/// One discrepancy found by [`audit_shapes`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeViolation {
    pub name: String,
    /// Expected shape; `None` means the weight should not exist.
    pub expected: Option<Vec<usize>>,
    /// Found shape; `None` means the weight is missing.
    pub found: Option<Vec<usize>>,
}

impl std::fmt::Display for ShapeViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (&self.expected, &self.found) {
            (Some(e), None) => write!(f, "{}: missing, expected shape {e:?}", self.name),
            (None, Some(g)) => write!(f, "{}: unexpected weight of shape {g:?}", self.name),
            (Some(e), Some(g)) => {
                write!(f, "{}: shape {g:?}, expected {e:?}", self.name)
            }
            (None, None) => write!(f, "{}: (no violation)", self.name),
        }
    }
}

/// Canonical (name, shape) list for an architecture, in sorted name order.
pub fn expected_shapes(spec: &ArchSpec, dims: &ModelDims) -> Result<Vec<(String, Vec<usize>)>> {
    dims.validate(spec)?;
    let h = dims.hidden;
    let d = dims.head_dim;
    let c = dims.latent_c;
    let dr = dims.rope_dim_dr;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    match spec.kind {
        ArchKind::Fpba => {
            for ch in 0..h {
                out.push((format!("w.{ch}"), vec![h, h]));
                out.push((format!("u.{ch}"), vec![h, h]));
            }
        }
        ArchKind::Mha => {
            for head in 0..dims.n_heads {
                out.push((format!("q.{head}"), vec![h, d]));
                out.push((format!("k.{head}"), vec![h, d]));
                out.push((format!("v.{head}"), vec![h, d]));
                out.push((format!("o.{head}"), vec![h, d]));
            }
        }
        ArchKind::Mqa => {
            out.push(("k".into(), vec![h, d]));
            out.push(("v".into(), vec![h, d]));
            for head in 0..dims.n_heads {
                out.push((format!("q.{head}"), vec![h, d]));
                out.push((format!("o.{head}"), vec![h, d]));
            }
        }
        ArchKind::Gqa => {
            for group in 0..dims.groups_g {
                out.push((format!("k.{group}"), vec![h, d]));
                out.push((format!("v.{group}"), vec![h, d]));
            }
            for head in 0..dims.n_heads {
                out.push((format!("q.{head}"), vec![h, d]));
                out.push((format!("o.{head}"), vec![h, d]));
            }
        }
        ArchKind::Mla => {
            out.push(("s_q".into(), vec![h, c]));
            out.push(("s_k".into(), vec![h, c]));
            out.push(("s_v".into(), vec![h, c]));
            if dr > 0 {
                out.push(("w_kr".into(), vec![h, dr]));
            }
            for head in 0..dims.n_heads {
                out.push((format!("q.{head}"), vec![c, d]));
                out.push((format!("k.{head}"), vec![c, d]));
                out.push((format!("v.{head}"), vec![c, d]));
                out.push((format!("o.{head}"), vec![h, d]));
                if dr > 0 {
                    out.push((format!("q_rope.{head}"), vec![c, dr]));
                }
            }
        }
        ArchKind::Mfa => {
            out.push(("s_k".into(), vec![h, c]));
            out.push(("s_v".into(), vec![h, c]));
            if spec.factored_q {
                out.push(("s_q".into(), vec![h, c]));
            }
            for head in 0..dims.n_heads {
                if spec.factored_q {
                    out.push((format!("q.{head}"), vec![c, c]));
                } else {
                    out.push((format!("w_q.{head}"), vec![h, c]));
                }
                out.push((format!("o.{head}"), vec![h, c]));
            }
        }
        ArchKind::MfaKr => {
            out.push(("s_q".into(), vec![h, c]));
            out.push(("s_k".into(), vec![h, c]));
            let variant = spec.kr_variant();
            if variant.has_proj() {
                out.push(("kr_n".into(), vec![c, c]));
            }
            if variant.has_gate() {
                out.push(("kr_alpha".into(), vec![c]));
            }
            for head in 0..dims.n_heads {
                out.push((format!("q.{head}"), vec![c, c]));
                out.push((format!("o.{head}"), vec![h, c]));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Validate a complete weight set, returning the full violation list
/// (missing, extra, and mis-shaped weights), never just the first.
pub fn audit_shapes(
    spec: &ArchSpec,
    dims: &ModelDims,
    weights: &AttnWeights,
) -> Result<Vec<ShapeViolation>> {
    let expected = expected_shapes(spec, dims)?;
    let mut violations = Vec::new();
    let mut seen: BTreeMap<&str, &[usize]> = BTreeMap::new();
    for (name, tensor) in weights.iter() {
        seen.insert(name.as_str(), tensor.shape());
    }
    for (name, shape) in &expected {
        match seen.remove(name.as_str()) {
            None => violations.push(ShapeViolation {
                name: name.clone(),
                expected: Some(shape.clone()),
                found: None,
            }),
            Some(found) if found != shape.as_slice() => violations.push(ShapeViolation {
                name: name.clone(),
                expected: Some(shape.clone()),
                found: Some(found.to_vec()),
            }),
            Some(_) => {}
        }
    }
    for (name, found) in seen {
        violations.push(ShapeViolation {
            name: name.to_string(),
            expected: None,
            found: Some(found.to_vec()),
        });
    }
    Ok(violations)
}

impl AttnWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing attention weight '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing attention weight '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar parameters in the set.
    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Deterministic random weight set for oracles and equivalence trials.
    /// Each tensor draws from its own name-keyed stream, so shared weight
    /// names coincide across architectures under the same seed.
    pub fn random(spec: &ArchSpec, dims: &ModelDims, seed: u64) -> Result<Self> {
        let mut w = Self::new();
        for (name, shape) in expected_shapes(spec, dims)? {
            let fan_in = shape[0];
            let std = 1.0 / (fan_in as f64).sqrt();
            w.insert(name.clone(), random_tensor(&shape, std, tensor_seed(seed, &name)));
        }
        Ok(w)
    }

    /// Register every weight as a graph leaf.
    pub fn wire(&self, graph: &mut Graph, trainable: bool) -> WireMap {
        self.map
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t.clone(), trainable)))
            .collect()
    }
}

/// Stable per-tensor stream: FNV-1a over the name, mixed with the run seed.
pub(crate) fn tensor_seed(seed: u64, name: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in name.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    seed ^ hash
}

pub(crate) fn random_tensor(shape: &[usize], std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized by construction")
}

/// Deterministic random activations, e.g. a T×H input block.
pub fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xa5a5_5a5a_1234_8765);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::KrVariant;

    fn mfa_dims() -> ModelDims {
        ModelDims {
            hidden: 8,
            layers: 1,
            n_heads: 2,
            head_dim: 4,
            latent_c: 4,
            groups_g: 1,
            rope_dim_dr: 0,
            vocab: 16,
            ffn: 8,
        }
    }

    #[test]
    fn complete_mfa_set_passes_audit() {
        let spec = ArchSpec::new(ArchKind::Mfa);
        let dims = mfa_dims();
        let w = AttnWeights::random(&spec, &dims, 7).unwrap();
        assert!(audit_shapes(&spec, &dims, &w).unwrap().is_empty());
    }

    #[test]
    fn missing_shared_value_projection_is_one_violation() {
        let spec = ArchSpec::new(ArchKind::Mfa);
        let dims = mfa_dims();
        let mut w = AttnWeights::random(&spec, &dims, 7).unwrap();
        w.map.remove("s_v");
        let violations = audit_shapes(&spec, &dims, &w).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].name, "s_v");
        assert!(violations[0].found.is_none());
    }

    #[test]
    fn wrong_shape_reports_expected_dimensions() {
        let spec = ArchSpec::new(ArchKind::Mla);
        let mut dims = mfa_dims();
        dims.latent_c = 6;
        dims.head_dim = 4;
        let mut w = AttnWeights::random(&spec, &dims, 7).unwrap();
        w.insert("q.0", Tensor::zeros(vec![6, 5]));
        let violations = audit_shapes(&spec, &dims, &w).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].expected, Some(vec![6, 4]));
        assert_eq!(violations[0].found, Some(vec![6, 5]));
    }

    #[test]
    fn audit_reports_all_violations_not_just_first() {
        let spec = ArchSpec::new(ArchKind::Mha);
        let dims = ModelDims {
            hidden: 4,
            layers: 1,
            n_heads: 2,
            head_dim: 2,
            latent_c: 0,
            groups_g: 1,
            rope_dim_dr: 0,
            vocab: 16,
            ffn: 8,
        };
        let mut w = AttnWeights::random(&spec, &dims, 7).unwrap();
        w.map.remove("q.0");
        w.map.remove("v.1");
        w.insert("stray", Tensor::zeros(vec![1]));
        let violations = audit_shapes(&spec, &dims, &w).unwrap();
        assert_eq!(violations.len(), 3);
    }

    #[test]
    fn gated_kr_has_gate_and_proj() {
        let spec = ArchSpec::new(ArchKind::MfaKr);
        let dims = mfa_dims();
        let names: Vec<String> = expected_shapes(&spec, &dims)
            .unwrap()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert!(names.contains(&"kr_n".to_string()));
        assert!(names.contains(&"kr_alpha".to_string()));
        assert!(!names.contains(&"s_v".to_string()));
    }

    #[test]
    fn vanilla_kr_is_keys_only() {
        let spec = ArchSpec::new(ArchKind::MfaKr).with_kr_variant(KrVariant::Vanilla);
        let dims = mfa_dims();
        let names: Vec<String> = expected_shapes(&spec, &dims)
            .unwrap()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert!(!names.contains(&"kr_n".to_string()));
        assert!(!names.contains(&"kr_alpha".to_string()));
    }

    #[test]
    fn shared_names_share_draws_across_architectures() {
        let dims = mfa_dims();
        let mfa = AttnWeights::random(&ArchSpec::new(ArchKind::Mfa), &dims, 11).unwrap();
        let kr = AttnWeights::random(&ArchSpec::new(ArchKind::MfaKr), &dims, 11).unwrap();
        assert_eq!(
            mfa.get("s_k").unwrap().data(),
            kr.get("s_k").unwrap().data()
        );
        assert_eq!(
            mfa.get("q.1").unwrap().data(),
            kr.get("q.1").unwrap().data()
        );
    }
}
