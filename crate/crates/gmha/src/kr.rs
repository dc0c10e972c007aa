//! Key-reuse value derivation: how MFA-KR turns cached key rows into value
//! rows at use time. Values are never cached; every variant is a pure
//! function of the key cache.

use crate::arch::KrVariant;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Derive value rows from key rows (both T×C).
///
/// * vanilla:    `v = k`
/// * extra_proj: `v = k·N`
/// * residual:   `v = k + k·N`
/// * gated:      `v = k + α ⊙ (k·N)` (with `α = 0` this is exactly `v = k`)
pub fn kr_value_from_key(
    variant: KrVariant,
    keys: &Tensor,
    n: Option<&Tensor>,
    alpha: Option<&Tensor>,
) -> Result<Tensor> {
    check_kr_args(variant, n.is_some(), alpha.is_some())?;
    let (_, c) = keys.dims2()?;
    match variant {
        KrVariant::Vanilla => Ok(keys.clone()),
        KrVariant::ExtraProj => keys.matmul(n.unwrap()),
        KrVariant::Residual => keys.add(&keys.matmul(n.unwrap())?),
        KrVariant::Gated => {
            let alpha = alpha.unwrap();
            if alpha.shape() != [c] {
                return Err(Error::Dim(format!(
                    "gate vector shape {:?}, expected [{c}]",
                    alpha.shape()
                )));
            }
            let projected = keys.matmul(n.unwrap())?;
            let (t, _) = keys.dims2()?;
            let mut data = keys.data().to_vec();
            for r in 0..t {
                for j in 0..c {
                    data[r * c + j] += alpha.data()[j] * projected.data()[r * c + j];
                }
            }
            Tensor::new(vec![t, c], data)
        }
    }
}

/// Graph version used by the differentiable forward path; same math as
/// [`kr_value_from_key`], expressed in recorded ops.
pub(crate) fn build_kr_value(
    graph: &mut Graph,
    variant: KrVariant,
    keys: NodeId,
    n: Option<NodeId>,
    alpha: Option<NodeId>,
) -> Result<NodeId> {
    check_kr_args(variant, n.is_some(), alpha.is_some())?;
    match variant {
        KrVariant::Vanilla => Ok(keys),
        KrVariant::ExtraProj => graph.matmul(keys, n.unwrap()),
        KrVariant::Residual => {
            let projected = graph.matmul(keys, n.unwrap())?;
            graph.add(keys, projected)
        }
        KrVariant::Gated => {
            let projected = graph.matmul(keys, n.unwrap())?;
            let gated = graph.mul_rowvec(projected, alpha.unwrap())?;
            graph.add(keys, gated)
        }
    }
}

fn check_kr_args(variant: KrVariant, has_n: bool, has_alpha: bool) -> Result<()> {
    if variant.has_proj() != has_n {
        return Err(Error::Config(format!(
            "kr variant {} {} a projection matrix",
            variant.name(),
            if variant.has_proj() { "requires" } else { "does not take" }
        )));
    }
    if variant.has_gate() != has_alpha {
        return Err(Error::Config(format!(
            "kr variant {} {} a gate vector",
            variant.name(),
            if variant.has_gate() { "requires" } else { "does not take" }
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::random_tensor;

    fn keys() -> Tensor {
        Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.43).sin()).collect()).unwrap()
    }

    #[test]
    fn vanilla_is_bit_identical_to_keys() {
        let k = keys();
        let v = kr_value_from_key(KrVariant::Vanilla, &k, None, None).unwrap();
        assert_eq!(k.data(), v.data());
    }

    #[test]
    fn zero_gate_reduces_to_keys_exactly() {
        let k = keys();
        let n = random_tensor(&[4, 4], 0.5, 3);
        let alpha = Tensor::zeros(vec![4]);
        let v = kr_value_from_key(KrVariant::Gated, &k, Some(&n), Some(&alpha)).unwrap();
        assert_eq!(k.data(), v.data());
    }

    #[test]
    fn unit_gate_equals_residual() {
        let k = keys();
        let n = random_tensor(&[4, 4], 0.5, 9);
        let alpha = Tensor::filled(vec![4], 1.0);
        let gated = kr_value_from_key(KrVariant::Gated, &k, Some(&n), Some(&alpha)).unwrap();
        let residual = kr_value_from_key(KrVariant::Residual, &k, Some(&n), None).unwrap();
        assert!(gated.max_abs_diff(&residual).unwrap() < 1e-12);
    }

    #[test]
    fn gate_vector_rejected_for_non_gated_variants() {
        let k = keys();
        let n = random_tensor(&[4, 4], 0.5, 9);
        let alpha = Tensor::zeros(vec![4]);
        for variant in [KrVariant::Vanilla, KrVariant::ExtraProj, KrVariant::Residual] {
            let n_arg = variant.has_proj().then_some(&n);
            assert!(kr_value_from_key(variant, &k, n_arg, Some(&alpha)).is_err());
        }
    }

    #[test]
    fn graph_and_plain_paths_agree() {
        let k = keys();
        let n = random_tensor(&[4, 4], 0.5, 21);
        let alpha = random_tensor(&[4], 0.5, 22);
        for variant in KrVariant::ALL {
            let n_arg = variant.has_proj().then_some(&n);
            let a_arg = variant.has_gate().then_some(&alpha);
            let plain = kr_value_from_key(variant, &k, n_arg, a_arg).unwrap();

            let mut g = Graph::new();
            let kid = g.leaf(k.clone(), false);
            let nid = variant.has_proj().then(|| g.leaf(n.clone(), false));
            let aid = variant.has_gate().then(|| g.leaf(alpha.clone(), false));
            let vid = build_kr_value(&mut g, variant, kid, nid, aid).unwrap();
            assert!(g.value(vid).max_abs_diff(&plain).unwrap() < 1e-15);
        }
    }
}
