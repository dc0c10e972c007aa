//! Closed-form capacity and memory accounting per architecture, cross-checked
//! against actually constructed weight sets.
//!
//! Per-layer figures (cache in elements, parameters in scalars):
//!
//! | arch   | cache     | parameters                    | heads | FRH | SLSD | TER |
//! |--------|-----------|-------------------------------|-------|-----|------|-----|
//! | FPBA   | 2H²       | 2H³                           | H     | H   | H    | H²  |
//! | MHA    | 2H        | 4H²                           | n     | d   | H    | nd  |
//! | MQA    | 2d        | (2+2/n)H²                     | n     | d   | d    | nd  |
//! | GQA    | 2gd       | (2+2g/n)H²                    | n     | d   | gd   | nd  |
//! | MLA    | 2C+d_r    | H(3C+d_r+md) + mC(3d+d_r)     | m     | d   | C    | md  |
//! | MFA    | 2C        | H(3C+mC) + mC²                | m     | C   | C    | mC  |
//! | MFA-KR | C         | MFA − HC (+C² with N, +C gated) | m   | C   | C    | mC  |

use serde::{Deserialize, Serialize};

use crate::arch::{ArchKind, ArchSpec, ModelDims};
use crate::error::{Error, Result};
use crate::kvcache::cache_bytes_per_token;
use crate::weights::expected_shapes;

/// One architecture's realized capacity/memory row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub arch: String,
    pub kv_bytes_per_token: usize,
    pub param_count_formula: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_count_measured: Option<usize>,
    pub heads: usize,
    /// Factorization rank per head.
    pub frh: usize,
    /// Shared latent subspace dimension.
    pub slsd: usize,
    /// Total effective rank: heads × FRH.
    pub ter: usize,
}

/// Attention-module parameter count by enumerating the canonical weight
/// shape set and summing element counts. Verification twin of
/// [`param_count_formula`].
pub fn count_params(spec: &ArchSpec, dims: &ModelDims) -> Result<usize> {
    Ok(expected_shapes(spec, dims)?
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum())
}

/// Closed-form attention parameter count per the table above.
pub fn param_count_formula(spec: &ArchSpec, dims: &ModelDims) -> Result<usize> {
    dims.validate(spec)?;
    let h = dims.hidden;
    let d = dims.head_dim;
    let c = dims.latent_c;
    let m = dims.n_heads;
    let g = dims.groups_g;
    let dr = dims.rope_dim_dr;
    Ok(match spec.kind {
        ArchKind::Fpba => 2 * h * h * h,
        ArchKind::Mha => 4 * h * h,
        // (2 + 2/n)H² and (2 + 2g/n)H², kept in integer arithmetic.
        ArchKind::Mqa => 2 * h * h + 2 * h * h / m,
        ArchKind::Gqa => 2 * h * h + 2 * g * h * h / m,
        ArchKind::Mla => h * (3 * c + dr + m * d) + m * c * (3 * d + dr),
        ArchKind::Mfa => {
            if spec.factored_q {
                h * (3 * c + m * c) + m * c * c
            } else {
                // Per-head direct query projections replace S_q + Q_c.
                h * (2 * c + 2 * m * c)
            }
        }
        ArchKind::MfaKr => {
            let variant = spec.kr_variant();
            let mut p = h * (2 * c + m * c) + m * c * c;
            if variant.has_proj() {
                p += c * c;
            }
            if variant.has_gate() {
                p += c;
            }
            p
        }
    })
}

fn rank_columns(spec: &ArchSpec, dims: &ModelDims) -> (usize, usize, usize) {
    let h = dims.hidden;
    let d = dims.head_dim;
    let c = dims.latent_c;
    let g = dims.groups_g;
    // (frh, slsd) per architecture; ter = heads × frh.
    let (frh, slsd) = match spec.kind {
        ArchKind::Fpba => (h, h),
        ArchKind::Mha => (d, h),
        ArchKind::Mqa => (d, d),
        ArchKind::Gqa => (d, g * d),
        ArchKind::Mla => (d, c),
        ArchKind::Mfa | ArchKind::MfaKr => (c, c),
    };
    let heads = dims.effective_heads(spec.kind);
    (heads, frh, slsd)
}

/// Realize the full accounting row for a configuration, measuring the
/// constructed weight set against the closed form.
pub fn capacity_report(
    spec: &ArchSpec,
    dims: &ModelDims,
    elem_bytes: usize,
) -> Result<CapacityReport> {
    let formula = param_count_formula(spec, dims)?;
    let measured = count_params(spec, dims)?;
    if measured != formula {
        return Err(Error::Config(format!(
            "parameter accounting mismatch for {}: formula {formula}, measured {measured}",
            spec.kind
        )));
    }
    let (heads, frh, slsd) = rank_columns(spec, dims);
    Ok(CapacityReport {
        arch: spec.label(),
        kv_bytes_per_token: cache_bytes_per_token(spec, dims, elem_bytes)?,
        param_count_formula: formula,
        param_count_measured: Some(measured),
        heads,
        frh,
        slsd,
        ter: heads * frh,
    })
}

/// Whole-model parameter count for a dense decoder stack built on this
/// attention module: token embedding, per-layer attention + two RMSNorm
/// gains + SwiGLU feed-forward, final norm, untied output projection.
pub fn model_param_count(spec: &ArchSpec, dims: &ModelDims) -> Result<usize> {
    let attn = count_params(spec, dims)?;
    let h = dims.hidden;
    let per_layer = attn + 2 * h + 3 * h * dims.ffn;
    Ok(dims.vocab * h + dims.layers * per_layer + h + h * dims.vocab)
}

impl CapacityReport {
    /// Frozen CSV column order.
    pub const CSV_HEADER: &'static str =
        "arch,kv_bytes_per_token,attn_params,model_params,heads,frh,slsd,ter";
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::KrVariant;

    fn dims(hidden: usize) -> ModelDims {
        ModelDims {
            hidden,
            layers: 1,
            n_heads: 1,
            head_dim: hidden,
            latent_c: 0,
            groups_g: 1,
            rope_dim_dr: 0,
            vocab: 16,
            ffn: 8,
        }
    }

    #[test]
    fn hand_evaluated_mha_and_mqa_params() {
        let mut d = dims(4);
        d.n_heads = 2;
        d.head_dim = 2;
        assert_eq!(
            param_count_formula(&ArchSpec::new(ArchKind::Mha), &d).unwrap(),
            64
        );
        assert_eq!(
            param_count_formula(&ArchSpec::new(ArchKind::Mqa), &d).unwrap(),
            48
        );
        assert_eq!(count_params(&ArchSpec::new(ArchKind::Mha), &d).unwrap(), 64);
        assert_eq!(count_params(&ArchSpec::new(ArchKind::Mqa), &d).unwrap(), 48);
    }

    #[test]
    fn gqa_enumeration_matches_formula() {
        let mut d = dims(8);
        d.n_heads = 4;
        d.head_dim = 2;
        d.groups_g = 2;
        let spec = ArchSpec::new(ArchKind::Gqa);
        assert_eq!(param_count_formula(&spec, &d).unwrap(), 192);
        assert_eq!(count_params(&spec, &d).unwrap(), 192);
    }

    #[test]
    fn mla_enumeration_matches_formula() {
        let mut d = dims(8);
        d.n_heads = 2;
        d.head_dim = 4;
        d.latent_c = 6;
        d.rope_dim_dr = 2;
        let spec = ArchSpec::new(ArchKind::Mla);
        // H(3C + d_r + m·d) + m·C(3d + d_r) = 8·28 + 12·14
        assert_eq!(param_count_formula(&spec, &d).unwrap(), 392);
        assert_eq!(count_params(&spec, &d).unwrap(), 392);
    }

    #[test]
    fn mfa_measured_equals_formula() {
        let mut d = dims(8);
        d.n_heads = 3;
        d.head_dim = 4;
        d.latent_c = 4;
        let spec = ArchSpec::new(ArchKind::Mfa);
        // H(3C + mC) + mC² = 8·24 + 48
        assert_eq!(param_count_formula(&spec, &d).unwrap(), 240);
        let report = capacity_report(&spec, &d, 2).unwrap();
        assert_eq!(report.param_count_measured, Some(240));
    }

    #[test]
    fn key_reuse_variants_count_their_own_extras() {
        let mut d = dims(8);
        d.n_heads = 3;
        d.head_dim = 4;
        d.latent_c = 4;
        let base = 8 * (2 * 4 + 3 * 4) + 3 * 16; // S_q,S_k + per-head O + per-head Q
        let expect = [
            (KrVariant::Vanilla, base),
            (KrVariant::ExtraProj, base + 16),
            (KrVariant::Residual, base + 16),
            (KrVariant::Gated, base + 16 + 4),
        ];
        for (variant, want) in expect {
            let spec = ArchSpec::new(ArchKind::MfaKr).with_kr_variant(variant);
            assert_eq!(param_count_formula(&spec, &d).unwrap(), want, "{variant:?}");
            assert_eq!(count_params(&spec, &d).unwrap(), want, "{variant:?}");
        }
    }

    #[test]
    fn unfactored_query_costs_more_parameters() {
        let mut d = dims(8);
        d.n_heads = 3;
        d.head_dim = 4;
        d.latent_c = 4;
        let factored = param_count_formula(&ArchSpec::new(ArchKind::Mfa), &d).unwrap();
        let direct = param_count_formula(
            &ArchSpec::new(ArchKind::Mfa).with_factored_q(false),
            &d,
        )
        .unwrap();
        assert!(direct > factored);
        assert_eq!(
            count_params(&ArchSpec::new(ArchKind::Mfa).with_factored_q(false), &d).unwrap(),
            direct
        );
    }

    #[test]
    fn fpba_row_is_cubic() {
        let d = dims(4);
        let spec = ArchSpec::new(ArchKind::Fpba);
        let r = capacity_report(&spec, &d, 2).unwrap();
        assert_eq!(r.param_count_formula, 128); // 2·4³
        assert_eq!(r.kv_bytes_per_token, 2 * 1 * 2 * 16); // elem·L·2H²
        assert_eq!(r.heads, 4);
        assert_eq!(r.frh, 4);
        assert_eq!(r.slsd, 4);
        assert_eq!(r.ter, 16);
    }

    #[test]
    fn ter_grows_with_heads_and_latent_width() {
        let mut d = dims(8);
        d.n_heads = 3;
        d.head_dim = 4;
        d.latent_c = 4;
        let spec = ArchSpec::new(ArchKind::Mfa);
        let base = capacity_report(&spec, &d, 2).unwrap();
        let mut more_heads = d.clone();
        more_heads.n_heads = 4;
        assert!(capacity_report(&spec, &more_heads, 2).unwrap().ter > base.ter);
        // Cache stays put as heads grow.
        assert_eq!(
            capacity_report(&spec, &more_heads, 2).unwrap().kv_bytes_per_token,
            base.kv_bytes_per_token
        );
        let mut wider = d.clone();
        wider.latent_c = 8;
        wider.head_dim = 8;
        assert!(capacity_report(&spec, &wider, 2).unwrap().ter > base.ter);
    }
}
