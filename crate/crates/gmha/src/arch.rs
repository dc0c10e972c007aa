//! Architecture descriptors: model dimensions and the discriminated choice
//! of attention variant with its per-variant options.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All architecture hyperparameters. Field meaning varies slightly per
/// variant: `head_dim` is the per-head projection width (and must equal
/// `latent_c` for MFA/MFA-KR, where each head works at the full latent rank);
/// `groups_g` matters only for GQA; `rope_dim_dr` only for MLA's decoupled
/// rotary path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Hidden (embedding) size H.
    pub hidden: usize,
    /// Layer count L.
    pub layers: usize,
    /// Attention head count (n or m depending on variant).
    pub n_heads: usize,
    /// Per-head dimension d.
    pub head_dim: usize,
    /// Shared latent dimension C (MLA, MFA, MFA-KR).
    #[serde(default)]
    pub latent_c: usize,
    /// Key/value group count g (GQA).
    #[serde(default = "one")]
    pub groups_g: usize,
    /// Decoupled rotary dimension d_r (MLA).
    #[serde(default)]
    pub rope_dim_dr: usize,
    /// Vocabulary size V.
    pub vocab: usize,
    /// Feed-forward inner size F.
    pub ffn: usize,
}

fn one() -> usize {
    1
}

impl ModelDims {
    /// Validate the dimension set for a particular architecture.
    pub fn validate(&self, spec: &ArchSpec) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("groups_g", self.groups_g),
            ("vocab", self.vocab),
            ("ffn", self.ffn),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        match spec.kind {
            ArchKind::Mha | ArchKind::Mqa | ArchKind::Gqa => {
                if self.n_heads * self.head_dim != self.hidden {
                    return Err(Error::Config(format!(
                        "{:?} needs n_heads*head_dim == hidden, got {}*{} != {}",
                        spec.kind, self.n_heads, self.head_dim, self.hidden
                    )));
                }
                if spec.kind == ArchKind::Gqa && self.n_heads % self.groups_g != 0 {
                    return Err(Error::Config(format!(
                        "groups_g={} must divide n_heads={}",
                        self.groups_g, self.n_heads
                    )));
                }
            }
            ArchKind::Mla => {
                if self.latent_c == 0 {
                    return Err(Error::Config("MLA needs latent_c > 0".into()));
                }
                if self.latent_c < self.head_dim {
                    return Err(Error::Config(format!(
                        "MLA needs latent_c >= head_dim, got {} < {}",
                        self.latent_c, self.head_dim
                    )));
                }
                if self.rope_dim_dr % 2 != 0 {
                    return Err(Error::Config(format!(
                        "rope_dim_dr must be even, got {}",
                        self.rope_dim_dr
                    )));
                }
            }
            ArchKind::Mfa | ArchKind::MfaKr => {
                if self.latent_c == 0 {
                    return Err(Error::Config("MFA needs latent_c > 0".into()));
                }
                if self.head_dim != self.latent_c {
                    return Err(Error::Config(format!(
                        "MFA heads work at latent rank: head_dim {} must equal latent_c {}",
                        self.head_dim, self.latent_c
                    )));
                }
            }
            ArchKind::Fpba => {}
        }
        match spec.pos_embed {
            PosEmbed::Rope { base } => {
                if base <= 1.0 {
                    return Err(Error::Config(format!("rope base must exceed 1, got {base}")));
                }
                if spec.kind == ArchKind::Mla && self.rope_dim_dr == 0 {
                    return Err(Error::Config(
                        "MLA with rotary embedding needs rope_dim_dr > 0".into(),
                    ));
                }
                let rotated = self.rotated_dim(spec);
                if rotated % 2 != 0 {
                    return Err(Error::Config(format!(
                        "rotary embedding needs an even rotated dimension, got {rotated}"
                    )));
                }
            }
            PosEmbed::None | PosEmbed::Alibi => {}
        }
        spec.validate()
    }

    /// Dimension that rotary embedding acts on for this architecture.
    pub(crate) fn rotated_dim(&self, spec: &ArchSpec) -> usize {
        match spec.kind {
            ArchKind::Fpba => self.hidden,
            ArchKind::Mha | ArchKind::Mqa | ArchKind::Gqa => self.head_dim,
            ArchKind::Mla => self.rope_dim_dr,
            ArchKind::Mfa | ArchKind::MfaKr => self.latent_c,
        }
    }

    /// Head count as reported in capacity accounting (FPBA uses one channel
    /// per hidden dimension).
    pub fn effective_heads(&self, kind: ArchKind) -> usize {
        match kind {
            ArchKind::Fpba => self.hidden,
            _ => self.n_heads,
        }
    }
}

/// Attention architecture family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Fpba,
    Mha,
    Mqa,
    Gqa,
    Mla,
    Mfa,
    MfaKr,
}

impl ArchKind {
    pub const ALL: [ArchKind; 7] = [
        ArchKind::Fpba,
        ArchKind::Mha,
        ArchKind::Mqa,
        ArchKind::Gqa,
        ArchKind::Mla,
        ArchKind::Mfa,
        ArchKind::MfaKr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::Fpba => "fpba",
            ArchKind::Mha => "mha",
            ArchKind::Mqa => "mqa",
            ArchKind::Gqa => "gqa",
            ArchKind::Mla => "mla",
            ArchKind::Mfa => "mfa",
            ArchKind::MfaKr => "mfa-kr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fpba" => Ok(ArchKind::Fpba),
            "mha" => Ok(ArchKind::Mha),
            "mqa" => Ok(ArchKind::Mqa),
            "gqa" => Ok(ArchKind::Gqa),
            "mla" => Ok(ArchKind::Mla),
            "mfa" => Ok(ArchKind::Mfa),
            "mfa-kr" | "mfakr" | "mfa_kr" => Ok(ArchKind::MfaKr),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How MFA-KR derives values from cached keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KrVariant {
    /// `v = k`.
    Vanilla,
    /// `v = k·N`.
    ExtraProj,
    /// `v = k + k·N`.
    Residual,
    /// `v = k + α ⊙ (k·N)`, α zero-initialized.
    Gated,
}

impl KrVariant {
    pub const ALL: [KrVariant; 4] = [
        KrVariant::Vanilla,
        KrVariant::ExtraProj,
        KrVariant::Residual,
        KrVariant::Gated,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            KrVariant::Vanilla => "vanilla",
            KrVariant::ExtraProj => "extra_proj",
            KrVariant::Residual => "residual",
            KrVariant::Gated => "gated",
        }
    }

    /// Whether the shared `N` projection exists for this variant.
    pub fn has_proj(&self) -> bool {
        !matches!(self, KrVariant::Vanilla)
    }

    pub fn has_gate(&self) -> bool {
        matches!(self, KrVariant::Gated)
    }
}

/// Positional embedding choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum PosEmbed {
    None,
    Rope { base: f64 },
    Alibi,
}

impl PosEmbed {
    pub const ROPE_DEFAULT_BASE: f64 = 500_000.0;

    pub fn rope_default() -> Self {
        PosEmbed::Rope { base: Self::ROPE_DEFAULT_BASE }
    }
}

/// Discriminated architecture choice plus per-architecture options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Required iff `kind == MfaKr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kr_variant: Option<KrVariant>,
    /// MFA only: `false` swaps the shared-latent query path for per-head
    /// direct projections (key/value path unchanged).
    #[serde(default = "default_true")]
    pub factored_q: bool,
    #[serde(default = "PosEmbed::rope_default")]
    pub pos_embed: PosEmbed,
    /// Overrides the 1/sqrt(score dot dimension) default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_scale: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl ArchSpec {
    pub fn new(kind: ArchKind) -> Self {
        Self {
            kind,
            kr_variant: if kind == ArchKind::MfaKr {
                Some(KrVariant::Gated)
            } else {
                None
            },
            factored_q: true,
            pos_embed: PosEmbed::None,
            score_scale: None,
        }
    }

    pub fn with_pos_embed(mut self, pos: PosEmbed) -> Self {
        self.pos_embed = pos;
        self
    }

    pub fn with_kr_variant(mut self, variant: KrVariant) -> Self {
        self.kr_variant = Some(variant);
        self
    }

    pub fn with_factored_q(mut self, factored: bool) -> Self {
        self.factored_q = factored;
        self
    }

    pub fn with_score_scale(mut self, scale: f64) -> Self {
        self.score_scale = Some(scale);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.kr_variant) {
            (ArchKind::MfaKr, None) => {
                return Err(Error::Config("MFA-KR requires a kr_variant".into()))
            }
            (ArchKind::MfaKr, Some(_)) => {}
            (_, Some(v)) => {
                return Err(Error::Config(format!(
                    "kr_variant {} only applies to MFA-KR",
                    v.name()
                )))
            }
            (_, None) => {}
        }
        if !self.factored_q && self.kind != ArchKind::Mfa {
            return Err(Error::Config(
                "factored_q = false only applies to MFA".into(),
            ));
        }
        if let Some(s) = self.score_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("score_scale must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn kr_variant(&self) -> KrVariant {
        self.kr_variant.unwrap_or(KrVariant::Gated)
    }

    /// Label used in reports: the kind plus the KR variant when relevant.
    pub fn label(&self) -> String {
        match (self.kind, self.kr_variant) {
            (ArchKind::MfaKr, Some(v)) if v != KrVariant::Gated => {
                format!("mfa-kr({})", v.name())
            }
            _ => self.kind.name().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(hidden: usize, n: usize, d: usize) -> ModelDims {
        ModelDims {
            hidden,
            layers: 2,
            n_heads: n,
            head_dim: d,
            latent_c: 0,
            groups_g: 1,
            rope_dim_dr: 0,
            vocab: 64,
            ffn: 32,
        }
    }

    #[test]
    fn mha_requires_heads_times_dim_equals_hidden() {
        let spec = ArchSpec::new(ArchKind::Mha);
        assert!(dims(8, 2, 4).validate(&spec).is_ok());
        assert!(dims(8, 2, 3).validate(&spec).is_err());
    }

    #[test]
    fn gqa_requires_group_divisibility() {
        let spec = ArchSpec::new(ArchKind::Gqa);
        let mut d = dims(8, 4, 2);
        d.groups_g = 2;
        assert!(d.validate(&spec).is_ok());
        d.groups_g = 3;
        assert!(d.validate(&spec).is_err());
    }

    #[test]
    fn mla_with_rope_needs_rotary_dims() {
        let spec = ArchSpec::new(ArchKind::Mla).with_pos_embed(PosEmbed::rope_default());
        let mut d = dims(8, 2, 2);
        d.latent_c = 4;
        assert!(d.validate(&spec).is_err());
        d.rope_dim_dr = 2;
        assert!(d.validate(&spec).is_ok());
    }

    #[test]
    fn mfa_head_dim_is_latent() {
        let spec = ArchSpec::new(ArchKind::Mfa);
        let mut d = dims(8, 3, 4);
        d.latent_c = 4;
        assert!(d.validate(&spec).is_ok());
        d.head_dim = 5;
        assert!(d.validate(&spec).is_err());
    }

    #[test]
    fn kr_variant_only_on_mfa_kr() {
        let mut spec = ArchSpec::new(ArchKind::Mfa);
        spec.kr_variant = Some(KrVariant::Gated);
        assert!(spec.validate().is_err());
        let mut spec = ArchSpec::new(ArchKind::MfaKr);
        assert!(spec.validate().is_ok());
        spec.kr_variant = None;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unfactored_query_is_mfa_only() {
        let spec = ArchSpec::new(ArchKind::Mha).with_factored_q(false);
        assert!(spec.validate().is_err());
        let spec = ArchSpec::new(ArchKind::Mfa).with_factored_q(false);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn arch_spec_round_trips_through_json() {
        let spec = ArchSpec::new(ArchKind::MfaKr)
            .with_kr_variant(KrVariant::Residual)
            .with_pos_embed(PosEmbed::Rope { base: 500_000.0 });
        let s = serde_json::to_string(&spec).unwrap();
        let back: ArchSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
    }
}
