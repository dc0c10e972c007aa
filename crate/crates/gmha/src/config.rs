//! Run configurations: named presets for the reference model families and
//! strict JSON config-file parsing.
//!
//! Presets are immutable and cover two scales: the `7b-*` family (H=2048,
//! 24 layers) and the `1b-*` dense ablation family (H=2048, 20 layers).
//! Config files are JSON documents with the same schema as [`TrainConfig`];
//! unknown keys are rejected.

use std::path::Path;

use crate::arch::{ArchKind, ArchSpec, KrVariant, ModelDims, PosEmbed};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// A resolved configuration: a label plus the full training config
/// (architecture, dimensions, optimization).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub train: TrainConfig,
}

pub const PRESET_NAMES: [&str; 11] = [
    "7b-mha",
    "7b-mfa",
    "7b-mfa-kr",
    "1b-mha",
    "1b-gqa8",
    "1b-gqa4",
    "1b-gqa2",
    "1b-mqa",
    "1b-mla",
    "1b-mfa",
    "1b-mfa-kr",
];

const PAPER_VOCAB: usize = 65_536;

fn base_dims(layers: usize) -> ModelDims {
    ModelDims {
        hidden: 2048,
        layers,
        n_heads: 16,
        head_dim: 128,
        latent_c: 0,
        groups_g: 1,
        rope_dim_dr: 0,
        vocab: PAPER_VOCAB,
        ffn: 0,
    }
}

fn reference_train(dims: ModelDims, arch: ArchSpec, peak_lr: f64, total_steps: usize, batch_tokens: usize) -> TrainConfig {
    TrainConfig {
        dims,
        arch,
        peak_lr,
        warmup_steps: 2000,
        total_steps,
        final_lr: 1e-5,
        batch_tokens,
        seq_len: 16_384,
        weight_decay: 0.1,
        grad_clip_norm: 1.0,
        adam_beta1: 0.9,
        adam_beta2: 0.95,
        adam_eps: 1e-8,
        seed: 0,
    }
}

/// Look up an immutable named preset.
pub fn preset(name: &str) -> Result<RunConfig> {
    let rope = PosEmbed::rope_default();
    let seven_b = |dims: ModelDims, arch: ArchSpec| {
        reference_train(dims, arch, 8.4e-4, 140_000, 7_300_000)
    };
    let one_b = |dims: ModelDims, arch: ArchSpec| {
        reference_train(dims, arch, 9.63e-4, 50_000, 400_000)
    };
    let train = match name {
        "7b-mha" => {
            let mut d = base_dims(24);
            d.ffn = 2624;
            seven_b(d, ArchSpec::new(ArchKind::Mha).with_pos_embed(rope))
        }
        "7b-mfa" => {
            let mut d = base_dims(24);
            d.n_heads = 18;
            d.head_dim = 256;
            d.latent_c = 256;
            d.ffn = 3008;
            seven_b(d, ArchSpec::new(ArchKind::Mfa).with_pos_embed(rope))
        }
        "7b-mfa-kr" => {
            let mut d = base_dims(24);
            d.n_heads = 18;
            d.head_dim = 256;
            d.latent_c = 256;
            d.ffn = 3016;
            seven_b(
                d,
                ArchSpec::new(ArchKind::MfaKr)
                    .with_kr_variant(KrVariant::Gated)
                    .with_pos_embed(rope),
            )
        }
        "1b-mha" => {
            let mut d = base_dims(20);
            d.ffn = 6008;
            one_b(d, ArchSpec::new(ArchKind::Mha).with_pos_embed(rope))
        }
        "1b-gqa8" | "1b-gqa4" | "1b-gqa2" => {
            let mut d = base_dims(20);
            d.groups_g = name["1b-gqa".len()..].parse().expect("suffix is the group count");
            d.ffn = match d.groups_g {
                8 => 6680,
                4 => 7032,
                _ => 7200,
            };
            one_b(d, ArchSpec::new(ArchKind::Gqa).with_pos_embed(rope))
        }
        "1b-mqa" => {
            let mut d = base_dims(20);
            d.ffn = 7304;
            one_b(d, ArchSpec::new(ArchKind::Mqa).with_pos_embed(rope))
        }
        "1b-mla" => {
            // Per-head layout follows the low-rank reference setup: latent
            // 512 with 64 decoupled rotary dimensions.
            let mut d = base_dims(20);
            d.latent_c = 512;
            d.rope_dim_dr = 64;
            d.ffn = 6504;
            one_b(d, ArchSpec::new(ArchKind::Mla).with_pos_embed(rope))
        }
        "1b-mfa" => {
            let mut d = base_dims(20);
            d.n_heads = 14;
            d.head_dim = 256;
            d.latent_c = 256;
            d.ffn = 7168;
            one_b(d, ArchSpec::new(ArchKind::Mfa).with_pos_embed(rope))
        }
        "1b-mfa-kr" => {
            let mut d = base_dims(20);
            d.n_heads = 14;
            d.head_dim = 256;
            d.latent_c = 256;
            d.ffn = 7232;
            one_b(
                d,
                ArchSpec::new(ArchKind::MfaKr)
                    .with_kr_variant(KrVariant::Gated)
                    .with_pos_embed(rope),
            )
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (expected one of {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(RunConfig { name: name.to_string(), train })
}

/// All presets of a named set (`7b` or `1b`), or the single preset.
pub fn preset_set(name: &str) -> Result<Vec<RunConfig>> {
    match name {
        "7b" => PRESET_NAMES[..3].iter().map(|n| preset(n)).collect(),
        "1b" => PRESET_NAMES[3..].iter().map(|n| preset(n)).collect(),
        other => Ok(vec![preset(other)?]),
    }
}

/// Strict JSON config file: the [`TrainConfig`] schema, unknown keys
/// rejected.
pub fn load_config_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let train: TrainConfig = serde_json::from_str(&text)?;
    train.validate()?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "config".to_string());
    Ok(RunConfig { name, train })
}
