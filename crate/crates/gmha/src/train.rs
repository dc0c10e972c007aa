//! Deterministic byte-level training loop.
//!
//! Tokens are raw bytes plus one start-of-sequence marker (vocabulary 257).
//! Every run is a pure function of `(TrainConfig, corpus)`: window sampling,
//! initialization, and optimization all draw from seed-keyed streams.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, ModelDims};
use crate::error::{Error, Result};
use crate::model::ToyLm;
use crate::optim::{adamw_step, clip_grads, lr_at, AdamState};
use crate::weights::tensor_seed;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Byte vocabulary plus the start-of-sequence token.
pub const BYTE_VOCAB: usize = 257;
pub const BOS: usize = 256;

/// Full training configuration. Optimizer defaults: β=[0.9, 0.95],
/// eps=1e-8, weight decay 0.1, clip 1.0, cosine floor 1e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub arch: ArchSpec,
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "d_total")]
    pub total_steps: usize,
    #[serde(default = "d_final_lr")]
    pub final_lr: f64,
    #[serde(default = "d_batch_tokens")]
    pub batch_tokens: usize,
    #[serde(default = "d_seq_len")]
    pub seq_len: usize,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_grad_clip")]
    pub grad_clip_norm: f64,
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_peak_lr() -> f64 {
    2e-3
}
fn d_warmup() -> usize {
    2000
}
fn d_total() -> usize {
    20_000
}
fn d_final_lr() -> f64 {
    1e-5
}
fn d_batch_tokens() -> usize {
    8192
}
fn d_seq_len() -> usize {
    256
}
fn d_weight_decay() -> f64 {
    0.1
}
fn d_grad_clip() -> f64 {
    1.0
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.95
}
fn d_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Desk-scale smoke configuration: 2-layer MFA, short schedule.
    pub fn smoke_defaults() -> Self {
        use crate::arch::{ArchKind, PosEmbed};
        Self {
            dims: ModelDims {
                hidden: 64,
                layers: 2,
                n_heads: 4,
                head_dim: 32,
                latent_c: 32,
                groups_g: 1,
                rope_dim_dr: 0,
                vocab: BYTE_VOCAB,
                ffn: 128,
            },
            arch: ArchSpec::new(ArchKind::Mfa).with_pos_embed(PosEmbed::rope_default()),
            peak_lr: 2e-3,
            warmup_steps: 30,
            total_steps: 300,
            final_lr: 1e-5,
            batch_tokens: 512,
            seq_len: 128,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate(&self.arch)?;
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        let positive = [
            ("peak_lr", self.peak_lr),
            ("final_lr", self.final_lr),
            ("weight_decay", self.weight_decay),
            ("grad_clip_norm", self.grad_clip_norm),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.seq_len == 0 || self.batch_tokens == 0 {
            return Err(Error::Config("seq_len and batch_tokens must be positive".into()));
        }
        if self.dims.vocab < BYTE_VOCAB {
            return Err(Error::Config(format!(
                "byte-level training needs vocab >= {BYTE_VOCAB}, got {}",
                self.dims.vocab
            )));
        }
        Ok(())
    }

    pub fn sequences_per_step(&self) -> usize {
        (self.batch_tokens / self.seq_len).max(1)
    }
}

/// One training step's observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub status: TrainStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStatus {
    Ok,
    Diverged,
}

impl std::fmt::Display for TrainStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainStatus::Ok => f.write_str("ok"),
            TrainStatus::Diverged => f.write_str("diverged"),
        }
    }
}

impl StepMetrics {
    /// One metrics line; float `Display` is shortest-roundtrip, so repeated
    /// deterministic runs serialize byte-identically.
    pub fn line(&self) -> String {
        format!(
            "step={} loss={} lr={} grad_norm={} status={}",
            self.step, self.loss, self.lr, self.grad_norm, self.status
        )
    }
}

/// Finished run: per-step metrics plus the trained model.
pub struct TrainRun {
    pub metrics: Vec<StepMetrics>,
    pub model: ToyLm,
    pub status: TrainStatus,
}

/// Train on a byte corpus. Divergence (non-finite loss or loss above 10×
/// the first step's) flags the final metric row and halts the loop.
pub fn train_loop(cfg: &TrainConfig, corpus: &[u8]) -> Result<TrainRun> {
    train_loop_with(cfg, corpus, |_| {})
}

/// [`train_loop`] with a per-step observer (the CLI streams metric lines).
pub fn train_loop_with(
    cfg: &TrainConfig,
    corpus: &[u8],
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainRun> {
    cfg.validate()?;
    if corpus.len() < cfg.batch_tokens {
        return Err(Error::Config(format!(
            "corpus of {} bytes is smaller than one batch ({} tokens)",
            corpus.len(),
            cfg.batch_tokens
        )));
    }
    if corpus.len() < cfg.seq_len + 1 {
        return Err(Error::Config("corpus shorter than one sequence".into()));
    }
    let mut model = ToyLm::new(cfg.arch.clone(), cfg.dims.clone())?;
    model.init_weights(cfg.seed)?;
    let mut sampler = ChaCha12Rng::seed_from_u64(tensor_seed(cfg.seed, "corpus_sampler"));
    let mut adam = AdamState::new();
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    let mut initial_loss = None;
    let mut status = TrainStatus::Ok;

    for step in 1..=cfg.total_steps {
        let batch = sample_batch(cfg, corpus, &mut sampler);
        let (loss, mut grads) = model.loss_and_grads(&batch)?;
        let initial = *initial_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > 10.0 * initial {
            status = TrainStatus::Diverged;
            let row = StepMetrics {
                step,
                loss,
                lr: lr_at(step, cfg)?,
                grad_norm: f64::NAN,
                status,
            };
            on_step(&row);
            metrics.push(row);
            break;
        }
        let grad_norm = clip_grads(&mut grads, cfg.grad_clip_norm);
        let lr = lr_at(step, cfg)?;
        adamw_step(&mut model.params, &grads, &mut adam, lr, cfg)?;
        let row = StepMetrics { step, loss, lr, grad_norm, status: TrainStatus::Ok };
        on_step(&row);
        metrics.push(row);
    }

    Ok(TrainRun { metrics, model, status })
}

fn sample_batch(
    cfg: &TrainConfig,
    corpus: &[u8],
    sampler: &mut ChaCha12Rng,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let seqs = cfg.sequences_per_step();
    let max_offset = corpus.len() - cfg.seq_len;
    (0..seqs)
        .map(|_| {
            let offset = sampler.gen_range(0..=max_offset);
            let window = &corpus[offset..offset + cfg.seq_len];
            // Input: BOS then all but the last byte; target: the window.
            let mut input = Vec::with_capacity(cfg.seq_len);
            input.push(BOS);
            input.extend(window[..cfg.seq_len - 1].iter().map(|&b| b as usize));
            let targets: Vec<usize> = window.iter().map(|&b| b as usize).collect();
            (input, targets)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchKind, KrVariant};

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::smoke_defaults();
        cfg.dims.hidden = 16;
        cfg.dims.latent_c = 8;
        cfg.dims.head_dim = 8;
        cfg.dims.n_heads = 2;
        cfg.dims.ffn = 16;
        cfg.total_steps = 5;
        cfg.warmup_steps = 2;
        cfg.seq_len = 16;
        cfg.batch_tokens = 32;
        cfg
    }

    fn random_bytes(len: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen()).collect()
    }

    #[test]
    fn initial_loss_is_near_uniform_entropy() {
        let cfg = tiny_cfg();
        let corpus = random_bytes(4096, 1);
        let run = train_loop(&cfg, &corpus).unwrap();
        let first = run.metrics.first().unwrap();
        assert!(
            (first.loss - 256f64.ln()).abs() < 0.1,
            "initial loss {}",
            first.loss
        );
    }

    #[test]
    fn runs_are_bit_identical() {
        let cfg = tiny_cfg();
        let corpus = random_bytes(4096, 2);
        let a = train_loop(&cfg, &corpus).unwrap();
        let b = train_loop(&cfg, &corpus).unwrap();
        let lines_a: Vec<String> = a.metrics.iter().map(StepMetrics::line).collect();
        let lines_b: Vec<String> = b.metrics.iter().map(StepMetrics::line).collect();
        assert_eq!(lines_a, lines_b);
    }

    #[test]
    fn zero_gate_key_reuse_starts_at_the_matched_mfa_loss() {
        // MFA-KR(gated) at init has α = 0, so its forward equals an MFA whose
        // shared value projection is set to the shared key projection.
        let cfg_kr = {
            let mut c = tiny_cfg();
            c.arch = ArchSpec::new(ArchKind::MfaKr)
                .with_kr_variant(KrVariant::Gated)
                .with_pos_embed(crate::arch::PosEmbed::rope_default());
            c
        };
        let mut model_kr = ToyLm::new(cfg_kr.arch.clone(), cfg_kr.dims.clone()).unwrap();
        model_kr.init_weights(cfg_kr.seed).unwrap();

        let cfg_mfa = {
            let mut c = tiny_cfg();
            c.arch = ArchSpec::new(ArchKind::Mfa)
                .with_pos_embed(crate::arch::PosEmbed::rope_default());
            c
        };
        let mut model_mfa = ToyLm::new(cfg_mfa.arch.clone(), cfg_mfa.dims.clone()).unwrap();
        model_mfa.init_weights(cfg_mfa.seed).unwrap();
        for layer in 0..cfg_mfa.dims.layers {
            let k = model_mfa
                .params
                .get(&format!("layer.{layer}.attn.s_k"))
                .unwrap()
                .clone();
            *model_mfa
                .params
                .get_mut(&format!("layer.{layer}.attn.s_v"))
                .unwrap() = k;
        }

        let batch = vec![(vec![BOS, 10, 20, 30], vec![10usize, 20, 30, 40])];
        let (loss_kr, _) = model_kr.loss_and_grads(&batch).unwrap();
        let (loss_mfa, _) = model_mfa.loss_and_grads(&batch).unwrap();
        assert!(
            (loss_kr - loss_mfa).abs() < 1e-10,
            "kr {loss_kr} vs mfa {loss_mfa}"
        );
    }

    #[test]
    fn corpus_smaller_than_batch_is_rejected() {
        let cfg = tiny_cfg();
        let corpus = random_bytes(16, 3);
        assert!(train_loop(&cfg, &corpus).is_err());
    }

    #[test]
    fn loss_decreases_on_repetitive_text() {
        let mut cfg = tiny_cfg();
        cfg.total_steps = 40;
        cfg.warmup_steps = 8;
        let corpus: Vec<u8> = b"the quick brown fox jumps over the lazy dog. "
            .iter()
            .cycle()
            .take(8192)
            .copied()
            .collect();
        let run = train_loop(&cfg, &corpus).unwrap();
        assert_eq!(run.status, TrainStatus::Ok);
        let first = run.metrics.first().unwrap().loss;
        let last = run.metrics.last().unwrap().loss;
        assert!(last < first, "loss {first} -> {last}");
    }
}
