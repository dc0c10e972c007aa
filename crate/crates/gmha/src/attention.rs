//! Attention forward passes for the whole architecture family, in both
//! formulations:
//!
//! * **inference formulation** ([`attn_forward`]) — explicit per-token keys
//!   and values, exactly what a KV cache stores; built on the autodiff graph
//!   so the training path can differentiate through it;
//! * **factorization formulation** ([`attn_forward_factored`]) — per-head
//!   folded score/output matrices evaluated bilinearly, computed on a plain
//!   tensor path with no graph involvement, so it doubles as an independent
//!   correctness oracle for the inference path.
//!
//! [`fpba_forward`] is the fully parameterized bilinear form that every
//! family member folds into; with grouped channels it reproduces MHA, MQA,
//! and GQA outputs exactly.

use crate::arch::{ArchKind, ArchSpec, ModelDims, PosEmbed};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kr::{build_kr_value, kr_value_from_key};
use crate::tensor::Tensor;
use crate::weights::{audit_shapes, AttnWeights, WireMap};
use crate::alibi;

/// Score scale actually applied: the override if set, else
/// `1/sqrt(query-key dot dimension)` for the architecture.
pub fn effective_score_scale(spec: &ArchSpec, dims: &ModelDims) -> f64 {
    if let Some(s) = spec.score_scale {
        return s;
    }
    let dot_dim = match spec.kind {
        ArchKind::Fpba => dims.hidden,
        ArchKind::Mha | ArchKind::Mqa | ArchKind::Gqa => dims.head_dim,
        ArchKind::Mla => {
            dims.head_dim
                + match spec.pos_embed {
                    PosEmbed::Rope { .. } => dims.rope_dim_dr,
                    _ => 0,
                }
        }
        ArchKind::Mfa | ArchKind::MfaKr => dims.latent_c,
    };
    1.0 / (dot_dim as f64).sqrt()
}

/// T×T additive causal mask: 0 at and below the diagonal, `-inf` above.
pub(crate) fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![t, t], data).expect("sized by construction")
}

/// Per-head additive score bias: the causal mask, with ALiBi's distance
/// penalty folded in when that embedding is selected.
fn score_bias(pos: PosEmbed, slopes: &[f64], head: usize, t: usize) -> Tensor {
    match pos {
        PosEmbed::Alibi => alibi::head_bias(slopes[head], t),
        _ => causal_mask(t),
    }
}

fn rope_base(pos: PosEmbed) -> Option<f64> {
    match pos {
        PosEmbed::Rope { base } => Some(base),
        _ => None,
    }
}

fn wire(wires: &WireMap, name: &str) -> Result<NodeId> {
    wires
        .get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("weight '{name}' not wired into graph")))
}

fn ensure_audited(spec: &ArchSpec, dims: &ModelDims, w: &AttnWeights) -> Result<()> {
    let violations = audit_shapes(spec, dims, w)?;
    if violations.is_empty() {
        Ok(())
    } else {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        Err(Error::Config(format!("weight audit failed: {}", list.join("; "))))
    }
}

// ── Inference formulation (graph path) ───────────────────────────────────

/// Causal attention output for the full sequence, inference formulation.
/// Weights are shape-audited first; positional embedding follows `spec`.
pub fn attn_forward(
    spec: &ArchSpec,
    w: &AttnWeights,
    dims: &ModelDims,
    x: &Tensor,
) -> Result<Tensor> {
    ensure_audited(spec, dims, w)?;
    let mut g = Graph::new();
    let x_id = g.leaf(x.clone(), false);
    let wires = w.wire(&mut g, false);
    let out = build_attn_forward(&mut g, spec, &wires, dims, x_id)?;
    Ok(g.value(out).clone())
}

/// Graph-building core of [`attn_forward`]; used directly by the language
/// model so gradients flow into the wired weights.
pub fn build_attn_forward(
    g: &mut Graph,
    spec: &ArchSpec,
    wires: &WireMap,
    dims: &ModelDims,
    x: NodeId,
) -> Result<NodeId> {
    dims.validate(spec)?;
    let (t, h) = g.value(x).dims2()?;
    if h != dims.hidden {
        return Err(Error::Dim(format!(
            "input width {h} does not match hidden size {}",
            dims.hidden
        )));
    }
    let scale = effective_score_scale(spec, dims);
    let positions: Vec<usize> = (0..t).collect();
    let base = rope_base(spec.pos_embed);
    let n_heads = dims.effective_heads(spec.kind);
    let slopes = alibi::slopes(n_heads);

    let mut head_outputs: Vec<NodeId> = Vec::with_capacity(n_heads);
    match spec.kind {
        ArchKind::Fpba => {
            for ch in 0..dims.hidden {
                let w_c = wire(wires, &format!("w.{ch}"))?;
                let u_c = wire(wires, &format!("u.{ch}"))?;
                // keys are channel-specific: k_c(j) = x_j·W_cᵀ
                let mut q = x;
                let mut k = g.matmul_nt(x, w_c)?;
                if let Some(b) = base {
                    q = g.rope_rows(q, &positions, b)?;
                    k = g.rope_rows(k, &positions, b)?;
                }
                let v = g.matmul(x, u_c)?;
                let p = scored_softmax(g, q, k, scale, &score_bias(spec.pos_embed, &slopes, ch, t))?;
                head_outputs.push(g.matmul(p, v)?);
            }
        }
        ArchKind::Mha | ArchKind::Mqa | ArchKind::Gqa => {
            // Precompute the shared / grouped key-value projections once.
            let kv_count = match spec.kind {
                ArchKind::Mha => dims.n_heads,
                ArchKind::Mqa => 1,
                _ => dims.groups_g,
            };
            let mut keys = Vec::with_capacity(kv_count);
            let mut vals = Vec::with_capacity(kv_count);
            for i in 0..kv_count {
                let (k_name, v_name) = match spec.kind {
                    ArchKind::Mqa => ("k".to_string(), "v".to_string()),
                    _ => (format!("k.{i}"), format!("v.{i}")),
                };
                let mut k = g.matmul(x, wire(wires, &k_name)?)?;
                if let Some(b) = base {
                    k = g.rope_rows(k, &positions, b)?;
                }
                keys.push(k);
                vals.push(g.matmul(x, wire(wires, &v_name)?)?);
            }
            let heads_per_kv = dims.n_heads / kv_count;
            for head in 0..dims.n_heads {
                let kv = head / heads_per_kv;
                let mut q = g.matmul(x, wire(wires, &format!("q.{head}"))?)?;
                if let Some(b) = base {
                    q = g.rope_rows(q, &positions, b)?;
                }
                let p = scored_softmax(
                    g,
                    q,
                    keys[kv],
                    scale,
                    &score_bias(spec.pos_embed, &slopes, head, t),
                )?;
                let av = g.matmul(p, vals[kv])?;
                head_outputs.push(g.matmul_nt(av, wire(wires, &format!("o.{head}"))?)?);
            }
        }
        ArchKind::Mla => {
            let lat_q = g.matmul(x, wire(wires, "s_q")?)?;
            let k_lat = g.matmul(x, wire(wires, "s_k")?)?;
            let v_lat = g.matmul(x, wire(wires, "s_v")?)?;
            let k_rot = match base {
                Some(b) => {
                    let kr = g.matmul(x, wire(wires, "w_kr")?)?;
                    Some(g.rope_rows(kr, &positions, b)?)
                }
                None => None,
            };
            for head in 0..dims.n_heads {
                let q = g.matmul(lat_q, wire(wires, &format!("q.{head}"))?)?;
                let k = g.matmul(k_lat, wire(wires, &format!("k.{head}"))?)?;
                let v = g.matmul(v_lat, wire(wires, &format!("v.{head}"))?)?;
                let mut s = g.matmul_nt(q, k)?;
                if let (Some(b), Some(kr)) = (base, k_rot) {
                    let q_r = g.matmul(lat_q, wire(wires, &format!("q_rope.{head}"))?)?;
                    let q_r = g.rope_rows(q_r, &positions, b)?;
                    let s_r = g.matmul_nt(q_r, kr)?;
                    s = g.add(s, s_r)?;
                }
                let s = g.scale(s, scale)?;
                let s = g.add_constant(s, &score_bias(spec.pos_embed, &slopes, head, t))?;
                let p = g.softmax_rows(s)?;
                let av = g.matmul(p, v)?;
                head_outputs.push(g.matmul_nt(av, wire(wires, &format!("o.{head}"))?)?);
            }
        }
        ArchKind::Mfa | ArchKind::MfaKr => {
            let k = g.matmul(x, wire(wires, "s_k")?)?;
            let v = match spec.kind {
                ArchKind::Mfa => g.matmul(x, wire(wires, "s_v")?)?,
                _ => {
                    // Values derive from the unrotated key rows at use time.
                    let variant = spec.kr_variant();
                    let n = variant.has_proj().then(|| wire(wires, "kr_n")).transpose()?;
                    let alpha = variant
                        .has_gate()
                        .then(|| wire(wires, "kr_alpha"))
                        .transpose()?;
                    build_kr_value(g, variant, k, n, alpha)?
                }
            };
            let k_rot = match base {
                Some(b) => g.rope_rows(k, &positions, b)?,
                None => k,
            };
            let lat_q = spec
                .factored_q
                .then(|| wire(wires, "s_q").and_then(|sq| g.matmul(x, sq)))
                .transpose()?;
            for head in 0..dims.n_heads {
                let mut q = match lat_q {
                    Some(lq) => g.matmul(lq, wire(wires, &format!("q.{head}"))?)?,
                    None => g.matmul(x, wire(wires, &format!("w_q.{head}"))?)?,
                };
                if let Some(b) = base {
                    q = g.rope_rows(q, &positions, b)?;
                }
                let p = scored_softmax(
                    g,
                    q,
                    k_rot,
                    scale,
                    &score_bias(spec.pos_embed, &slopes, head, t),
                )?;
                let av = g.matmul(p, v)?;
                head_outputs.push(g.matmul_nt(av, wire(wires, &format!("o.{head}"))?)?);
            }
        }
    }

    let mut sum = head_outputs[0];
    for &contrib in &head_outputs[1..] {
        sum = g.add(sum, contrib)?;
    }
    Ok(sum)
}

/// scores = softmax(mask(q·kᵀ · scale + bias)).
fn scored_softmax(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    scale: f64,
    bias: &Tensor,
) -> Result<NodeId> {
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, scale)?;
    let s = g.add_constant(s, bias)?;
    g.softmax_rows(s)
}

// ── Factorization formulation (plain path) ───────────────────────────────

/// Per-head folded score matrices (`x_i · W_fold · x_jᵀ` gives the raw
/// score). Rank per head is bounded by the factorization bottleneck.
pub fn folded_qk_matrices(
    spec: &ArchSpec,
    w: &AttnWeights,
    dims: &ModelDims,
) -> Result<Vec<Tensor>> {
    ensure_audited(spec, dims, w)?;
    let mut out = Vec::new();
    match spec.kind {
        ArchKind::Fpba => {
            for ch in 0..dims.hidden {
                out.push(w.get(&format!("w.{ch}"))?.clone());
            }
        }
        ArchKind::Mha => {
            for head in 0..dims.n_heads {
                out.push(
                    w.get(&format!("q.{head}"))?
                        .matmul_nt(w.get(&format!("k.{head}"))?)?,
                );
            }
        }
        ArchKind::Mqa => {
            for head in 0..dims.n_heads {
                out.push(w.get(&format!("q.{head}"))?.matmul_nt(w.get("k")?)?);
            }
        }
        ArchKind::Gqa => {
            let heads_per_group = dims.n_heads / dims.groups_g;
            for head in 0..dims.n_heads {
                let group = head / heads_per_group;
                out.push(
                    w.get(&format!("q.{head}"))?
                        .matmul_nt(w.get(&format!("k.{group}"))?)?,
                );
            }
        }
        ArchKind::Mla => {
            for head in 0..dims.n_heads {
                let qc = w.get("s_q")?.matmul(w.get(&format!("q.{head}"))?)?;
                let kc = w.get("s_k")?.matmul(w.get(&format!("k.{head}"))?)?;
                out.push(qc.matmul_nt(&kc)?);
            }
        }
        ArchKind::Mfa | ArchKind::MfaKr => {
            for head in 0..dims.n_heads {
                let qc = if spec.factored_q {
                    w.get("s_q")?.matmul(w.get(&format!("q.{head}"))?)?
                } else {
                    w.get(&format!("w_q.{head}"))?.clone()
                };
                out.push(qc.matmul_nt(w.get("s_k")?)?);
            }
        }
    }
    Ok(out)
}

/// Per-head folded output matrices (`x_j · U_fold` gives the head's
/// contribution weighting).
pub fn folded_vo_matrices(
    spec: &ArchSpec,
    w: &AttnWeights,
    dims: &ModelDims,
) -> Result<Vec<Tensor>> {
    ensure_audited(spec, dims, w)?;
    let mut out = Vec::new();
    match spec.kind {
        ArchKind::Fpba => {
            for ch in 0..dims.hidden {
                out.push(w.get(&format!("u.{ch}"))?.clone());
            }
        }
        ArchKind::Mha => {
            for head in 0..dims.n_heads {
                out.push(
                    w.get(&format!("v.{head}"))?
                        .matmul_nt(w.get(&format!("o.{head}"))?)?,
                );
            }
        }
        ArchKind::Mqa => {
            for head in 0..dims.n_heads {
                out.push(w.get("v")?.matmul_nt(w.get(&format!("o.{head}"))?)?);
            }
        }
        ArchKind::Gqa => {
            let heads_per_group = dims.n_heads / dims.groups_g;
            for head in 0..dims.n_heads {
                let group = head / heads_per_group;
                out.push(
                    w.get(&format!("v.{group}"))?
                        .matmul_nt(w.get(&format!("o.{head}"))?)?,
                );
            }
        }
        ArchKind::Mla => {
            for head in 0..dims.n_heads {
                let vc = w.get("s_v")?.matmul(w.get(&format!("v.{head}"))?)?;
                out.push(vc.matmul_nt(w.get(&format!("o.{head}"))?)?);
            }
        }
        ArchKind::Mfa => {
            for head in 0..dims.n_heads {
                out.push(w.get("s_v")?.matmul_nt(w.get(&format!("o.{head}"))?)?);
            }
        }
        ArchKind::MfaKr => {
            let s_v = effective_kr_value_projection(spec, w)?;
            for head in 0..dims.n_heads {
                out.push(s_v.matmul_nt(w.get(&format!("o.{head}"))?)?);
            }
        }
    }
    Ok(out)
}

/// Weight-space value projection implied by the key-reuse variant:
/// `S_v = S_k`, `S_k·N`, `S_k·(I+N)`, or `S_k·(I + N·diag(α))`.
fn effective_kr_value_projection(spec: &ArchSpec, w: &AttnWeights) -> Result<Tensor> {
    let s_k = w.get("s_k")?;
    let variant = spec.kr_variant();
    let n = variant.has_proj().then(|| w.get("kr_n")).transpose()?;
    let alpha = variant.has_gate().then(|| w.get("kr_alpha")).transpose()?;
    kr_value_from_key(variant, s_k, n, alpha)
}

/// Causal attention output via pre-folded per-head matrices. Rejects rotary
/// embedding: the folded score matrix is position-independent and cannot
/// absorb per-position rotations.
pub fn attn_forward_factored(
    spec: &ArchSpec,
    w: &AttnWeights,
    dims: &ModelDims,
    x: &Tensor,
) -> Result<Tensor> {
    if matches!(spec.pos_embed, PosEmbed::Rope { .. }) {
        return Err(Error::Unsupported(
            "factorized formulation cannot absorb rotary position embedding".into(),
        ));
    }
    let folded_w = folded_qk_matrices(spec, w, dims)?;
    let folded_u = folded_vo_matrices(spec, w, dims)?;
    let scale = effective_score_scale(spec, dims);
    let channels: Vec<BilinearChannel> = folded_w
        .into_iter()
        .zip(folded_u)
        .map(|(score, output)| BilinearChannel { score, output, multiplicity: 1.0 })
        .collect();
    bilinear_eval(x, &channels, scale, spec.pos_embed)
}

/// One channel of a bilinear attention sum.
struct BilinearChannel {
    /// H×H (or folded) score matrix W.
    score: Tensor,
    /// H×H output matrix U.
    output: Tensor,
    /// Weight of this channel's contribution (channel-group size).
    multiplicity: f64,
}

/// Evaluate `O_i = Σ_c mult_c · Σ_{j≤i} softmax_j(x_i W_c x_jᵀ · scale) x_j U_c`
/// with plain tensor math. ALiBi adds its per-channel distance penalty to the
/// scores; rotary embedding is not representable here.
fn bilinear_eval(
    x: &Tensor,
    channels: &[BilinearChannel],
    scale: f64,
    pos: PosEmbed,
) -> Result<Tensor> {
    let (t, h) = x.dims2()?;
    let slopes = alibi::slopes(channels.len());
    let mut out = Tensor::zeros(vec![t, h]);
    for (ch, channel) in channels.iter().enumerate() {
        let keys = x.matmul_nt(&channel.score)?; // k_c(j) = x_j · W_cᵀ
        let scores = x.matmul_nt(&keys)?.scale(scale);
        let biased = scores.add(&score_bias(pos, &slopes, ch, t))?;
        let probs = biased.softmax_rows()?;
        let values = x.matmul(&channel.output)?;
        let contrib = probs.matmul(&values)?.scale(channel.multiplicity);
        out = out.add(&contrib)?;
    }
    Ok(out)
}

// ── FPBA ─────────────────────────────────────────────────────────────────

/// Fully parameterized bilinear attention:
/// `O_i = Σ_c Σ_{j≤i} softmax_j(x_i W_c x_jᵀ · scale) x_j U_c`, causal.
///
/// Without `channel_group`, `w` and `u` hold one H×H matrix per channel
/// (`w.len() == H`). With `channel_group`, they hold one matrix per group and
/// `channel_group[c]` maps each of the H channels onto a group; channels in a
/// group contribute identical terms, evaluated once and weighted by group
/// size. `scale` defaults to `1/sqrt(H)`.
pub fn fpba_forward(
    x: &Tensor,
    w: &[Tensor],
    u: &[Tensor],
    scale: Option<f64>,
    channel_group: Option<&[usize]>,
) -> Result<Tensor> {
    let (_, h) = x.dims2()?;
    if w.len() != u.len() {
        return Err(Error::Dim(format!(
            "{} score matrices vs {} output matrices",
            w.len(),
            u.len()
        )));
    }
    for m in w.iter().chain(u) {
        if m.shape() != [h, h] {
            return Err(Error::Dim(format!(
                "bilinear channel matrices must be {h}x{h}, got {:?}",
                m.shape()
            )));
        }
    }
    let mut multiplicity = vec![0.0f64; w.len()];
    match channel_group {
        None => {
            if w.len() != h {
                return Err(Error::Dim(format!(
                    "expected one channel per hidden dimension ({h}), got {}",
                    w.len()
                )));
            }
            multiplicity.iter_mut().for_each(|m| *m = 1.0);
        }
        Some(groups) => {
            if groups.len() != h {
                return Err(Error::Dim(format!(
                    "channel_group must map all {h} channels, got {}",
                    groups.len()
                )));
            }
            for &g in groups {
                if g >= w.len() {
                    return Err(Error::Dim(format!(
                        "channel_group index {g} out of range for {} groups",
                        w.len()
                    )));
                }
                multiplicity[g] += 1.0;
            }
        }
    }
    let channels: Vec<BilinearChannel> = w
        .iter()
        .zip(u)
        .zip(multiplicity)
        .map(|((score, output), multiplicity)| BilinearChannel {
            score: score.clone(),
            output: output.clone(),
            multiplicity,
        })
        .collect();
    let scale = scale.unwrap_or(1.0 / (h as f64).sqrt());
    bilinear_eval(x, &channels, scale, PosEmbed::None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{random_input, AttnWeights};

    fn dims_for(kind: ArchKind) -> ModelDims {
        let mut d = ModelDims {
            hidden: 8,
            layers: 1,
            n_heads: 2,
            head_dim: 4,
            latent_c: 0,
            groups_g: 1,
            rope_dim_dr: 0,
            vocab: 16,
            ffn: 8,
        };
        match kind {
            ArchKind::Mla => {
                d.latent_c = 6;
                d.rope_dim_dr = 4;
            }
            ArchKind::Mfa | ArchKind::MfaKr => {
                d.latent_c = 4;
                d.head_dim = 4;
                d.n_heads = 3;
            }
            ArchKind::Gqa => {
                d.n_heads = 4;
                d.head_dim = 2;
                d.groups_g = 2;
            }
            _ => {}
        }
        d
    }

    #[test]
    fn single_token_fpba_is_value_sum() {
        // With one token every softmax collapses to 1: O_1 = Σ_c x_1·U_c.
        let h = 3;
        let x = random_input(1, h, 5);
        let w: Vec<Tensor> = (0..h).map(|i| crate::weights::random_tensor(&[h, h], 0.5, i as u64)).collect();
        let u: Vec<Tensor> =
            (0..h).map(|i| crate::weights::random_tensor(&[h, h], 0.5, 100 + i as u64)).collect();
        let out = fpba_forward(&x, &w, &u, None, None).unwrap();
        let mut want = Tensor::zeros(vec![1, h]);
        for uc in &u {
            want = want.add(&x.matmul(uc).unwrap()).unwrap();
        }
        assert!(out.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn zero_scores_give_uniform_attention() {
        // W_c = 0 ⇒ every prefix position weighted equally.
        let h = 2;
        let t = 4;
        let x = random_input(t, h, 8);
        let w = vec![Tensor::zeros(vec![h, h]); h];
        let u: Vec<Tensor> =
            (0..h).map(|i| crate::weights::random_tensor(&[h, h], 0.5, 200 + i as u64)).collect();
        let out = fpba_forward(&x, &w, &u, None, None).unwrap();
        for i in 0..t {
            // mean over prefix, then through each U_c, summed.
            let mut mean = vec![0.0; h];
            for j in 0..=i {
                for c in 0..h {
                    mean[c] += x.row(j)[c] / (i + 1) as f64;
                }
            }
            let mean_t = Tensor::new(vec![1, h], mean).unwrap();
            let mut want = Tensor::zeros(vec![1, h]);
            for uc in &u {
                want = want.add(&mean_t.matmul(uc).unwrap()).unwrap();
            }
            for c in 0..h {
                assert!((out.row(i)[c] - want.row(0)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causality_holds_for_every_architecture_and_embedding() {
        for kind in ArchKind::ALL {
            let dims = dims_for(kind);
            for pos in [PosEmbed::None, PosEmbed::rope_default(), PosEmbed::Alibi] {
                let spec = ArchSpec::new(kind).with_pos_embed(pos);
                let w = AttnWeights::random(&spec, &dims, 42).unwrap();
                let t = 5;
                let x = random_input(t, dims.hidden, 9);
                let out = attn_forward(&spec, &w, &dims, &x).unwrap();
                // Perturb the final token; earlier outputs must be untouched.
                let mut x2 = x.clone();
                for v in &mut x2.data_mut()[(t - 1) * dims.hidden..] {
                    *v += 13.7;
                }
                let out2 = attn_forward(&spec, &w, &dims, &x2).unwrap();
                for i in 0..t - 1 {
                    for c in 0..dims.hidden {
                        assert_eq!(
                            out.row(i)[c],
                            out2.row(i)[c],
                            "{kind:?} {pos:?} leaked future information at row {i}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn factored_rejects_rotary_embedding() {
        let spec = ArchSpec::new(ArchKind::Mha).with_pos_embed(PosEmbed::rope_default());
        let dims = dims_for(ArchKind::Mha);
        let w = AttnWeights::random(&spec, &dims, 3).unwrap();
        let x = random_input(4, dims.hidden, 3);
        assert!(matches!(
            attn_forward_factored(&spec, &w, &dims, &x),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn single_head_mqa_equals_single_head_mha() {
        let dims = ModelDims {
            hidden: 4,
            layers: 1,
            n_heads: 1,
            head_dim: 4,
            latent_c: 0,
            groups_g: 1,
            rope_dim_dr: 0,
            vocab: 16,
            ffn: 8,
        };
        let mha_spec = ArchSpec::new(ArchKind::Mha);
        let mqa_spec = ArchSpec::new(ArchKind::Mqa);
        let mha_w = AttnWeights::random(&mha_spec, &dims, 17).unwrap();
        let mut mqa_w = AttnWeights::new();
        mqa_w.insert("q.0", mha_w.get("q.0").unwrap().clone());
        mqa_w.insert("k", mha_w.get("k.0").unwrap().clone());
        mqa_w.insert("v", mha_w.get("v.0").unwrap().clone());
        mqa_w.insert("o.0", mha_w.get("o.0").unwrap().clone());
        let x = random_input(6, 4, 31);
        let a = attn_forward(&mha_spec, &mha_w, &dims, &x).unwrap();
        let b = attn_forward(&mqa_spec, &mqa_w, &dims, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn score_scale_default_tracks_dot_dimension() {
        let mla_dims = dims_for(ArchKind::Mla);
        let plain = ArchSpec::new(ArchKind::Mla);
        let rotary = ArchSpec::new(ArchKind::Mla).with_pos_embed(PosEmbed::rope_default());
        assert_eq!(effective_score_scale(&plain, &mla_dims), 1.0 / 2.0);
        assert_eq!(
            effective_score_scale(&rotary, &mla_dims),
            1.0 / ((4.0f64 + 4.0).sqrt())
        );
        let mfa_dims = dims_for(ArchKind::Mfa);
        assert_eq!(
            effective_score_scale(&ArchSpec::new(ArchKind::Mfa), &mfa_dims),
            0.5
        );
        let overridden = ArchSpec::new(ArchKind::Mfa).with_score_scale(0.125);
        assert_eq!(effective_score_scale(&overridden, &mfa_dims), 0.125);
    }
}
