//! KV-cache state and token-at-a-time decoding.
//!
//! Cache contents per architecture (per layer, per token):
//!
//! | arch   | slots                                    | elements        |
//! |--------|------------------------------------------|-----------------|
//! | FPBA   | `k`: H², `v`: H²                         | 2H² (impractical, kept for accounting) |
//! | MHA    | `k`: n·d, `v`: n·d                       | 2H              |
//! | MQA    | `k`: d, `v`: d                           | 2d              |
//! | GQA    | `k`: g·d, `v`: g·d                       | 2gd             |
//! | MLA    | `k_latent`: C, `v_latent`: C, `k_rope`: d_r (rotary only) | 2C + d_r |
//! | MFA    | `k`: C, `v`: C                           | 2C              |
//! | MFA-KR | `k`: C                                   | C               |
//!
//! Appending is the only mutation; previously stored rows are never touched.
//! `elem_bytes` is pure accounting metadata (reported byte figures assume
//! reduced-precision storage); the actual buffers always hold full `f64`.

use crate::arch::{ArchKind, ArchSpec, ModelDims, PosEmbed};
use crate::attention::effective_score_scale;
use crate::error::{Error, Result};
use crate::rope::rotate_row_in_place;
use crate::tensor::{dot, softmax_row, Tensor};
use crate::weights::{audit_shapes, AttnWeights};
use crate::{alibi, kr};

/// Default accounting width: 16-bit storage.
pub const DEFAULT_ELEM_BYTES: usize = 2;

/// Slot layout for one architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    pub name: &'static str,
    pub dim: usize,
}

/// Per-layer cached slots and their per-token dimensions, fully determined
/// by `(ArchSpec, ModelDims)`.
pub fn cache_slots(spec: &ArchSpec, dims: &ModelDims) -> Vec<SlotSpec> {
    let h = dims.hidden;
    let d = dims.head_dim;
    let c = dims.latent_c;
    match spec.kind {
        ArchKind::Fpba => vec![
            SlotSpec { name: "k", dim: h * h },
            SlotSpec { name: "v", dim: h * h },
        ],
        ArchKind::Mha => vec![
            SlotSpec { name: "k", dim: dims.n_heads * d },
            SlotSpec { name: "v", dim: dims.n_heads * d },
        ],
        ArchKind::Mqa => vec![
            SlotSpec { name: "k", dim: d },
            SlotSpec { name: "v", dim: d },
        ],
        ArchKind::Gqa => vec![
            SlotSpec { name: "k", dim: dims.groups_g * d },
            SlotSpec { name: "v", dim: dims.groups_g * d },
        ],
        ArchKind::Mla => {
            let mut slots = vec![
                SlotSpec { name: "k_latent", dim: c },
                SlotSpec { name: "v_latent", dim: c },
            ];
            if matches!(spec.pos_embed, PosEmbed::Rope { .. }) {
                slots.push(SlotSpec { name: "k_rope", dim: dims.rope_dim_dr });
            }
            slots
        }
        ArchKind::Mfa => vec![
            SlotSpec { name: "k", dim: c },
            SlotSpec { name: "v", dim: c },
        ],
        ArchKind::MfaKr => vec![SlotSpec { name: "k", dim: c }],
    }
}

/// Closed-form cache bytes per token: `elem_bytes × L × Σ slot dims`.
pub fn cache_bytes_per_token(
    spec: &ArchSpec,
    dims: &ModelDims,
    elem_bytes: usize,
) -> Result<usize> {
    if elem_bytes == 0 {
        return Err(Error::Config("elem_bytes must be at least 1".into()));
    }
    dims.validate(spec)?;
    let per_layer: usize = cache_slots(spec, dims).iter().map(|s| s.dim).sum();
    Ok(elem_bytes * dims.layers * per_layer)
}

/// One attention module's append-only cache buffers.
#[derive(Debug, Clone)]
pub struct LayerCache {
    slots: Vec<(SlotSpec, Vec<f64>)>,
}

impl LayerCache {
    pub fn new(spec: &ArchSpec, dims: &ModelDims) -> Self {
        Self {
            slots: cache_slots(spec, dims)
                .into_iter()
                .map(|s| (s, Vec::new()))
                .collect(),
        }
    }

    /// Number of cached tokens (every slot holds the same count).
    pub fn tokens(&self) -> usize {
        self.slots
            .first()
            .map(|(spec, data)| data.len() / spec.dim)
            .unwrap_or(0)
    }

    pub fn stored_elements(&self) -> usize {
        self.slots.iter().map(|(_, data)| data.len()).sum()
    }

    fn append(&mut self, name: &str, row: &[f64]) {
        let (spec, data) = self
            .slots
            .iter_mut()
            .find(|(s, _)| s.name == name)
            .expect("slot name fixed by architecture");
        debug_assert_eq!(row.len(), spec.dim);
        data.extend_from_slice(row);
    }

    /// Cached rows of a slot as a `tokens × dim` matrix.
    pub fn slot_matrix(&self, name: &str) -> Result<Tensor> {
        let (spec, data) = self
            .slots
            .iter()
            .find(|(s, _)| s.name == name)
            .ok_or_else(|| Error::Config(format!("no cache slot '{name}'")))?;
        Tensor::new(vec![data.len() / spec.dim, spec.dim], data.clone())
    }

    fn slot_data(&self, name: &str) -> &[f64] {
        &self
            .slots
            .iter()
            .find(|(s, _)| s.name == name)
            .expect("slot name fixed by architecture")
            .1
    }
}

/// Whole-model cache: one [`LayerCache`] per layer plus byte accounting.
#[derive(Debug, Clone)]
pub struct KvCacheState {
    pub elem_bytes: usize,
    per_layer: Vec<LayerCache>,
}

impl KvCacheState {
    pub fn new(spec: &ArchSpec, dims: &ModelDims, elem_bytes: usize) -> Self {
        Self {
            elem_bytes,
            per_layer: (0..dims.layers).map(|_| LayerCache::new(spec, dims)).collect(),
        }
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.per_layer[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerCache {
        &mut self.per_layer[l]
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn tokens(&self) -> usize {
        self.per_layer.first().map(LayerCache::tokens).unwrap_or(0)
    }

    pub fn stored_elements(&self) -> usize {
        self.per_layer.iter().map(LayerCache::stored_elements).sum()
    }

    /// Actual stored element count times the accounting width.
    pub fn measured_bytes(&self) -> usize {
        self.stored_elements() * self.elem_bytes
    }
}

/// Process one token through one attention module, appending to its cache
/// and returning the attention output for this position.
///
/// `position` must equal the cache's current token count. Rotary embedding
/// is applied at cache-write time for keys and read time for the query,
/// except for MFA-KR where keys are cached unrotated (values derive from the
/// raw key rows; rotation happens at score time instead).
pub fn decode_step(
    spec: &ArchSpec,
    w: &AttnWeights,
    dims: &ModelDims,
    cache: &mut LayerCache,
    x_t: &Tensor,
    position: usize,
) -> Result<Tensor> {
    let violations = audit_shapes(spec, dims, w)?;
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Config(format!("weight audit failed: {}", list.join("; "))));
    }
    if x_t.shape() != [1, dims.hidden] {
        return Err(Error::Dim(format!(
            "decode input must be 1x{}, got {:?}",
            dims.hidden,
            x_t.shape()
        )));
    }
    if cache.tokens() != position {
        return Err(Error::CachePosition { cached: cache.tokens(), position });
    }

    let scale = effective_score_scale(spec, dims);
    let base = match spec.pos_embed {
        PosEmbed::Rope { base } => Some(base),
        _ => None,
    };
    let n_heads = dims.effective_heads(spec.kind);
    let slopes = alibi::slopes(n_heads);
    let h = dims.hidden;
    let t = position + 1;

    // Additive score bias for this query row against keys 0..=position.
    let bias = |head: usize, j: usize| -> f64 {
        match spec.pos_embed {
            PosEmbed::Alibi => -slopes[head] * (position - j) as f64,
            _ => 0.0,
        }
    };

    let mut out = vec![0.0; h];
    match spec.kind {
        ArchKind::Fpba => {
            let mut k_row = Vec::with_capacity(h * h);
            let mut v_row = Vec::with_capacity(h * h);
            for ch in 0..h {
                let mut k_c = x_t.matmul_nt(w.get(&format!("w.{ch}"))?)?.data().to_vec();
                if let Some(b) = base {
                    rotate_row_in_place(&mut k_c, position, b);
                }
                k_row.extend_from_slice(&k_c);
                v_row.extend_from_slice(x_t.matmul(w.get(&format!("u.{ch}"))?)?.data());
            }
            cache.append("k", &k_row);
            cache.append("v", &v_row);

            let mut q = x_t.data().to_vec();
            if let Some(b) = base {
                rotate_row_in_place(&mut q, position, b);
            }
            let keys = cache.slot_data("k");
            let vals = cache.slot_data("v");
            for ch in 0..h {
                let mut scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let k_j = &keys[j * h * h + ch * h..j * h * h + (ch + 1) * h];
                        dot(&q, k_j) * scale + bias(ch, j)
                    })
                    .collect();
                softmax_row(&mut scores, position)?;
                for (j, p) in scores.iter().enumerate() {
                    let v_j = &vals[j * h * h + ch * h..j * h * h + (ch + 1) * h];
                    for c in 0..h {
                        out[c] += p * v_j[c];
                    }
                }
            }
        }
        ArchKind::Mha | ArchKind::Mqa | ArchKind::Gqa => {
            let d = dims.head_dim;
            let kv_count = match spec.kind {
                ArchKind::Mha => dims.n_heads,
                ArchKind::Mqa => 1,
                _ => dims.groups_g,
            };
            let mut k_row = Vec::with_capacity(kv_count * d);
            let mut v_row = Vec::with_capacity(kv_count * d);
            for i in 0..kv_count {
                let (k_name, v_name) = match spec.kind {
                    ArchKind::Mqa => ("k".to_string(), "v".to_string()),
                    _ => (format!("k.{i}"), format!("v.{i}")),
                };
                let mut k_i = x_t.matmul(w.get(&k_name)?)?.data().to_vec();
                if let Some(b) = base {
                    rotate_row_in_place(&mut k_i, position, b);
                }
                k_row.extend_from_slice(&k_i);
                v_row.extend_from_slice(x_t.matmul(w.get(&v_name)?)?.data());
            }
            cache.append("k", &k_row);
            cache.append("v", &v_row);

            let keys = cache.slot_data("k");
            let vals = cache.slot_data("v");
            let row_dim = kv_count * d;
            let heads_per_kv = dims.n_heads / kv_count;
            for head in 0..dims.n_heads {
                let kv = head / heads_per_kv;
                let mut q = x_t.matmul(w.get(&format!("q.{head}"))?)?.data().to_vec();
                if let Some(b) = base {
                    rotate_row_in_place(&mut q, position, b);
                }
                let mut scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let k_j = &keys[j * row_dim + kv * d..j * row_dim + (kv + 1) * d];
                        dot(&q, k_j) * scale + bias(head, j)
                    })
                    .collect();
                softmax_row(&mut scores, position)?;
                let mut av = vec![0.0; d];
                for (j, p) in scores.iter().enumerate() {
                    let v_j = &vals[j * row_dim + kv * d..j * row_dim + (kv + 1) * d];
                    for c in 0..d {
                        av[c] += p * v_j[c];
                    }
                }
                let o = w.get(&format!("o.{head}"))?; // H×d
                for c in 0..h {
                    out[c] += dot(&av, o.row(c));
                }
            }
        }
        ArchKind::Mla => {
            let c_dim = dims.latent_c;
            let d = dims.head_dim;
            cache.append("k_latent", x_t.matmul(w.get("s_k")?)?.data());
            cache.append("v_latent", x_t.matmul(w.get("s_v")?)?.data());
            if let Some(b) = base {
                let mut k_r = x_t.matmul(w.get("w_kr")?)?.data().to_vec();
                rotate_row_in_place(&mut k_r, position, b);
                cache.append("k_rope", &k_r);
            }

            let lat_q = x_t.matmul(w.get("s_q")?)?;
            let k_lat = cache.slot_matrix("k_latent")?;
            let v_lat = cache.slot_matrix("v_latent")?;
            for head in 0..dims.n_heads {
                // Per-head keys/values recomputed from cached latents.
                let k_heads = k_lat.matmul(w.get(&format!("k.{head}"))?)?;
                let v_heads = v_lat.matmul(w.get(&format!("v.{head}"))?)?;
                let q = lat_q.matmul(w.get(&format!("q.{head}"))?)?;
                let mut scores: Vec<f64> = (0..t)
                    .map(|j| dot(q.row(0), k_heads.row(j)))
                    .collect();
                if let Some(b) = base {
                    let mut q_r = lat_q
                        .matmul(w.get(&format!("q_rope.{head}"))?)?
                        .data()
                        .to_vec();
                    rotate_row_in_place(&mut q_r, position, b);
                    let k_rope = cache.slot_data("k_rope");
                    let dr = dims.rope_dim_dr;
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s += dot(&q_r, &k_rope[j * dr..(j + 1) * dr]);
                    }
                }
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = *s * scale + bias(head, j);
                }
                softmax_row(&mut scores, position)?;
                let mut av = vec![0.0; d];
                for (j, p) in scores.iter().enumerate() {
                    for cc in 0..d {
                        av[cc] += p * v_heads.row(j)[cc];
                    }
                }
                let o = w.get(&format!("o.{head}"))?;
                for cc in 0..h {
                    out[cc] += dot(&av, o.row(cc));
                }
            }
            let _ = c_dim;
        }
        ArchKind::Mfa | ArchKind::MfaKr => {
            let c_dim = dims.latent_c;
            let key_reuse = spec.kind == ArchKind::MfaKr;
            let k_new = x_t.matmul(w.get("s_k")?)?;
            if key_reuse {
                // Unrotated keys: the value path needs the raw projection.
                cache.append("k", k_new.data());
            } else {
                let mut k_cached = k_new.data().to_vec();
                if let Some(b) = base {
                    rotate_row_in_place(&mut k_cached, position, b);
                }
                cache.append("k", &k_cached);
                cache.append("v", x_t.matmul(w.get("s_v")?)?.data());
            }

            let keys = cache.slot_matrix("k")?;
            let (scored_keys, values) = if key_reuse {
                let variant = spec.kr_variant();
                let n = variant.has_proj().then(|| w.get("kr_n")).transpose()?;
                let alpha = variant.has_gate().then(|| w.get("kr_alpha")).transpose()?;
                let values = kr::kr_value_from_key(variant, &keys, n, alpha)?;
                let mut scored = keys.clone();
                if let Some(b) = base {
                    for j in 0..t {
                        rotate_row_in_place(
                            &mut scored.data_mut()[j * c_dim..(j + 1) * c_dim],
                            j,
                            b,
                        );
                    }
                }
                (scored, values)
            } else {
                (keys, cache.slot_matrix("v")?)
            };

            let lat_q = spec
                .factored_q
                .then(|| x_t.matmul(w.get("s_q")?))
                .transpose()?;
            for head in 0..dims.n_heads {
                let q = match &lat_q {
                    Some(lq) => lq.matmul(w.get(&format!("q.{head}"))?)?,
                    None => x_t.matmul(w.get(&format!("w_q.{head}"))?)?,
                };
                let mut q = q.data().to_vec();
                if let Some(b) = base {
                    rotate_row_in_place(&mut q, position, b);
                }
                let mut scores: Vec<f64> = (0..t)
                    .map(|j| dot(&q, scored_keys.row(j)) * scale + bias(head, j))
                    .collect();
                softmax_row(&mut scores, position)?;
                let mut av = vec![0.0; c_dim];
                for (j, p) in scores.iter().enumerate() {
                    for cc in 0..c_dim {
                        av[cc] += p * values.row(j)[cc];
                    }
                }
                let o = w.get(&format!("o.{head}"))?; // H×C
                for cc in 0..h {
                    out[cc] += dot(&av, o.row(cc));
                }
            }
        }
    }

    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decode_step output".into()));
    }
    Tensor::new(vec![1, h], out)
}
