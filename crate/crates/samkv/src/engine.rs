//! Deterministic multi-head attention forward passes.
//!
//! Three entry points share one inner loop so that equivalent computations
//! are bit-identical:
//!
//! * [`prefill_full`] — causal self-attention over a whole sequence.
//! * [`incremental_prefill`] — new tokens attend to an existing per-layer
//!   K/V context followed by themselves. Context row counts may differ per
//!   layer (sparse caches are not aligned across layers).
//! * [`recompute_selective`] — re-derives K/V for scheduled tokens inside an
//!   aligned composite cache, propagating hidden states through lower layers
//!   and reusing cached entries for everything else.

use crate::error::{Error, Result};
use crate::kv::CompositeCache;
use crate::linalg::{dot, softmax_inplace, Mat};
use crate::model::ModelWeights;
use crate::recompute::{RecomputeSchedule, RecomputeTrace, ThetaStats, UpdatePolicy};

/// What a prefill call should retain beyond K/V.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrefillOptions {
    /// Keep per-layer Q rows of the processed tokens.
    pub retain_q: bool,
    /// Keep per-layer, per-head post-softmax attention matrices.
    pub retain_attention: bool,
}

/// Per-layer tensors produced for the processed tokens.
#[derive(Debug, Clone)]
pub struct LayerActivation {
    /// `[tokens][hidden]` keys of the new tokens.
    pub k: Mat,
    /// `[tokens][hidden]` values of the new tokens.
    pub v: Mat,
    /// `[tokens][hidden]` queries, when requested.
    pub q: Option<Mat>,
    /// Per-head `[tokens][ctx+tokens]` attention rows, when requested.
    /// Row `t` is zero beyond column `ctx + t` (causal mask).
    pub attention: Option<Vec<Mat>>,
}

/// Output of a prefill pass.
#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub layers: Vec<LayerActivation>,
    /// `[tokens][hidden]` hidden states after the last layer.
    pub final_hidden: Mat,
}

/// Borrowed per-layer K/V context: `(keys, values)`, one pair per layer.
pub type ContextView<'a> = [(&'a Mat, &'a Mat)];

/// Causal self-attention over `token_ids` with no prior context.
pub fn prefill_full(
    weights: &ModelWeights,
    token_ids: &[u32],
    opts: PrefillOptions,
) -> Result<PrefillOutput> {
    let hidden = weights.spec.hidden_dim();
    let empty: Vec<(Mat, Mat)> =
        (0..weights.spec.num_layers).map(|_| (Mat::zeros(0, hidden), Mat::zeros(0, hidden))).collect();
    let view: Vec<(&Mat, &Mat)> = empty.iter().map(|(k, v)| (k, v)).collect();
    incremental_prefill(weights, token_ids, &view, opts)
}

/// New tokens attend causally to `context` followed by themselves.
///
/// Context row counts may differ between layers; positions for the
/// absolute-learned mode are taken from the layer-0 context length.
pub fn incremental_prefill(
    weights: &ModelWeights,
    token_ids: &[u32],
    context: &ContextView<'_>,
    opts: PrefillOptions,
) -> Result<PrefillOutput> {
    let spec = &weights.spec;
    let hidden = spec.hidden_dim();
    if token_ids.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if context.len() != spec.num_layers {
        return Err(Error::Cache(format!(
            "context has {} layers, model has {}",
            context.len(),
            spec.num_layers
        )));
    }
    for (n, (k, v)) in context.iter().enumerate() {
        if k.cols() != hidden || v.cols() != hidden || k.rows() != v.rows() {
            return Err(Error::Cache(format!("context layer {n} has mismatched shapes")));
        }
    }

    let n_new = token_ids.len();
    let mut layers: Vec<LayerActivation> = (0..spec.num_layers)
        .map(|n| LayerActivation {
            k: Mat::zeros(0, hidden),
            v: Mat::zeros(0, hidden),
            q: opts.retain_q.then(|| Mat::zeros(0, hidden)),
            attention: opts
                .retain_attention
                .then(|| {
                    let width = context[n].0.rows() + n_new;
                    (0..spec.num_heads).map(|_| Mat::zeros(n_new, width)).collect()
                }),
        })
        .collect();
    let mut final_hidden = Mat::zeros(0, hidden);

    for (t, &token) in token_ids.iter().enumerate() {
        let position = context[0].0.rows() + t;
        let mut h = weights.embed(token, position)?;
        for (n, lw) in weights.layers.iter().enumerate() {
            let q = lw.wq.vecmat(&h);
            let k = lw.wk.vecmat(&h);
            let v = lw.wv.vecmat(&h);
            let layer = &mut layers[n];
            layer.k.push_row(&k);
            layer.v.push_row(&v);
            if let Some(qm) = &mut layer.q {
                qm.push_row(&q);
            }

            let (ctx_k, ctx_v) = context[n];
            let attn_out = attend(
                spec.num_heads,
                spec.head_dim,
                &q,
                &[(ctx_k, ctx_v), (&layer.k, &layer.v)],
                layer.attention.as_mut().map(|mats| (t, mats)),
            );
            let delta = lw.wo.vecmat(&attn_out);
            for (hi, d) in h.iter_mut().zip(&delta) {
                *hi += d;
            }
        }
        final_hidden.push_row(&h);
    }

    Ok(PrefillOutput { layers, final_hidden })
}

/// Multi-head attention of one query row over stacked K/V segments.
///
/// Segments are attended in order; all rows of every segment are visible
/// (callers enforce causality by passing only visible rows).
fn attend(
    num_heads: usize,
    head_dim: usize,
    q: &[f32],
    segments: &[(&Mat, &Mat)],
    mut record: Option<(usize, &mut Vec<Mat>)>,
) -> Vec<f32> {
    let hidden = num_heads * head_dim;
    let total_rows: usize = segments.iter().map(|(k, _)| k.rows()).sum();
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut out = vec![0.0f32; hidden];
    let mut scores = vec![0.0f32; total_rows];

    for head in 0..num_heads {
        let hs = head * head_dim;
        let he = hs + head_dim;
        let qh = &q[hs..he];

        let mut idx = 0;
        for (k, _) in segments {
            for r in 0..k.rows() {
                scores[idx] = dot(qh, &k.row(r)[hs..he]) * scale;
                idx += 1;
            }
        }
        softmax_inplace(&mut scores);

        let out_h = &mut out[hs..he];
        let mut idx = 0;
        for (_, v) in segments {
            for r in 0..v.rows() {
                let w = scores[idx];
                for (o, &vv) in out_h.iter_mut().zip(&v.row(r)[hs..he]) {
                    *o += w * vv;
                }
                idx += 1;
            }
        }

        if let Some((row, mats)) = record.as_mut() {
            let dest = mats[head].row_mut(*row);
            dest[..total_rows].copy_from_slice(&scores);
        }
    }
    out
}

/// Next-token logits from a final hidden state (tied embedding).
pub fn logits(weights: &ModelWeights, hidden: &[f32]) -> Vec<f32> {
    (0..weights.spec.vocab_size)
        .map(|t| dot(hidden, weights.embedding.row(t)))
        .collect()
}

/// Greedy argmax; ties resolve to the lowest token id.
pub fn greedy_token(logit_values: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &l) in logit_values.iter().enumerate() {
        if l > logit_values[best] {
            best = i;
        }
    }
    best as u32
}

/// Selective recomputation over an aligned composite cache.
///
/// For every layer, scheduled tokens get fresh K/V derived from their
/// propagated hidden states and the cache entry is updated under the
/// schedule's policy. A token scheduled at layer `n` has its outputs
/// computed at every layer below `n`; those attention reads use the current
/// cache (updated entries for scheduled tokens, original prefilled entries
/// for everything else, including padding slots). Entries never scheduled
/// are returned byte-identical.
pub fn recompute_selective(
    weights: &ModelWeights,
    aligned: &CompositeCache,
    schedule: &RecomputeSchedule,
) -> Result<(CompositeCache, RecomputeTrace, ThetaStats)> {
    let spec = &weights.spec;
    let hidden = spec.hidden_dim();
    let n_layers = spec.num_layers;
    let n_slots = aligned.slots.len();

    if aligned.layers.len() != n_layers {
        return Err(Error::Cache(format!(
            "aligned cache has {} layers, model has {}",
            aligned.layers.len(),
            n_layers
        )));
    }
    if schedule.layers.len() != n_layers {
        return Err(Error::Schedule(format!(
            "schedule has {} layers, model has {}",
            schedule.layers.len(),
            n_layers
        )));
    }
    for (n, set) in schedule.layers.iter().enumerate() {
        if let Some(&p) = set.iter().next_back() {
            if p >= n_slots {
                return Err(Error::Schedule(format!(
                    "schedule references slot {p} at layer {n}, cache has {n_slots} slots"
                )));
            }
        }
    }

    let mut updated = aligned.clone();
    let mut trace = RecomputeTrace::new(n_layers, n_slots);
    for (n, layer) in aligned.layers.iter().enumerate() {
        trace.padded[n].copy_from_slice(&layer.padded);
    }
    let mut theta = ThetaStats::default();

    // Highest layer at which each slot is scheduled; drives rule 1.
    let mut max_sched: Vec<Option<usize>> = vec![None; n_slots];
    for (n, set) in schedule.layers.iter().enumerate() {
        for &p in set {
            max_sched[p] = Some(n);
        }
    }

    // Hidden states for every slot that appears in the schedule anywhere.
    let mut hidden_states: Vec<Option<Vec<f32>>> = vec![None; n_slots];
    for (slot_idx, meta) in aligned.slots.iter().enumerate() {
        if max_sched[slot_idx].is_some() {
            hidden_states[slot_idx] = Some(weights.embed(meta.token_id, slot_idx)?);
        }
    }

    for (n, lw) in weights.layers.iter().enumerate() {
        // Refresh K/V of scheduled tokens first; attention below then sees
        // the updated rows, matching a joint prefill when everything is
        // scheduled.
        for &t in &schedule.layers[n] {
            let h = hidden_states[t]
                .as_ref()
                .expect("scheduled slot has a propagated hidden state");
            let k_new = lw.wk.vecmat(h);
            let v_new = lw.wv.vecmat(h);
            let layer = &mut updated.layers[n];
            apply_row_update(layer.k.row_mut(t), &k_new, schedule.policy, &mut theta);
            apply_row_update(layer.v.row_mut(t), &v_new, schedule.policy, &mut theta);
            trace.computed_kv[n][t] = true;
        }

        // Propagate hidden states for tokens scheduled above this layer.
        for t in 0..n_slots {
            let needs_output = matches!(max_sched[t], Some(m) if m > n);
            if !needs_output {
                continue;
            }
            let h = hidden_states[t].as_mut().expect("active slot has a hidden state");
            let q = lw.wq.vecmat(h);
            let layer = &updated.layers[n];
            let visible_k = layer.k.row_slice(0, t + 1);
            let visible_v = layer.v.row_slice(0, t + 1);
            let attn_out =
                attend(spec.num_heads, spec.head_dim, &q, &[(&visible_k, &visible_v)], None);
            let delta = lw.wo.vecmat(&attn_out);
            for (hi, d) in h.iter_mut().zip(&delta) {
                *hi += d;
            }
            trace.computed_output[n][t] = true;
            for u in 0..=t {
                if !trace.computed_kv[n][u] {
                    trace.read_cached[n][u] = true;
                }
            }
        }
    }

    debug_assert_eq!(updated.layers[0].k.cols(), hidden);
    Ok((updated, trace, theta))
}

/// Update one cached row in place under the given policy, recording the
/// fusion weight when applicable.
fn apply_row_update(old: &mut [f32], new: &[f32], policy: UpdatePolicy, stats: &mut ThetaStats) {
    match policy {
        UpdatePolicy::Overwrite => old.copy_from_slice(new),
        UpdatePolicy::Fusion => {
            let fused = crate::recompute::apply_update(old, new, policy, Some(stats));
            old.copy_from_slice(&fused);
        }
    }
}
