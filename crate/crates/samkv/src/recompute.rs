//! Recompute scheduling and execution: token selection under a budget,
//! cross-layer alignment with padding rows, overwrite/fusion cache updates,
//! and the final query prefill over the rebuilt cache.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::analysis::{pauta_low_outliers, BlockAttribute};
use crate::engine::{greedy_token, incremental_prefill, logits, recompute_selective, PrefillOptions};
use crate::error::{Error, Result};
use crate::kv::{BlockRole, CompositeCache, CompositeLayer, CompositeSlot, DocumentCache, StrippedCache};
use crate::linalg::{cosine, Mat};
use crate::model::ModelWeights;
use crate::selection::SelectionPlan;

/// Why a token ended up in the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Initial,
    Local,
    HighAttention,
}

/// Cache update policy after recomputation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdatePolicy {
    Overwrite,
    #[default]
    Fusion,
}

/// Per-layer sets of composite-slot positions to recompute.
#[derive(Debug, Clone)]
pub struct RecomputeSchedule {
    pub layers: Vec<BTreeSet<usize>>,
    pub tags: BTreeMap<usize, SourceTag>,
    pub policy: UpdatePolicy,
}

impl RecomputeSchedule {
    /// Identical position set at every layer (the default layout).
    pub fn uniform(
        positions: impl IntoIterator<Item = (usize, SourceTag)>,
        num_layers: usize,
        policy: UpdatePolicy,
    ) -> Self {
        let mut tags = BTreeMap::new();
        let mut set = BTreeSet::new();
        for (pos, tag) in positions {
            set.insert(pos);
            tags.insert(pos, tag);
        }
        RecomputeSchedule { layers: vec![set; num_layers], tags, policy }
    }

    pub fn empty(num_layers: usize, policy: UpdatePolicy) -> Self {
        RecomputeSchedule { layers: vec![BTreeSet::new(); num_layers], tags: BTreeMap::new(), policy }
    }

    /// Union of scheduled positions over all layers.
    pub fn all_positions(&self) -> BTreeSet<usize> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn scheduled_count(&self) -> usize {
        self.all_positions().len()
    }
}

/// Blend weights observed while fusing recomputed rows into the cache.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ThetaStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ThetaStats {
    pub fn record(&mut self, theta: f64) {
        if self.count == 0 {
            self.min = theta;
            self.max = theta;
        } else {
            self.min = self.min.min(theta);
            self.max = self.max.max(theta);
        }
        self.mean = (self.mean * self.count as f64 + theta) / (self.count + 1) as f64;
        self.count += 1;
    }
}

/// Apply an update policy to one cached row.
///
/// Fusion blends `theta * new + (1 - theta) * old` with
/// `theta = cos(new, old)` clamped to `[0, 1]`; a negative cosine keeps the
/// old row. Overwrite returns the new row unchanged.
pub fn apply_update(
    old: &[f32],
    new: &[f32],
    policy: UpdatePolicy,
    stats: Option<&mut ThetaStats>,
) -> Vec<f32> {
    match policy {
        UpdatePolicy::Overwrite => new.to_vec(),
        UpdatePolicy::Fusion => {
            let theta = cosine(new, old).clamp(0.0, 1.0);
            if let Some(s) = stats {
                s.record(theta as f64);
            }
            old.iter().zip(new).map(|(&o, &n)| theta * n + (1.0 - theta) * o).collect()
        }
    }
}

/// Execution trace of a selective recomputation, per `[layer][slot]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecomputeTrace {
    /// K/V was recomputed (and the cache row updated) here.
    pub computed_kv: Vec<Vec<bool>>,
    /// The token's layer output (hidden-state propagation) was computed here.
    pub computed_output: Vec<Vec<bool>>,
    /// The cached row was read by some attention computation without being
    /// recomputed first.
    pub read_cached: Vec<Vec<bool>>,
    /// The row is an alignment-only padding slot at this layer.
    pub padded: Vec<Vec<bool>>,
}

impl RecomputeTrace {
    pub fn new(num_layers: usize, num_slots: usize) -> Self {
        RecomputeTrace {
            computed_kv: vec![vec![false; num_slots]; num_layers],
            computed_output: vec![vec![false; num_slots]; num_layers],
            read_cached: vec![vec![false; num_slots]; num_layers],
            padded: vec![vec![false; num_slots]; num_layers],
        }
    }

    /// Ordered (layer, slot, state) rows for JSON dumps: state is one of
    /// `computed`, `reused`, or `padded`, with `output` flagged separately.
    pub fn to_json(&self) -> serde_json::Value {
        let mut rows = Vec::new();
        for (layer, kv) in self.computed_kv.iter().enumerate() {
            for slot in 0..kv.len() {
                let state = if kv[slot] {
                    "computed"
                } else if self.padded[layer][slot] {
                    "padded"
                } else if self.read_cached[layer][slot] {
                    "reused"
                } else {
                    "untouched"
                };
                rows.push(serde_json::json!({
                    "layer": layer,
                    "slot": slot,
                    "state": state,
                    "output": self.computed_output[layer][slot],
                }));
            }
        }
        serde_json::json!({ "events": rows })
    }
}

/// Per-document, per-layer retained block indices.
pub type PerLayerBlocks = Vec<Vec<Vec<usize>>>;

/// Build an aligned composite from explicit per-layer block choices.
///
/// Every layer exposes the union of all layers' blocks; rows a layer did
/// not retain are flagged as padding and carry the prefilled KV from the
/// document cache.
pub fn align_layers_explicit(
    docs: &[DocumentCache],
    per_doc_layer_blocks: &PerLayerBlocks,
) -> Result<CompositeCache> {
    if docs.is_empty() {
        return Err(Error::Input("empty document list".into()));
    }
    let num_layers = docs[0].num_layers();
    let hidden = docs[0].blocks[0].k[0].cols();

    let mut slots: Vec<CompositeSlot> = Vec::new();
    let mut layers: Vec<CompositeLayer> = (0..num_layers)
        .map(|_| CompositeLayer { k: Mat::zeros(0, hidden), v: Mat::zeros(0, hidden), padded: Vec::new() })
        .collect();

    for (doc_index, (doc, layer_blocks)) in docs.iter().zip(per_doc_layer_blocks).enumerate() {
        if layer_blocks.len() != num_layers {
            return Err(Error::Cache(format!(
                "document {} has per-layer selections for {} layers, model has {num_layers}",
                doc.doc_id,
                layer_blocks.len()
            )));
        }
        for set in layer_blocks {
            for &b in set {
                if b >= doc.blocks.len() {
                    return Err(Error::Cache(format!(
                        "selection references block {b} of document {}, which has {} blocks",
                        doc.doc_id,
                        doc.blocks.len()
                    )));
                }
            }
        }
        // Union of retained blocks across layers, ascending.
        let union: BTreeSet<usize> = layer_blocks.iter().flatten().copied().collect();
        for &bi in &union {
            let block = &doc.blocks[bi];
            for pos in block.span.0..block.span.1 {
                slots.push(CompositeSlot {
                    doc_index,
                    block_index: bi,
                    role: block.role,
                    doc_pos: pos,
                    token_id: doc.token_ids[pos],
                });
            }
            for (n, layer) in layers.iter_mut().enumerate() {
                let retained = layer_blocks[n].contains(&bi);
                layer.k.extend_rows(&block.k[n]);
                layer.v.extend_rows(&block.v[n]);
                layer.padded.extend(std::iter::repeat(!retained).take(block.len()));
            }
        }
    }

    Ok(CompositeCache { slots, layers })
}

/// Align the documents' retained blocks across layers.
///
/// Selection plans retain the same blocks at every layer, so this produces
/// no padding by itself; [`align_layers_explicit`] handles genuinely
/// layer-specific selections.
pub fn align_layers(plans: &[SelectionPlan], docs: &[DocumentCache]) -> Result<CompositeCache> {
    let num_layers = docs.first().map_or(0, |d| d.num_layers());
    let per_layer: PerLayerBlocks =
        plans.iter().map(|plan| vec![plan.retained_blocks(); num_layers]).collect();
    align_layers_explicit(docs, &per_layer)
}

/// Summary of what a schedule covers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleStats {
    pub scheduled_tokens: usize,
    pub initial_local_tokens: usize,
    pub high_attention_tokens: usize,
    /// Scheduled tokens over the documents' original token count.
    pub recomputation_ratio: f32,
}

/// Choose the tokens to recompute.
///
/// Initial- and local-role slots are always scheduled. Middle-block tokens
/// join when their block's alpha is a low-side 3-sigma outlier at some
/// stable layer (the block's representative token), strongest outliers
/// first, capped at `ceil(budget * retained_tokens)` extra tokens. A budget
/// of exactly 1 schedules every retained token, which reproduces a full
/// joint prefill under the overwrite policy.
pub fn build_schedule(
    aligned: &CompositeCache,
    plans: &[SelectionPlan],
    attrs_per_doc: &[Vec<Vec<BlockAttribute>>],
    n_star: &[usize],
    budget: f32,
    policy: UpdatePolicy,
    num_layers: usize,
) -> Result<(RecomputeSchedule, ScheduleStats)> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::Config(format!("recompute budget {budget} outside (0, 1]")));
    }
    let total_tokens: usize = plans.iter().map(|p| p.total_tokens).sum();
    let retained_tokens = aligned.slots.len();

    let mut scheduled: Vec<(usize, SourceTag)> = Vec::new();
    let mut initial_local = 0usize;
    for (pos, slot) in aligned.slots.iter().enumerate() {
        match slot.role {
            BlockRole::Initial => {
                scheduled.push((pos, SourceTag::Initial));
                initial_local += 1;
            }
            BlockRole::Local => {
                scheduled.push((pos, SourceTag::Local));
                initial_local += 1;
            }
            BlockRole::Middle => {}
        }
    }

    let mut high_attention = 0usize;
    if (budget - 1.0).abs() < f32::EPSILON || budget >= 1.0 {
        // Full recomputation of the retained cache.
        for (pos, slot) in aligned.slots.iter().enumerate() {
            if slot.role == BlockRole::Middle {
                scheduled.push((pos, SourceTag::HighAttention));
                high_attention += 1;
            }
        }
    } else {
        // Candidate tokens: per stable layer, pool the middle-block alphas of
        // every document, take the low-side outliers, map to representative
        // tokens, keep those whose block survived selection.
        let mut candidates: BTreeMap<(usize, usize), f64> = BTreeMap::new(); // (doc, pos) -> alpha
        for &layer in n_star {
            let mut pool: Vec<f64> = Vec::new();
            let mut owners: Vec<(usize, usize)> = Vec::new(); // (doc, block)
            for (doc_index, attrs) in attrs_per_doc.iter().enumerate() {
                for attr in &attrs[layer] {
                    if block_role_of(plans, doc_index, attr.block_index) == Some(BlockRole::Middle) {
                        pool.push(attr.alpha);
                        owners.push((doc_index, attr.block_index));
                    }
                }
            }
            for idx in pauta_low_outliers(&pool) {
                let (doc_index, block_index) = owners[idx];
                let plan = &plans[doc_index];
                let retained =
                    plan.retained_middle.iter().any(|r| r.block_index == block_index);
                if !retained {
                    continue;
                }
                let rep = attrs_per_doc[doc_index][layer]
                    .iter()
                    .find(|a| a.block_index == block_index)
                    .map(|a| a.representative_token)
                    .unwrap();
                let alpha = pool[idx];
                candidates
                    .entry((doc_index, rep))
                    .and_modify(|a| *a = a.min(alpha))
                    .or_insert(alpha);
            }
        }

        let cap = ((budget * retained_tokens as f32).ceil() as usize).max(0);
        let mut ordered: Vec<((usize, usize), f64)> = candidates.into_iter().collect();
        ordered.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        for ((doc_index, doc_pos), _) in ordered.into_iter().take(cap) {
            if let Some(pos) = aligned
                .slots
                .iter()
                .position(|s| s.doc_index == doc_index && s.doc_pos == doc_pos)
            {
                scheduled.push((pos, SourceTag::HighAttention));
                high_attention += 1;
            }
        }
    }

    let schedule = RecomputeSchedule::uniform(scheduled, num_layers, policy);
    let stats = ScheduleStats {
        scheduled_tokens: schedule.scheduled_count(),
        initial_local_tokens: initial_local,
        high_attention_tokens: high_attention,
        recomputation_ratio: if total_tokens == 0 {
            0.0
        } else {
            schedule.scheduled_count() as f32 / total_tokens as f32
        },
    };
    Ok((schedule, stats))
}

fn block_role_of(plans: &[SelectionPlan], doc_index: usize, block_index: usize) -> Option<BlockRole> {
    let plan = plans.get(doc_index)?;
    if plan.always_kept.contains(&block_index) {
        // Initial or local; the distinction does not matter here.
        Some(BlockRole::Initial)
    } else if block_index < plan.block_tokens.len() {
        Some(BlockRole::Middle)
    } else {
        None
    }
}

/// Execute a schedule over an aligned cache and strip the padding rows,
/// restoring each layer's own retained slot set.
pub fn run_recompute(
    weights: &ModelWeights,
    aligned: &CompositeCache,
    schedule: &RecomputeSchedule,
) -> Result<(StrippedCache, RecomputeTrace, ThetaStats)> {
    let (updated, trace, theta) = recompute_selective(weights, aligned, schedule)?;
    Ok((updated.strip_padding(), trace, theta))
}

/// Outcome of the final query prefill.
#[derive(Debug, Clone)]
pub struct FinalAnswer {
    pub logits: Vec<f32>,
    pub next_token: u32,
    /// Final-layer hidden state at the last query position.
    pub final_hidden: Vec<f32>,
}

/// Incremental prefill of the query over the rebuilt cache, with greedy
/// next-token selection (temperature-zero semantics).
pub fn final_answer_prefill(
    weights: &ModelWeights,
    query_tokens: &[u32],
    cache: &StrippedCache,
) -> Result<FinalAnswer> {
    let view = cache.context_view();
    let out = incremental_prefill(weights, query_tokens, &view, PrefillOptions::default())?;
    let final_hidden = out.final_hidden.row(query_tokens.len() - 1).to_vec();
    let logit_values = logits(weights, &final_hidden);
    let next_token = greedy_token(&logit_values);
    Ok(FinalAnswer { logits: logit_values, next_token, final_hidden })
}
