//! Middle-block selection: anchor/max/min scoring, the per-layer retention
//! ratio and its layer average, per-document top-P retention, and the
//! cross-context filter.

use serde::{Deserialize, Serialize};

use crate::analysis::BlockAttribute;
use crate::error::{Error, Result};
use crate::kv::{BlockRole, DocumentCache};
use crate::linalg::dot;
use crate::query::QueryVector;

/// Behaviour when the anchor score falls at or below the minimum score.
/// The ratio formula as written yields 0 there; `One` instead retains
/// everything on the grounds that every block then beats the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorBelowMin {
    #[default]
    Zero,
    One,
}

/// Anchor / strongest / weakest block scores for one document, restricted
/// to the stable layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorScores {
    pub doc_index: usize,
    pub per_layer: Vec<LayerScores>,
}

/// Head-meaned inner products at one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer: usize,
    pub s_anc: f32,
    pub s_max: f32,
    pub s_min: f32,
}

/// A retained middle block with its selection score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedBlock {
    pub block_index: usize,
    pub score: f32,
    /// Per-context min-max normalized score, filled by
    /// [`cross_context_filter`].
    pub norm_score: f32,
}

/// Per-document retention decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub doc_index: usize,
    pub doc_id: String,
    /// Layer-averaged retention ratio in `[0, 1]`.
    pub p: f32,
    /// Retained middle blocks, ascending block index.
    pub retained_middle: Vec<RetainedBlock>,
    /// Initial and local block indices; never dropped.
    pub always_kept: Vec<usize>,
    /// Token count of every block of the document, by block index.
    pub block_tokens: Vec<usize>,
    pub total_tokens: usize,
    /// Retained tokens divided by total tokens.
    pub sequence_ratio: f32,
}

impl SelectionPlan {
    pub fn retained_token_count(&self) -> usize {
        let kept: usize = self.always_kept.iter().map(|&b| self.block_tokens[b]).sum();
        let middle: usize =
            self.retained_middle.iter().map(|r| self.block_tokens[r.block_index]).sum();
        kept + middle
    }

    pub fn update_sequence_ratio(&mut self) {
        self.sequence_ratio = if self.total_tokens == 0 {
            0.0
        } else {
            self.retained_token_count() as f32 / self.total_tokens as f32
        };
    }

    /// Every retained block index (initial, middle, local), ascending.
    pub fn retained_blocks(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.always_kept.clone();
        all.extend(self.retained_middle.iter().map(|r| r.block_index));
        all.sort_unstable();
        all
    }
}

/// Head-meaned inner product between a query vector layer and a full-width
/// key vector.
fn head_mean_inner(q: &QueryVector, layer: usize, key: &[f32]) -> f32 {
    let mut sum = 0.0f32;
    for h in 0..q.num_heads {
        let seg = &key[h * q.head_dim..(h + 1) * q.head_dim];
        sum += dot(q.head(layer, h), seg);
    }
    sum / q.num_heads as f32
}

/// Anchor, maximum-attention, and minimum-attention scores per stable
/// layer.
///
/// The anchor key is the mean of the initial and local blocks' mean keys;
/// the max block is the middle block with the smallest alpha at the layer,
/// the min block the one with the lowest sustained-attention mean. Returns
/// an empty score list when the document has no middle blocks.
pub fn anchor_scores(
    q_hat: &QueryVector,
    doc: &DocumentCache,
    attrs_per_layer: &[Vec<BlockAttribute>],
    n_star: &[usize],
) -> AnchorScores {
    let doc_index = 0; // callers overwrite; kept for serialized context
    let middles: Vec<&crate::kv::KVBlock> = doc.middle_blocks().collect();
    if middles.is_empty() {
        return AnchorScores { doc_index, per_layer: Vec::new() };
    }
    let anchor_blocks: Vec<&crate::kv::KVBlock> =
        doc.blocks.iter().filter(|b| b.role != BlockRole::Middle).collect();

    let per_layer = n_star
        .iter()
        .map(|&layer| {
            // Mean of mean-keys over the anchor blocks.
            let hidden = doc.blocks[0].mean_key[layer].len();
            let mut anchor_key = vec![0.0f32; hidden];
            for b in &anchor_blocks {
                for (a, &m) in anchor_key.iter_mut().zip(&b.mean_key[layer]) {
                    *a += m;
                }
            }
            let inv = 1.0 / anchor_blocks.len() as f32;
            for a in &mut anchor_key {
                *a *= inv;
            }

            let attrs = &attrs_per_layer[layer];
            let max_block = middles
                .iter()
                .min_by(|a, b| {
                    let aa = attrs[a.index].alpha;
                    let ab = attrs[b.index].alpha;
                    aa.partial_cmp(&ab).unwrap_or(std::cmp::Ordering::Equal).then(a.index.cmp(&b.index))
                })
                .unwrap();
            let min_block = middles
                .iter()
                .min_by(|a, b| {
                    let ua = attrs[a.index].unimportance_score;
                    let ub = attrs[b.index].unimportance_score;
                    ua.partial_cmp(&ub).unwrap_or(std::cmp::Ordering::Equal).then(a.index.cmp(&b.index))
                })
                .unwrap();

            LayerScores {
                layer,
                s_anc: head_mean_inner(q_hat, layer, &anchor_key),
                s_max: head_mean_inner(q_hat, layer, &max_block.mean_key[layer]),
                s_min: head_mean_inner(q_hat, layer, &min_block.mean_key[layer]),
            }
        })
        .collect();

    AnchorScores { doc_index, per_layer }
}

/// Per-layer retention ratio.
///
/// `(s_max - s_anc) / (s_max - s_min)` when the anchor lies in
/// `(s_min, s_max]`, otherwise 0 (or 1 below the minimum under
/// [`AnchorBelowMin::One`]). An empty interval always yields 0.
pub fn layer_p(s_anc: f32, s_max: f32, s_min: f32, below_min: AnchorBelowMin) -> f32 {
    if s_max <= s_min {
        return 0.0;
    }
    if s_anc > s_min && s_anc <= s_max {
        (s_max - s_anc) / (s_max - s_min)
    } else if s_anc <= s_min && below_min == AnchorBelowMin::One {
        1.0
    } else {
        0.0
    }
}

/// Arithmetic mean of the per-layer ratios over the stable layers.
pub fn doc_p(per_layer: &[f32]) -> Result<f32> {
    if per_layer.is_empty() {
        return Err(Error::Config("empty stable layer set".into()));
    }
    Ok(per_layer.iter().sum::<f32>() / per_layer.len() as f32)
}

/// Retain the top `ceil(p * M)` middle blocks by head-and-layer-meaned
/// inner product between the personalized query and each block's mean key.
/// Ties go to the earlier block.
pub fn select_blocks(
    q_hat: &QueryVector,
    doc: &DocumentCache,
    doc_index: usize,
    p: f32,
    n_star: &[usize],
) -> SelectionPlan {
    let block_tokens: Vec<usize> = doc.blocks.iter().map(|b| b.len()).collect();
    let always_kept: Vec<usize> =
        doc.blocks.iter().filter(|b| b.role != BlockRole::Middle).map(|b| b.index).collect();

    let mut scored: Vec<(usize, f32)> = doc
        .middle_blocks()
        .map(|block| {
            let mut sum = 0.0f32;
            for &layer in n_star {
                sum += head_mean_inner(q_hat, layer, &block.mean_key[layer]);
            }
            (block.index, sum / n_star.len() as f32)
        })
        .collect();
    let m = scored.len();
    let keep = if m == 0 { 0 } else { ((p * m as f32).ceil() as usize).min(m) };
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    let mut retained: Vec<RetainedBlock> = scored
        .into_iter()
        .take(keep)
        .map(|(block_index, score)| RetainedBlock { block_index, score, norm_score: 0.0 })
        .collect();
    retained.sort_by_key(|r| r.block_index);

    let mut plan = SelectionPlan {
        doc_index,
        doc_id: doc.doc_id.clone(),
        p,
        retained_middle: retained,
        always_kept,
        block_tokens,
        total_tokens: doc.len(),
        sequence_ratio: 0.0,
    };
    plan.update_sequence_ratio();
    plan
}

/// Normalize retained-block scores per context and keep only the global
/// top `floor(T / D)` blocks, where `T` is the total retained middle-block
/// count and `D` the number of contexts. Initial and local blocks are
/// untouched; a plan's retained set never grows.
pub fn cross_context_filter(mut plans: Vec<SelectionPlan>) -> Result<Vec<SelectionPlan>> {
    if plans.is_empty() {
        return Err(Error::Input("no selection plans".into()));
    }
    let total: usize = plans.iter().map(|p| p.retained_middle.len()).sum();
    if total == 0 {
        return Ok(plans);
    }

    // Per-context min-max normalization; a flat score profile maps to 1.0
    // (the context's best block stays comparable across contexts).
    for plan in &mut plans {
        if plan.retained_middle.is_empty() {
            continue;
        }
        let min = plan.retained_middle.iter().map(|r| r.score).fold(f32::INFINITY, f32::min);
        let max = plan.retained_middle.iter().map(|r| r.score).fold(f32::NEG_INFINITY, f32::max);
        for r in &mut plan.retained_middle {
            r.norm_score = if max > min { (r.score - min) / (max - min) } else { 1.0 };
        }
    }

    let keep_global = total / plans.len();
    let mut pool: Vec<(usize, usize, f32)> = plans
        .iter()
        .enumerate()
        .flat_map(|(pi, plan)| {
            plan.retained_middle.iter().map(move |r| (pi, r.block_index, r.norm_score))
        })
        .collect();
    pool.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let survivors: std::collections::HashSet<(usize, usize)> =
        pool.into_iter().take(keep_global).map(|(pi, bi, _)| (pi, bi)).collect();

    for (pi, plan) in plans.iter_mut().enumerate() {
        plan.retained_middle.retain(|r| survivors.contains(&(pi, r.block_index)));
        plan.update_sequence_ratio();
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::block_attributes;
    use crate::engine::PrefillOptions;
    use crate::kv::{prefill_document, BlockConfig};
    use crate::linalg::Mat;
    use crate::model::{build_model, ModelSpec, PositionalMode};
    use crate::query::Provenance;

    fn model() -> crate::model::ModelWeights {
        build_model(&ModelSpec {
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            vocab_size: 64,
            positional_mode: PositionalMode::None,
            seed: 31,
        })
        .unwrap()
    }

    fn query(vals: &[f32]) -> QueryVector {
        // Two layers, 2 heads x 4 dims each, same vector at both layers.
        let m = Mat::from_vec(2, 4, vals.to_vec());
        QueryVector {
            vectors: vec![m.clone(), m],
            num_heads: 2,
            head_dim: 4,
            provenance: Provenance::Generic,
        }
    }

    fn doc_with_blocks(tokens: usize) -> (crate::model::ModelWeights, DocumentCache) {
        let w = model();
        let ids: Vec<u32> = (0..tokens).map(|t| (t % 64) as u32).collect();
        let (cache, _) =
            prefill_document(&w, "d", &ids, BlockConfig::default(), PrefillOptions::default())
                .unwrap();
        (w, cache)
    }

    #[test]
    fn layer_p_midpoint() {
        assert_eq!(layer_p(5.0, 10.0, 0.0, AnchorBelowMin::Zero), 0.5);
    }

    #[test]
    fn layer_p_anchor_at_max_is_zero() {
        assert_eq!(layer_p(10.0, 10.0, 0.0, AnchorBelowMin::Zero), 0.0);
    }

    #[test]
    fn layer_p_anchor_below_min_is_zero_by_default() {
        assert_eq!(layer_p(-1.0, 10.0, 0.0, AnchorBelowMin::Zero), 0.0);
        assert_eq!(layer_p(-1.0, 10.0, 0.0, AnchorBelowMin::One), 1.0);
    }

    #[test]
    fn layer_p_empty_interval_is_zero() {
        assert_eq!(layer_p(1.0, 2.0, 2.0, AnchorBelowMin::Zero), 0.0);
        assert_eq!(layer_p(1.0, 2.0, 3.0, AnchorBelowMin::One), 0.0);
    }

    #[test]
    fn doc_p_is_arithmetic_mean() {
        assert_eq!(doc_p(&[0.2, 0.4]).unwrap(), 0.3);
        assert_eq!(doc_p(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        let vals = [0.11, 0.93, 0.42, 0.37];
        let expect: f32 = vals.iter().sum::<f32>() / 4.0;
        assert_eq!(doc_p(&vals).unwrap(), expect);
        assert!(matches!(doc_p(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn anchor_scores_empty_for_doc_without_middles() {
        let (_, cache) = doc_with_blocks(192); // 3 blocks: ini, loc, loc
        let q = query(&[1.0; 8]);
        let attrs: Vec<Vec<BlockAttribute>> = (0..2)
            .map(|_| {
                let attn = Mat::zeros(192, 192);
                block_attributes(&attn, &cache.blocks.iter().map(|b| b.span).collect::<Vec<_>>())
            })
            .collect();
        let scores = anchor_scores(&q, &cache, &attrs, &[0, 1]);
        assert!(scores.per_layer.is_empty());
    }

    #[test]
    fn identical_keys_make_all_scores_equal() {
        let (_, mut cache) = doc_with_blocks(320);
        // Overwrite every mean key with the same vector.
        for block in &mut cache.blocks {
            for mk in &mut block.mean_key {
                mk.iter_mut().for_each(|x| *x = 0.5);
            }
        }
        let q = query(&[1.0, -1.0, 2.0, 0.0, 0.3, 0.3, 0.3, 0.3]);
        let spans: Vec<(usize, usize)> = cache.blocks.iter().map(|b| b.span).collect();
        let attrs: Vec<Vec<BlockAttribute>> =
            (0..2).map(|_| block_attributes(&Mat::zeros(320, 320), &spans)).collect();
        let scores = anchor_scores(&q, &cache, &attrs, &[1]);
        let ls = &scores.per_layer[0];
        assert_eq!(ls.s_anc, ls.s_max);
        assert_eq!(ls.s_max, ls.s_min);
    }

    #[test]
    fn max_min_blocks_match_brute_force() {
        // Synthetic attributes: 3 middle blocks with distinct alphas and
        // unimportance scores.
        let (_, cache) = doc_with_blocks(384); // ini, mid, mid, mid, loc, loc
        let spans: Vec<(usize, usize)> = cache.blocks.iter().map(|b| b.span).collect();
        let mut attn = Mat::zeros(384, 384);
        // Plant decaying columns in middle blocks 1..=3 with rates 2.0, 0.5, 4.0
        // and different magnitudes so unimportance ordering differs. Block 3
        // decays fastest from the smallest base, so its sustained mean is
        // the lowest.
        let plans = [(70usize, 2.0f64, 0.30f64), (140, 0.5, 0.05), (200, 4.0, 0.01)];
        for r in 0..384 {
            for &(rep, rate, base) in &plans {
                if r > rep {
                    attn.row_mut(r)[rep] = (base * ((r - rep) as f64).powf(-rate)) as f32;
                }
            }
            let used: f32 = attn.row(r).iter().sum();
            attn.row_mut(r)[r] += 1.0 - used;
        }
        let attrs_layer = block_attributes(&attn, &spans);
        let attrs = vec![attrs_layer.clone(), attrs_layer.clone()];
        let q = query(&[0.1; 8]);
        let scores = anchor_scores(&q, &cache, &attrs, &[0]);
        assert_eq!(scores.per_layer.len(), 1);

        // Brute force over middle blocks 1, 2, 3.
        let middle = [1usize, 2, 3];
        let best = middle
            .iter()
            .min_by(|&&a, &&b| attrs_layer[a].alpha.partial_cmp(&attrs_layer[b].alpha).unwrap())
            .unwrap();
        let worst = middle
            .iter()
            .min_by(|&&a, &&b| {
                attrs_layer[a]
                    .unimportance_score
                    .partial_cmp(&attrs_layer[b].unimportance_score)
                    .unwrap()
            })
            .unwrap();
        assert_eq!(*best, 2); // slowest decay
        assert_eq!(*worst, 3); // fastest decay from the smallest base
        let s = &scores.per_layer[0];
        let expect_max = head_mean_inner(&q, 0, &cache.blocks[*best].mean_key[0]);
        let expect_min = head_mean_inner(&q, 0, &cache.blocks[*worst].mean_key[0]);
        assert_eq!(s.s_max, expect_max);
        assert_eq!(s.s_min, expect_min);
    }

    #[test]
    fn select_blocks_p_zero_keeps_only_initial_local() {
        let (_, cache) = doc_with_blocks(320);
        let q = query(&[1.0; 8]);
        let plan = select_blocks(&q, &cache, 0, 0.0, &[0, 1]);
        assert!(plan.retained_middle.is_empty());
        assert_eq!(plan.always_kept, vec![0, 3, 4]);
        assert!((plan.sequence_ratio - 192.0 / 320.0).abs() < 1e-6);
    }

    #[test]
    fn select_blocks_p_one_keeps_everything() {
        let (_, cache) = doc_with_blocks(320);
        let q = query(&[1.0; 8]);
        let plan = select_blocks(&q, &cache, 0, 1.0, &[0, 1]);
        assert_eq!(plan.retained_middle.len(), 2);
        assert_eq!(plan.sequence_ratio, 1.0);
    }

    #[test]
    fn select_blocks_top_half_matches_brute_force() {
        let (_, mut cache) = doc_with_blocks(448); // ini + 4 middles + 2 local
        assert_eq!(cache.middle_blocks().count(), 4);
        // Plant mean keys so scores are 4, 2, 8, 1 for middle blocks 1..=4.
        let planted = [4.0f32, 2.0, 8.0, 1.0];
        for (i, &val) in planted.iter().enumerate() {
            for mk in &mut cache.blocks[1 + i].mean_key {
                mk.iter_mut().for_each(|x| *x = val / 8.0);
            }
        }
        let q = query(&[1.0; 8]);
        let plan = select_blocks(&q, &cache, 0, 0.5, &[0, 1]);
        let kept: Vec<usize> = plan.retained_middle.iter().map(|r| r.block_index).collect();
        assert_eq!(kept, vec![1, 3]); // scores 4 and 8
    }

    #[test]
    fn select_blocks_scale_invariant_in_query() {
        let (_, cache) = doc_with_blocks(448);
        let q1 = query(&[0.3, -1.0, 0.7, 2.0, -0.2, 0.1, 0.9, -0.4]);
        let mut q2 = q1.clone();
        for m in &mut q2.vectors {
            for r in 0..m.rows() {
                for v in m.row_mut(r) {
                    *v *= 7.5;
                }
            }
        }
        let p1 = select_blocks(&q1, &cache, 0, 0.5, &[0, 1]);
        let p2 = select_blocks(&q2, &cache, 0, 0.5, &[0, 1]);
        let k1: Vec<usize> = p1.retained_middle.iter().map(|r| r.block_index).collect();
        let k2: Vec<usize> = p2.retained_middle.iter().map(|r| r.block_index).collect();
        assert_eq!(k1, k2);
    }

    fn plan_with_scores(doc_index: usize, scores: &[f32]) -> SelectionPlan {
        let retained: Vec<RetainedBlock> = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| RetainedBlock { block_index: i + 1, score, norm_score: 0.0 })
            .collect();
        let n_blocks = scores.len() + 3;
        SelectionPlan {
            doc_index,
            doc_id: format!("doc-{doc_index}"),
            p: 0.5,
            retained_middle: retained,
            always_kept: vec![0, n_blocks - 2, n_blocks - 1],
            block_tokens: vec![64; n_blocks],
            total_tokens: 64 * n_blocks,
            sequence_ratio: 0.0,
        }
    }

    #[test]
    fn filter_single_context_keeps_everything() {
        let plans = vec![plan_with_scores(0, &[3.0, 1.0, 2.0])];
        let out = cross_context_filter(plans).unwrap();
        assert_eq!(out[0].retained_middle.len(), 3);
        // Normalization filled in.
        assert!(out[0].retained_middle.iter().any(|r| r.norm_score == 1.0));
        assert!(out[0].retained_middle.iter().any(|r| r.norm_score == 0.0));
    }

    #[test]
    fn filter_two_contexts_six_blocks_keeps_three() {
        let plans = vec![plan_with_scores(0, &[3.0, 1.0, 2.0]), plan_with_scores(1, &[9.0, 8.0, 7.0])];
        let out = cross_context_filter(plans).unwrap();
        let survivors: usize = out.iter().map(|p| p.retained_middle.len()).sum();
        assert_eq!(survivors, 3);
    }

    #[test]
    fn filter_survivors_match_brute_force_global_topk() {
        let plans = vec![plan_with_scores(0, &[10.0, 0.0, 5.0]), plan_with_scores(1, &[4.0, 2.0])];
        // Normalized: ctx0 -> [1.0, 0.0, 0.5]; ctx1 -> [1.0, 0.0].
        // Global top floor(5/2) = 2: ctx0 block1 (1.0), ctx1 block1 (1.0).
        let out = cross_context_filter(plans).unwrap();
        let kept0: Vec<usize> = out[0].retained_middle.iter().map(|r| r.block_index).collect();
        let kept1: Vec<usize> = out[1].retained_middle.iter().map(|r| r.block_index).collect();
        assert_eq!(kept0, vec![1]);
        assert_eq!(kept1, vec![1]);
    }

    #[test]
    fn filter_never_grows_plans_or_touches_always_kept() {
        let plans = vec![plan_with_scores(0, &[1.0, 2.0, 3.0, 4.0]), plan_with_scores(1, &[5.0])];
        let before: Vec<usize> = plans.iter().map(|p| p.retained_middle.len()).collect();
        let kept_before: Vec<Vec<usize>> = plans.iter().map(|p| p.always_kept.clone()).collect();
        let out = cross_context_filter(plans).unwrap();
        for (i, plan) in out.iter().enumerate() {
            assert!(plan.retained_middle.len() <= before[i]);
            assert_eq!(plan.always_kept, kept_before[i]);
        }
    }

    #[test]
    fn filter_no_retained_blocks_is_identity() {
        let plans = vec![plan_with_scores(0, &[]), plan_with_scores(1, &[])];
        let out = cross_context_filter(plans).unwrap();
        assert!(out.iter().all(|p| p.retained_middle.is_empty()));
    }
}
