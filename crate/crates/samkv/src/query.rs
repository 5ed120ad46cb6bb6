//! Query vectors: the generic pooled query and its per-document
//! personalized variants.

use serde::{Deserialize, Serialize};

use crate::engine::{incremental_prefill, PrefillOptions};
use crate::error::{Error, Result};
use crate::kv::{build_composite_initial_local, BlockRole, DocumentCache};
use crate::linalg::{cosine, Mat};
use crate::model::ModelWeights;

/// Where a query vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Generic,
    Personalized { doc_id: String },
}

/// Per-layer, per-head pooled query representation.
///
/// `vectors[layer]` is a `[num_heads][head_dim]` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector {
    pub vectors: Vec<Mat>,
    pub num_heads: usize,
    pub head_dim: usize,
    pub provenance: Provenance,
}

impl QueryVector {
    pub fn num_layers(&self) -> usize {
        self.vectors.len()
    }

    /// Head `h` of layer `n`.
    pub fn head(&self, layer: usize, head: usize) -> &[f32] {
        self.vectors[layer].row(head)
    }
}

/// Pooled Q rows of a document's local blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalQCache {
    pub doc_id: String,
    /// Same layout as [`QueryVector::vectors`].
    pub vectors: Vec<Mat>,
    /// True when the document had no local blocks and the initial blocks
    /// were pooled instead.
    pub initial_fallback: bool,
}

fn pools_from_rows(rows: &Mat, num_heads: usize, head_dim: usize) -> Mat {
    // rows: [tokens][hidden] -> per-head mean, reshaped to [heads][head_dim].
    let mean = rows.mean_rows();
    let mut m = Mat::zeros(0, head_dim);
    for h in 0..num_heads {
        m.push_row(&mean[h * head_dim..(h + 1) * head_dim]);
    }
    m
}

/// Generic query vector: incrementally prefill the query over the
/// initial+local composite of every document, then mean-pool the per-layer
/// Q rows.
pub fn generic_query_vector(
    weights: &ModelWeights,
    query_tokens: &[u32],
    docs: &[DocumentCache],
) -> Result<QueryVector> {
    if query_tokens.is_empty() {
        return Err(Error::Input("empty query".into()));
    }
    let composite = build_composite_initial_local(docs)?;
    let view = composite.context_view();
    let out = incremental_prefill(
        weights,
        query_tokens,
        &view,
        PrefillOptions { retain_q: true, retain_attention: false },
    )?;
    let spec = &weights.spec;
    let vectors = out
        .layers
        .iter()
        .map(|layer| pools_from_rows(layer.q.as_ref().unwrap(), spec.num_heads, spec.head_dim))
        .collect();
    Ok(QueryVector {
        vectors,
        num_heads: spec.num_heads,
        head_dim: spec.head_dim,
        provenance: Provenance::Generic,
    })
}

/// Pool the retained Q rows of a document's local blocks (falling back to
/// the initial blocks for short documents that have no local role).
pub fn local_q_cache(doc: &DocumentCache) -> Result<LocalQCache> {
    let (role, initial_fallback) = if doc.blocks_with_role(BlockRole::Local).next().is_some() {
        (BlockRole::Local, false)
    } else {
        (BlockRole::Initial, true)
    };
    let blocks: Vec<_> = doc.blocks_with_role(role).collect();
    let num_layers = doc.num_layers();
    let hidden = doc.blocks[0].k[0].cols();

    let mut per_layer_rows: Vec<Mat> = (0..num_layers).map(|_| Mat::zeros(0, hidden)).collect();
    for block in &blocks {
        let q = block.q.as_ref().ok_or_else(|| {
            Error::State(format!(
                "document {} block {} has no retained Q rows",
                doc.doc_id, block.index
            ))
        })?;
        for (layer_rows, q_layer) in per_layer_rows.iter_mut().zip(q) {
            layer_rows.extend_rows(q_layer);
        }
    }

    // Head split is recovered from the row width: hidden = heads * head_dim is
    // not known here, so pool at full width and let callers reshape.
    Ok(LocalQCache {
        doc_id: doc.doc_id.clone(),
        vectors: per_layer_rows.iter().map(|rows| Mat::from_vec(1, hidden, rows.mean_rows())).collect(),
        initial_fallback,
    })
}

impl LocalQCache {
    /// Reshape the pooled vector of `layer` to `[heads][head_dim]`.
    pub fn heads(&self, layer: usize, num_heads: usize, head_dim: usize) -> Mat {
        let flat = self.vectors[layer].row(0);
        let mut m = Mat::zeros(0, head_dim);
        for h in 0..num_heads {
            m.push_row(&flat[h * head_dim..(h + 1) * head_dim]);
        }
        m
    }
}

/// Observed cosine statistics between the generic query and the local Q
/// caches, reported (not asserted) per run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub count: usize,
    pub min: f32,
    pub max: f32,
    pub mean: f32,
}

impl CosineStats {
    pub fn record(&mut self, value: f32) {
        if self.count == 0 {
            self.min = value;
            self.max = value;
        } else {
            self.min = self.min.min(value);
            self.max = self.max.max(value);
        }
        self.mean = (self.mean * self.count as f32 + value) / (self.count + 1) as f32;
        self.count += 1;
    }
}

/// Personalize the generic query for `target_doc` by adding the
/// |cos|-weighted local Q caches of every other document, averaged over
/// `D - 1`. With a single document the bias term is zero.
///
/// Cosines are computed independently per layer and head; zero-norm
/// operands contribute cos = 0.
pub fn personalize(
    q_que: &QueryVector,
    locals: &[LocalQCache],
    target_doc: &str,
    stats: Option<&mut CosineStats>,
) -> Result<QueryVector> {
    if locals.is_empty() {
        return Err(Error::Input("no local Q caches".into()));
    }
    if !locals.iter().any(|l| l.doc_id == target_doc) {
        return Err(Error::Input(format!("target document {target_doc} not among locals")));
    }
    let d = locals.len();
    let mut vectors = q_que.vectors.clone();
    let mut local_stats = CosineStats::default();

    if d > 1 {
        let weight = 1.0 / (d as f32 - 1.0);
        for (layer, out) in vectors.iter_mut().enumerate() {
            for head in 0..q_que.num_heads {
                // Accumulate the bias over other documents, then add once.
                let mut bias = vec![0.0f32; q_que.head_dim];
                for other in locals.iter().filter(|l| l.doc_id != target_doc) {
                    let other_heads = other.heads(layer, q_que.num_heads, q_que.head_dim);
                    let ov = other_heads.row(head);
                    let c = cosine(q_que.head(layer, head), ov);
                    local_stats.record(c);
                    let coeff = c.abs();
                    debug_assert!(coeff >= 0.0);
                    for (b, &o) in bias.iter_mut().zip(ov) {
                        *b += coeff * o;
                    }
                }
                for (dst, b) in out.row_mut(head).iter_mut().zip(&bias) {
                    *dst += weight * b;
                }
            }
        }
    }

    if let Some(s) = stats {
        *s = merge_stats(s, &local_stats);
    }

    Ok(QueryVector {
        vectors,
        num_heads: q_que.num_heads,
        head_dim: q_que.head_dim,
        provenance: Provenance::Personalized { doc_id: target_doc.to_string() },
    })
}

fn merge_stats(a: &CosineStats, b: &CosineStats) -> CosineStats {
    if a.count == 0 {
        return b.clone();
    }
    if b.count == 0 {
        return a.clone();
    }
    CosineStats {
        count: a.count + b.count,
        min: a.min.min(b.min),
        max: a.max.max(b.max),
        mean: (a.mean * a.count as f32 + b.mean * b.count as f32) / (a.count + b.count) as f32,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::prefill_full;
    use crate::kv::{document_cache_from_prefill, prefill_document, BlockConfig};
    use crate::model::{build_model, ModelSpec, PositionalMode};

    fn model() -> ModelWeights {
        build_model(&ModelSpec {
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            vocab_size: 64,
            positional_mode: PositionalMode::None,
            seed: 21,
        })
        .unwrap()
    }

    fn docs(w: &ModelWeights, n: usize) -> Vec<DocumentCache> {
        (0..n)
            .map(|i| {
                let tokens: Vec<u32> = (0..192).map(|t| ((t + i * 7) % 64) as u32).collect();
                prefill_document(
                    w,
                    &format!("doc-{i}"),
                    &tokens,
                    BlockConfig::default(),
                    PrefillOptions { retain_q: true, retain_attention: false },
                )
                .unwrap()
                .0
            })
            .collect()
    }

    #[test]
    fn one_token_query_equals_its_q_rows() {
        let w = model();
        let ds = docs(&w, 2);
        let q = generic_query_vector(&w, &[5], &ds).unwrap();
        // Recompute the raw Q rows directly.
        let composite = build_composite_initial_local(&ds).unwrap();
        let view = composite.context_view();
        let out = incremental_prefill(
            &w,
            &[5],
            &view,
            PrefillOptions { retain_q: true, retain_attention: false },
        )
        .unwrap();
        for (layer, pooled) in q.vectors.iter().enumerate() {
            let raw = out.layers[layer].q.as_ref().unwrap().row(0);
            for h in 0..2 {
                assert_eq!(pooled.row(h), &raw[h * 4..(h + 1) * 4]);
            }
        }
    }

    #[test]
    fn duplicated_token_pools_both_rows() {
        let w = model();
        let ds = docs(&w, 2);
        let q = generic_query_vector(&w, &[9, 9], &ds).unwrap();
        let composite = build_composite_initial_local(&ds).unwrap();
        let view = composite.context_view();
        let out = incremental_prefill(
            &w,
            &[9, 9],
            &view,
            PrefillOptions { retain_q: true, retain_attention: false },
        )
        .unwrap();
        for (layer, pooled) in q.vectors.iter().enumerate() {
            let rows = out.layers[layer].q.as_ref().unwrap();
            for h in 0..2 {
                for d in 0..4 {
                    let expect = (rows.row(0)[h * 4 + d] + rows.row(1)[h * 4 + d]) / 2.0;
                    assert!((pooled.row(h)[d] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn shape_and_determinism() {
        let w = model();
        let ds = docs(&w, 3);
        let q1 = generic_query_vector(&w, &[1, 2, 3], &ds).unwrap();
        let q2 = generic_query_vector(&w, &[1, 2, 3], &ds).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(q1.num_layers(), 2);
        assert_eq!(q1.vectors[0].rows(), 2);
        assert_eq!(q1.vectors[0].cols(), 4);
    }

    #[test]
    fn local_q_single_token_block() {
        // 65-token doc with block size 64: blocks [0,64) initial and [64,65)
        // local; the local pool is that single token's Q row.
        let w = model();
        let tokens: Vec<u32> = (0..65).map(|t| (t % 64) as u32).collect();
        let prefill = prefill_full(
            &w,
            &tokens,
            PrefillOptions { retain_q: true, retain_attention: false },
        )
        .unwrap();
        let cache = document_cache_from_prefill("d", &tokens, &prefill, BlockConfig::default());
        let local = local_q_cache(&cache).unwrap();
        assert!(!local.initial_fallback);
        for (layer, v) in local.vectors.iter().enumerate() {
            assert_eq!(v.row(0), prefill.layers[layer].q.as_ref().unwrap().row(64));
        }
    }

    #[test]
    fn local_q_pools_across_local_blocks() {
        let w = model();
        let ds = docs(&w, 1);
        let local = local_q_cache(&ds[0]).unwrap();
        // External mean oracle over the two local blocks' Q rows.
        let doc = &ds[0];
        for layer in 0..2 {
            let mut sum = vec![0.0f32; 8];
            let mut count = 0;
            for block in doc.blocks_with_role(BlockRole::Local) {
                let q = &block.q.as_ref().unwrap()[layer];
                for r in 0..q.rows() {
                    for (s, &x) in sum.iter_mut().zip(q.row(r)) {
                        *s += x;
                    }
                    count += 1;
                }
            }
            for (i, s) in sum.iter().enumerate() {
                assert!((local.vectors[layer].row(0)[i] - s / count as f32).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn short_doc_falls_back_to_initial_q() {
        let w = model();
        let tokens: Vec<u32> = (0..50).map(|t| t as u32).collect();
        let prefill = prefill_full(
            &w,
            &tokens,
            PrefillOptions { retain_q: true, retain_attention: false },
        )
        .unwrap();
        let cache = document_cache_from_prefill("short", &tokens, &prefill, BlockConfig::default());
        let local = local_q_cache(&cache).unwrap();
        assert!(local.initial_fallback);
    }

    #[test]
    fn missing_q_rows_is_state_error() {
        let w = model();
        let (cache, _) = prefill_document(
            &w,
            "noq",
            &(0..192).map(|t| (t % 64) as u32).collect::<Vec<_>>(),
            BlockConfig::default(),
            PrefillOptions::default(),
        )
        .unwrap();
        assert!(matches!(local_q_cache(&cache), Err(Error::State(_))));
    }

    fn hand_query(vec2: [f32; 2]) -> QueryVector {
        QueryVector {
            vectors: vec![Mat::from_vec(1, 2, vec2.to_vec())],
            num_heads: 1,
            head_dim: 2,
            provenance: Provenance::Generic,
        }
    }

    fn hand_local(doc_id: &str, vec2: [f32; 2]) -> LocalQCache {
        LocalQCache {
            doc_id: doc_id.to_string(),
            vectors: vec![Mat::from_vec(1, 2, vec2.to_vec())],
            initial_fallback: false,
        }
    }

    #[test]
    fn personalize_single_doc_is_identity() {
        let q = hand_query([1.0, 0.0]);
        let locals = vec![hand_local("a", [3.0, 4.0])];
        let out = personalize(&q, &locals, "a", None).unwrap();
        assert_eq!(out.vectors, q.vectors);
    }

    #[test]
    fn personalize_orthogonal_locals_is_identity() {
        let q = hand_query([1.0, 0.0]);
        let locals = vec![
            hand_local("a", [5.0, 5.0]),
            hand_local("b", [0.0, 2.0]),
            hand_local("c", [0.0, -7.0]),
        ];
        let out = personalize(&q, &locals, "a", None).unwrap();
        assert_eq!(out.vectors, q.vectors);
    }

    #[test]
    fn personalize_hand_arithmetic_case() {
        // D=3: target a; others b=(0,1) orthogonal, c=(1,0) parallel.
        // Expected: (1,0) + 1/2 * (0*(0,1) + 1*(1,0)) = (1.5, 0).
        let q = hand_query([1.0, 0.0]);
        let locals = vec![
            hand_local("a", [9.0, 9.0]),
            hand_local("b", [0.0, 1.0]),
            hand_local("c", [1.0, 0.0]),
        ];
        let out = personalize(&q, &locals, "a", None).unwrap();
        assert_eq!(out.vectors[0].row(0), &[1.5, 0.0]);
    }

    #[test]
    fn personalize_scaling_generic_query() {
        // Doubling Q_que doubles its term while the |cos| weights on fixed
        // nonzero locals are scale-invariant.
        let q1 = hand_query([1.0, 2.0]);
        let q2 = hand_query([2.0, 4.0]);
        let locals = vec![hand_local("a", [0.5, 0.5]), hand_local("b", [3.0, -1.0])];
        let out1 = personalize(&q1, &locals, "a", None).unwrap();
        let out2 = personalize(&q2, &locals, "a", None).unwrap();
        let b1: Vec<f32> = out1.vectors[0]
            .row(0)
            .iter()
            .zip(q1.vectors[0].row(0))
            .map(|(o, q)| o - q)
            .collect();
        let b2: Vec<f32> = out2.vectors[0]
            .row(0)
            .iter()
            .zip(q2.vectors[0].row(0))
            .map(|(o, q)| o - q)
            .collect();
        for (a, b) in b1.iter().zip(&b2) {
            assert!((a - b).abs() < 1e-6, "bias changed under query scaling: {a} vs {b}");
        }
    }

    #[test]
    fn personalize_zero_norm_local_contributes_nothing() {
        let q = hand_query([1.0, 0.0]);
        let locals = vec![hand_local("a", [1.0, 1.0]), hand_local("b", [0.0, 0.0])];
        let out = personalize(&q, &locals, "a", None).unwrap();
        assert_eq!(out.vectors, q.vectors);
    }

    #[test]
    fn personalize_missing_target_is_input_error() {
        let q = hand_query([1.0, 0.0]);
        let locals = vec![hand_local("a", [1.0, 1.0])];
        assert!(matches!(personalize(&q, &locals, "zz", None), Err(Error::Input(_))));
    }
}
