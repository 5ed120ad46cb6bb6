//! Attention statistics over blocked caches: per-block importance via
//! power-law decay exponents, unimportance via sustained attention means,
//! 3-sigma outlier detection, and stable-layer selection.
//!
//! Attention is aggregated by mean over heads before any analysis here;
//! statistics run in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Floor for attention values before taking logs.
const LOG_CLAMP: f64 = 1e-12;

/// Mean over per-head attention matrices.
pub fn mean_heads(heads: &[Mat]) -> Mat {
    let rows = heads[0].rows();
    let cols = heads[0].cols();
    let mut out = Mat::zeros(rows, cols);
    let inv = 1.0 / heads.len() as f32;
    for head in heads {
        for r in 0..rows {
            for (o, &v) in out.row_mut(r).iter_mut().zip(head.row(r)) {
                *o += v * inv;
            }
        }
    }
    out
}

/// Dual importance/unimportance attributes of one block at one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockAttribute {
    pub block_index: usize,
    /// Power-law decay exponent of the representative token's attention
    /// column; smaller means more important. `+inf` when the fit failed.
    pub alpha: f64,
    pub fit_c: f64,
    /// 0-based rank by ascending alpha within the layer (ties to the
    /// earlier block).
    pub importance_rank: usize,
    /// Mean attention received by the representative token; lower means
    /// the block is less important.
    pub unimportance_score: f64,
    /// Absolute position of the representative token.
    pub representative_token: usize,
    /// Number of attention samples clamped to the log floor.
    pub clamped_samples: usize,
}

/// The in-span column with the highest mean attention from subsequent rows
/// (strictly below the diagonal). Ties resolve to the earliest position;
/// a span with no subsequent rows falls back to its first position.
pub fn representative_token(attn: &Mat, span: (usize, usize)) -> usize {
    let rows = attn.rows();
    let mut best = span.0;
    let mut best_score = f64::NEG_INFINITY;
    for c in span.0..span.1 {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for r in c + 1..rows {
            sum += attn.row(r)[c] as f64;
            count += 1;
        }
        let score = if count == 0 { 0.0 } else { sum / count as f64 };
        if score > best_score {
            best_score = score;
            best = c;
        }
    }
    best
}

/// Least-squares fit of `log y = log c - alpha * log x` over x = 1, 2, ….
///
/// Nonpositive samples are clamped to `1e-12` before the log; fewer than
/// three samples is an analysis error. Returns `(alpha, c, clamped_count)`.
pub fn fit_power_law(series: &[f64]) -> Result<(f64, f64, usize)> {
    if series.len() < 3 {
        return Err(Error::Analysis(format!(
            "power-law fit needs at least 3 samples, got {}",
            series.len()
        )));
    }
    let mut clamped = 0usize;
    let n = series.len() as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, &raw) in series.iter().enumerate() {
        let y = if raw <= 0.0 {
            clamped += 1;
            LOG_CLAMP
        } else {
            raw
        };
        let lx = ((i + 1) as f64).ln();
        let ly = y.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return Err(Error::Analysis("degenerate abscissa in power-law fit".into()));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let alpha = -slope;
    let intercept = (sy - slope * sx) / n;
    Ok((alpha, intercept.exp(), clamped))
}

/// Per-block attributes for one layer's (head-meaned) attention matrix.
///
/// Fit failures do not propagate: the affected block gets `alpha = +inf`
/// and sorts least important.
pub fn block_attributes(attn: &Mat, spans: &[(usize, usize)]) -> Vec<BlockAttribute> {
    let rows = attn.rows();
    let mut attrs: Vec<BlockAttribute> = spans
        .iter()
        .enumerate()
        .map(|(bi, &span)| {
            let rep = representative_token(attn, span);
            let series: Vec<f64> = (rep + 1..rows).map(|r| attn.row(r)[rep] as f64).collect();
            let unimportance = if series.is_empty() {
                0.0
            } else {
                series.iter().sum::<f64>() / series.len() as f64
            };
            let (alpha, fit_c, clamped) = match fit_power_law(&series) {
                Ok(fit) => fit,
                Err(_) => (f64::INFINITY, 0.0, 0),
            };
            BlockAttribute {
                block_index: bi,
                alpha,
                fit_c,
                importance_rank: 0,
                unimportance_score: unimportance,
                representative_token: rep,
                clamped_samples: clamped,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..attrs.len()).collect();
    order.sort_by(|&a, &b| {
        attrs[a]
            .alpha
            .partial_cmp(&attrs[b].alpha)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for (rank, &idx) in order.iter().enumerate() {
        attrs[idx].importance_rank = rank;
    }
    attrs
}

/// Indices whose value deviates from the mean by more than three population
/// standard deviations. Zero spread yields the empty set.
pub fn pauta_outliers(values: &[f64]) -> Vec<usize> {
    pauta_filter(values, |dev, bound| dev.abs() > bound)
}

/// Low-side 3-sigma outliers (`v < mean - 3*stddev`): unusually small
/// values, i.e. unusually important alphas.
pub fn pauta_low_outliers(values: &[f64]) -> Vec<usize> {
    pauta_filter(values, |dev, bound| dev < -bound)
}

fn pauta_filter(values: &[f64], keep: impl Fn(f64, f64) -> bool) -> Vec<usize> {
    if values.len() < 2 {
        return Vec::new();
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return Vec::new();
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Vec::new();
    }
    let bound = 3.0 * std;
    values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v.is_finite() && keep(v - mean, bound))
        .map(|(i, _)| i)
        .collect()
}

/// Outcome of stable-layer detection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StableLayerReport {
    /// Per-layer stability score accumulated over the analysis corpus.
    pub scores: Vec<u32>,
    /// Selected stable layers, ascending.
    pub n_star: Vec<usize>,
    pub threshold: f64,
    /// True when no layer cleared the threshold and the trailing-layer
    /// fallback was used.
    pub used_fallback: bool,
}

/// Identify attention-stable layers from per-document, per-layer block
/// alphas.
///
/// For each document, the block with the best model-wide average importance
/// rank is the reference block; a layer scores a point when that block's
/// alpha is a low-side 3-sigma outlier within the layer. Layers scoring at
/// least half the maximum, restricted to the trailing half of the model,
/// form the stable set; if none qualify the final `max(1, ceil(N/8))`
/// layers are used.
pub fn detect_stable_layers(
    per_doc_layer_alphas: &[Vec<Vec<f64>>],
    num_layers: usize,
) -> Result<StableLayerReport> {
    if num_layers == 0 {
        return Err(Error::Config("model has no layers".into()));
    }
    if num_layers == 1 {
        return Ok(StableLayerReport {
            scores: vec![0],
            n_star: vec![0],
            threshold: 0.0,
            used_fallback: false,
        });
    }

    let mut scores = vec![0u32; num_layers];
    for doc in per_doc_layer_alphas {
        if doc.len() != num_layers {
            return Err(Error::Analysis(format!(
                "rankings cover {} layers, model has {num_layers}",
                doc.len()
            )));
        }
        let n_blocks = doc[0].len();
        if n_blocks == 0 {
            continue;
        }
        if doc.iter().any(|layer| layer.len() != n_blocks) {
            return Err(Error::Analysis("layers rank different block sets".into()));
        }

        // Model-wide average rank per block.
        let mut avg_rank = vec![0.0f64; n_blocks];
        for layer in doc {
            let ranks = ranks_ascending(layer);
            for (a, r) in avg_rank.iter_mut().zip(ranks) {
                *a += r as f64;
            }
        }
        let beta = (0..n_blocks)
            .min_by(|&a, &b| avg_rank[a].partial_cmp(&avg_rank[b]).unwrap().then(a.cmp(&b)))
            .unwrap();

        for (n, layer) in doc.iter().enumerate() {
            if pauta_low_outliers(layer).contains(&beta) {
                scores[n] += 1;
            }
        }
    }

    let max_score = *scores.iter().max().unwrap();
    let threshold = max_score as f64 * 0.5;
    let trailing_start = num_layers / 2;
    let mut n_star: Vec<usize> = Vec::new();
    if max_score > 0 {
        n_star = (trailing_start..num_layers)
            .filter(|&n| scores[n] as f64 >= threshold)
            .collect();
    }
    let mut used_fallback = false;
    if n_star.is_empty() {
        used_fallback = true;
        let count = usize::max(1, num_layers.div_ceil(8));
        n_star = (num_layers - count..num_layers).collect();
    }
    Ok(StableLayerReport { scores, n_star, threshold, used_fallback })
}

/// 0-based rank of each value when sorted ascending (ties to the earlier
/// index).
fn ranks_ascending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut ranks = vec![0usize; values.len()];
    for (rank, &idx) in order.iter().enumerate() {
        ranks[idx] = rank;
    }
    ranks
}
