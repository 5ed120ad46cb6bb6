//! End-to-end pipeline: corpus generation, per-document prefill, query
//! personalization, selection, recomputation, and the final answer prefill,
//! with a full-recompute baseline computed alongside for quality tracking.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{block_attributes, detect_stable_layers, mean_heads, BlockAttribute};
use crate::corpus::{generate_corpus, Corpus, CorpusSpec};
use crate::engine::{greedy_token, incremental_prefill, logits, prefill_full, PrefillOptions};
use crate::error::{Error, Result};
use crate::kv::{prefill_document, BlockConfig, DocumentCache};
use crate::linalg::{cosine, fnv1a, Mat};
use crate::model::{build_model, ModelSpec, ModelWeights, PositionalMode};
use crate::query::{generic_query_vector, local_q_cache, personalize, CosineStats, QueryVector};
use crate::recompute::{
    align_layers, build_schedule, final_answer_prefill, run_recompute, ThetaStats, UpdatePolicy,
};
use crate::selection::{
    anchor_scores, cross_context_filter, doc_p, layer_p, select_blocks, AnchorBelowMin,
    SelectionPlan,
};

/// Pipeline execution modes; the non-default ones bypass stages to act as
/// comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Full pipeline: selection, personalization, recomputation.
    #[default]
    Samkv,
    /// Joint prefill of everything; no sparsification at all.
    FullRecompute,
    /// Selection without any recomputation.
    ReuseOnly,
    /// Keep only initial/local blocks (no middle selection), recompute them.
    InitialLocalOnly,
}

/// Complete run configuration. Field defaults follow the standard block
/// layout: 64-token blocks, one initial and two local blocks, a 0.15
/// recompute budget, and fusion updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelSpec,
    /// Load weights from this file instead of building them from the spec.
    pub weights_path: Option<PathBuf>,
    pub num_docs: usize,
    pub doc_len: usize,
    pub overlap_fraction: f32,
    pub query_len: usize,
    pub block_size: usize,
    pub n_initial: usize,
    pub n_local: usize,
    pub recompute_budget: f32,
    pub policy: UpdatePolicy,
    pub mode: RunMode,
    /// Seeds the corpus; the model keeps its own seed.
    pub seed: u64,
    /// Fixed stable-layer set; `None` detects it from the corpus.
    pub n_star_preset: Option<Vec<usize>>,
    pub anchor_below_min: AnchorBelowMin,
    /// Override the per-document retention ratio, bypassing the score-based
    /// ratio and the cross-context filter. Used for oracle-equivalence
    /// checks (force 1.0 with budget 1.0 and overwrite updates to reproduce
    /// a joint prefill).
    pub force_p: Option<f32>,
    pub report_path: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelSpec {
                num_layers: 2,
                num_heads: 2,
                head_dim: 8,
                vocab_size: 4096,
                positional_mode: PositionalMode::None,
                seed: 7,
            },
            weights_path: None,
            num_docs: 3,
            doc_len: 1600,
            overlap_fraction: 0.3,
            query_len: 16,
            block_size: 64,
            n_initial: 1,
            n_local: 2,
            recompute_budget: 0.15,
            policy: UpdatePolicy::Fusion,
            mode: RunMode::Samkv,
            seed: 0,
            n_star_preset: None,
            anchor_below_min: AnchorBelowMin::Zero,
            force_p: None,
            report_path: None,
        }
    }
}

impl PipelineConfig {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig { block_size: self.block_size, n_initial: self.n_initial, n_local: self.n_local }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.seed,
            num_docs: self.num_docs,
            doc_len: self.doc_len,
            overlap_fraction: self.overlap_fraction,
            query_len: self.query_len,
            vocab_size: self.model.vocab_size,
            sink_prefix: crate::corpus::default_sink_prefix(),
            sink_rate: crate::corpus::default_sink_rate(),
        }
    }

    /// Stable hash of everything that determines the corpus and model, used
    /// to decide whether two reports are comparable.
    pub fn corpus_fingerprint(&self) -> String {
        let payload = serde_json::json!({
            "model": self.model,
            "corpus": self.corpus_spec(),
        });
        format!("{:016x}", fnv1a(payload.to_string().as_bytes()))
    }
}

/// Per-document selection outcome in the report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DocReport {
    pub doc_id: String,
    pub p: f32,
    pub retained_middle_blocks: Vec<usize>,
    pub retained_tokens: usize,
    pub total_tokens: usize,
    pub sequence_ratio: f32,
}

/// Everything a pipeline run produces. Identical config and seed yield a
/// byte-identical report except for the timing entries.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub mode: RunMode,
    pub seed: u64,
    pub corpus_fingerprint: String,
    pub n_star: Vec<usize>,
    pub stable_layer_scores: Vec<u32>,
    pub per_doc: Vec<DocReport>,
    pub retained_tokens: usize,
    pub scheduled_tokens: usize,
    pub total_tokens: usize,
    pub sequence_ratio: f32,
    pub recomputation_ratio: f32,
    pub theta: Option<ThetaStats>,
    pub query_local_cosine: CosineStats,
    pub next_token: u32,
    pub baseline_next_token: u32,
    pub next_token_agreement: bool,
    /// Cosine between the final hidden state and the full-recompute
    /// baseline's, at the last query position.
    pub baseline_hidden_cosine: f32,
    pub final_hidden: Vec<f32>,
    pub timings_ms: Vec<(String, f64)>,
}

impl RunReport {
    /// JSON with timing fields zeroed, for byte-level determinism checks.
    pub fn canonical_json(&self) -> String {
        let mut clone = self.clone();
        clone.timings_ms.clear();
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }
}

struct StageClock {
    timings: Vec<(String, f64)>,
    started: Instant,
}

impl StageClock {
    fn new() -> Self {
        StageClock { timings: Vec::new(), started: Instant::now() }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push((stage.to_string(), (now - self.started).as_secs_f64() * 1000.0));
        self.started = now;
    }
}

fn answer_over_view(
    weights: &ModelWeights,
    query: &[u32],
    view: &[(&Mat, &Mat)],
) -> Result<(Vec<f32>, u32)> {
    let out = incremental_prefill(weights, query, view, PrefillOptions::default())?;
    let hidden = out.final_hidden.row(query.len() - 1).to_vec();
    let next = greedy_token(&logits(weights, &hidden));
    Ok((hidden, next))
}

/// Run the configured pipeline over a freshly generated corpus.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport> {
    let mut clock = StageClock::new();

    let weights = match &config.weights_path {
        Some(path) => ModelWeights::load(path).map_err(|e| e.in_stage("model"))?,
        None => build_model(&config.model).map_err(|e| e.in_stage("model"))?,
    };
    clock.lap("model");

    let corpus = generate_corpus(&config.corpus_spec()).map_err(|e| e.in_stage("corpus"))?;
    clock.lap("corpus");

    // Full-recompute baseline: joint prefill of every document, then the
    // query. Always computed; it is both a mode and the quality reference.
    let joint_tokens: Vec<u32> =
        corpus.documents.iter().flat_map(|d| d.token_ids.iter().copied()).collect();
    let joint = prefill_full(&weights, &joint_tokens, PrefillOptions::default())
        .map_err(|e| e.in_stage("baseline"))?;
    let joint_view: Vec<(&Mat, &Mat)> = joint.layers.iter().map(|l| (&l.k, &l.v)).collect();
    let (baseline_hidden, baseline_next) =
        answer_over_view(&weights, &corpus.query, &joint_view).map_err(|e| e.in_stage("baseline"))?;
    clock.lap("baseline");

    let total_tokens = joint_tokens.len();

    if config.mode == RunMode::FullRecompute {
        clock.lap("final_prefill");
        return Ok(RunReport {
            mode: config.mode,
            seed: config.seed,
            corpus_fingerprint: config.corpus_fingerprint(),
            n_star: Vec::new(),
            stable_layer_scores: Vec::new(),
            per_doc: Vec::new(),
            retained_tokens: total_tokens,
            scheduled_tokens: total_tokens,
            total_tokens,
            sequence_ratio: 1.0,
            recomputation_ratio: 1.0,
            theta: None,
            query_local_cosine: CosineStats::default(),
            next_token: baseline_next,
            baseline_next_token: baseline_next,
            next_token_agreement: true,
            baseline_hidden_cosine: 1.0,
            final_hidden: baseline_hidden,
            timings_ms: clock.timings,
        });
    }

    // Per-document independent prefill with Q retention (for the local Q
    // caches) and attention retention (for block analysis).
    let block_cfg = config.block_config();
    let mut docs: Vec<DocumentCache> = Vec::with_capacity(corpus.documents.len());
    let mut attrs_per_doc: Vec<Vec<Vec<BlockAttribute>>> = Vec::with_capacity(corpus.documents.len());
    for doc in &corpus.documents {
        let (cache, prefill) = prefill_document(
            &weights,
            &doc.doc_id,
            &doc.token_ids,
            block_cfg,
            PrefillOptions { retain_q: true, retain_attention: true },
        )
        .map_err(|e| e.in_stage("prefill"))?;
        let spans: Vec<(usize, usize)> = cache.blocks.iter().map(|b| b.span).collect();
        let attrs: Vec<Vec<BlockAttribute>> = prefill
            .layers
            .iter()
            .map(|layer| block_attributes(&mean_heads(layer.attention.as_ref().unwrap()), &spans))
            .collect();
        attrs_per_doc.push(attrs);
        docs.push(cache);
        // `prefill` (with its attention maps) drops here.
    }
    clock.lap("prefill");

    let (n_star, stable_scores) = match &config.n_star_preset {
        Some(preset) => {
            let mut layers: Vec<usize> = preset
                .iter()
                .copied()
                .filter(|&n| n < config.model.num_layers)
                .collect();
            layers.sort_unstable();
            layers.dedup();
            if layers.is_empty() {
                return Err(Error::Config("stable-layer preset selects no valid layers".into())
                    .in_stage("analysis"));
            }
            (layers, Vec::new())
        }
        None => {
            let alphas: Vec<Vec<Vec<f64>>> = attrs_per_doc
                .iter()
                .map(|doc| {
                    doc.iter()
                        .map(|layer| layer.iter().map(|a| a.alpha).collect())
                        .collect()
                })
                .collect();
            let report = detect_stable_layers(&alphas, config.model.num_layers)
                .map_err(|e| e.in_stage("analysis"))?;
            (report.n_star, report.scores)
        }
    };
    clock.lap("analysis");

    // Selection plans per mode.
    let mut cos_stats = CosineStats::default();
    let mut plans: Vec<SelectionPlan> = match config.mode {
        RunMode::InitialLocalOnly => {
            let dummy = zero_query(&weights);
            docs.iter()
                .enumerate()
                .map(|(i, d)| select_blocks(&dummy, d, i, 0.0, &n_star))
                .collect()
        }
        _ => {
            let q_que = generic_query_vector(&weights, &corpus.query, &docs)
                .map_err(|e| e.in_stage("query_vector"))?;
            clock.lap("query_vector");
            let locals = docs
                .iter()
                .map(local_q_cache)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("personalize"))?;
            let personalized: Vec<QueryVector> = docs
                .iter()
                .map(|d| personalize(&q_que, &locals, &d.doc_id, Some(&mut cos_stats)))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("personalize"))?;
            clock.lap("personalize");

            docs.iter()
                .enumerate()
                .map(|(i, doc)| {
                    let q_hat = &personalized[i];
                    let p = match config.force_p {
                        Some(forced) => forced.clamp(0.0, 1.0),
                        None => {
                            let scores = anchor_scores(q_hat, doc, &attrs_per_doc[i], &n_star);
                            if scores.per_layer.is_empty() {
                                0.0
                            } else {
                                let per_layer: Vec<f32> = scores
                                    .per_layer
                                    .iter()
                                    .map(|s| {
                                        layer_p(s.s_anc, s.s_max, s.s_min, config.anchor_below_min)
                                    })
                                    .collect();
                                doc_p(&per_layer)?
                            }
                        }
                    };
                    Ok(select_blocks(q_hat, doc, i, p, &n_star))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("selection"))?
        }
    };
    clock.lap("selection");

    if config.force_p.is_none() && config.mode != RunMode::InitialLocalOnly {
        plans = cross_context_filter(plans).map_err(|e| e.in_stage("cross_filter"))?;
    }
    clock.lap("cross_filter");

    let aligned = align_layers(&plans, &docs).map_err(|e| e.in_stage("align"))?;
    clock.lap("align");

    let retained_tokens: usize = plans.iter().map(|p| p.retained_token_count()).sum();
    let sequence_ratio = retained_tokens as f32 / total_tokens as f32;

    let (stripped, theta, scheduled_tokens, recomputation_ratio) =
        if config.mode == RunMode::ReuseOnly {
            (aligned.strip_padding(), None, 0usize, 0.0f32)
        } else {
            let (schedule, stats) = build_schedule(
                &aligned,
                &plans,
                &attrs_per_doc,
                &n_star,
                config.recompute_budget,
                config.policy,
                config.model.num_layers,
            )
            .map_err(|e| e.in_stage("schedule"))?;
            clock.lap("schedule");
            let (stripped, _trace, theta) =
                run_recompute(&weights, &aligned, &schedule).map_err(|e| e.in_stage("recompute"))?;
            let theta = (config.policy == UpdatePolicy::Fusion).then_some(theta);
            (stripped, theta, stats.scheduled_tokens, stats.recomputation_ratio)
        };
    clock.lap("recompute");

    let answer = final_answer_prefill(&weights, &corpus.query, &stripped)
        .map_err(|e| e.in_stage("final_prefill"))?;
    clock.lap("final_prefill");

    let per_doc: Vec<DocReport> = plans
        .iter()
        .map(|p| DocReport {
            doc_id: p.doc_id.clone(),
            p: p.p,
            retained_middle_blocks: p.retained_middle.iter().map(|r| r.block_index).collect(),
            retained_tokens: p.retained_token_count(),
            total_tokens: p.total_tokens,
            sequence_ratio: p.sequence_ratio,
        })
        .collect();

    Ok(RunReport {
        mode: config.mode,
        seed: config.seed,
        corpus_fingerprint: config.corpus_fingerprint(),
        n_star,
        stable_layer_scores: stable_scores,
        per_doc,
        retained_tokens,
        scheduled_tokens,
        total_tokens,
        sequence_ratio,
        recomputation_ratio,
        theta,
        query_local_cosine: cos_stats,
        next_token: answer.next_token,
        baseline_next_token: baseline_next,
        next_token_agreement: answer.next_token == baseline_next,
        baseline_hidden_cosine: cosine(&answer.final_hidden, &baseline_hidden),
        final_hidden: answer.final_hidden,
        timings_ms: clock.timings,
    })
}

fn zero_query(weights: &ModelWeights) -> QueryVector {
    QueryVector {
        vectors: (0..weights.spec.num_layers)
            .map(|_| Mat::zeros(weights.spec.num_heads, weights.spec.head_dim))
            .collect(),
        num_heads: weights.spec.num_heads,
        head_dim: weights.spec.head_dim,
        provenance: crate::query::Provenance::Generic,
    }
}

/// Differences between two runs over the same corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub corpus_fingerprint: String,
    pub mode_a: RunMode,
    pub mode_b: RunMode,
    pub sequence_ratio_delta: f32,
    pub recomputation_ratio_delta: f32,
    /// Cosine between the two runs' final hidden states.
    pub hidden_cosine: f32,
    pub next_token_agreement: bool,
    pub baseline_cosine_delta: f32,
}

/// Compare two reports produced over the same corpus and seed.
pub fn compare_runs(a: &RunReport, b: &RunReport) -> Result<CompareSummary> {
    if a.corpus_fingerprint != b.corpus_fingerprint || a.seed != b.seed {
        return Err(Error::Comparison(format!(
            "reports cover different corpora ({}/{} vs {}/{})",
            a.corpus_fingerprint, a.seed, b.corpus_fingerprint, b.seed
        )));
    }
    Ok(CompareSummary {
        corpus_fingerprint: a.corpus_fingerprint.clone(),
        mode_a: a.mode,
        mode_b: b.mode,
        sequence_ratio_delta: a.sequence_ratio - b.sequence_ratio,
        recomputation_ratio_delta: a.recomputation_ratio - b.recomputation_ratio,
        hidden_cosine: cosine(&a.final_hidden, &b.final_hidden),
        next_token_agreement: a.next_token == b.next_token,
        baseline_cosine_delta: a.baseline_hidden_cosine - b.baseline_hidden_cosine,
    })
}

/// Run stable-layer detection alone and emit its report (the
/// `analyze-layers` subcommand).
pub fn analyze_layers(config: &PipelineConfig) -> Result<crate::analysis::StableLayerReport> {
    let weights = match &config.weights_path {
        Some(path) => ModelWeights::load(path)?,
        None => build_model(&config.model)?,
    };
    let corpus: Corpus = generate_corpus(&config.corpus_spec())?;
    let block_cfg = config.block_config();
    let mut alphas: Vec<Vec<Vec<f64>>> = Vec::new();
    for doc in &corpus.documents {
        let (cache, prefill) = prefill_document(
            &weights,
            &doc.doc_id,
            &doc.token_ids,
            block_cfg,
            PrefillOptions { retain_q: false, retain_attention: true },
        )?;
        let spans: Vec<(usize, usize)> = cache.blocks.iter().map(|b| b.span).collect();
        alphas.push(
            prefill
                .layers
                .iter()
                .map(|layer| {
                    block_attributes(&mean_heads(layer.attention.as_ref().unwrap()), &spans)
                        .into_iter()
                        .map(|a| a.alpha)
                        .collect()
                })
                .collect(),
        );
    }
    detect_stable_layers(&alphas, config.model.num_layers)
}
