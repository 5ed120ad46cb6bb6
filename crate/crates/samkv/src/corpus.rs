//! Synthetic multi-document corpora with a controllable shared span.
//!
//! Each document embeds one common token span (the consensus) at a
//! deterministic position; the rest of every document draws from a
//! document-private vocabulary range so that token overlap between
//! documents is exactly the consensus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SINK_VOCAB;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub seed: u64,
    pub documents: Vec<Document>,
    pub query: Vec<u32>,
    pub consensus_len: usize,
}

/// Generation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_docs: usize,
    pub doc_len: usize,
    /// Fraction of each document occupied by the shared span.
    pub overlap_fraction: f32,
    pub query_len: usize,
    pub vocab_size: usize,
    /// Number of sink-band tokens opening each document (BOS-like markers
    /// that concentrate attention on the initial block). Shrinks to make
    /// room when the consensus span fills the document.
    #[serde(default = "default_sink_prefix")]
    pub sink_prefix: usize,
    /// Probability that a body token is a sink: occasional strong tokens in
    /// the middle of the sequence, the mid-sequence attention concentration
    /// the recompute-token selection keys on.
    #[serde(default = "default_sink_rate")]
    pub sink_rate: f32,
}

pub(crate) fn default_sink_prefix() -> usize {
    4
}

pub(crate) fn default_sink_rate() -> f32 {
    0.01
}

/// Generate `num_docs` documents of `doc_len` tokens sharing an
/// `overlap_fraction` consensus span, plus a query that overlaps the
/// consensus. Deterministic in the seed.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.num_docs == 0 {
        return Err(Error::Config("corpus needs at least one document".into()));
    }
    if spec.doc_len == 0 || spec.query_len == 0 {
        return Err(Error::Config("document and query lengths must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.overlap_fraction) {
        return Err(Error::Config(format!(
            "overlap fraction {} outside [0, 1]",
            spec.overlap_fraction
        )));
    }
    // One private vocab band per document plus one shared band, all above
    // the sink-token range. Bands must be non-empty.
    let bands = spec.num_docs + 1;
    if spec.vocab_size < SINK_VOCAB + bands * 2 {
        return Err(Error::Config(format!(
            "vocab size {} too small for {} documents",
            spec.vocab_size, spec.num_docs
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let band = (spec.vocab_size - SINK_VOCAB) / bands;
    let consensus_len =
        ((spec.doc_len as f32 * spec.overlap_fraction).round() as usize).min(spec.doc_len);
    let sink_prefix = spec.sink_prefix.min(spec.doc_len - consensus_len);
    let shared_lo = (SINK_VOCAB + spec.num_docs * band) as u32;
    let shared_hi = spec.vocab_size as u32;
    // Consensus tokens come from the shared band, with sinks sprinkled in
    // from the whole sink range (shared strong tokens across documents).
    let consensus: Vec<u32> = (0..consensus_len)
        .map(|_| {
            if rng.random_range(0.0..1.0f32) < spec.sink_rate {
                rng.random_range(0..SINK_VOCAB as u32)
            } else {
                rng.random_range(shared_lo..shared_hi)
            }
        })
        .collect();

    // Disjoint sink ids per document keep zero-overlap corpora disjoint.
    let sink_width = (SINK_VOCAB / spec.num_docs).max(1);

    let documents = (0..spec.num_docs)
        .map(|i| {
            let lo = (SINK_VOCAB + i * band) as u32;
            let hi = lo + band as u32;
            let sink_lo = ((i * sink_width) % SINK_VOCAB) as u32;
            let sink_hi = sink_lo + sink_width as u32;
            let private_len = spec.doc_len - consensus_len - sink_prefix;
            let filler = |rng: &mut ChaCha8Rng| {
                if rng.random_range(0.0..1.0f32) < spec.sink_rate {
                    rng.random_range(sink_lo..sink_hi)
                } else {
                    rng.random_range(lo..hi)
                }
            };
            // Consensus goes at a deterministic per-document offset within
            // the private filler.
            let offset = if private_len == 0 { 0 } else { rng.random_range(0..=private_len) };
            let mut tokens = Vec::with_capacity(spec.doc_len);
            for _ in 0..sink_prefix {
                tokens.push(rng.random_range(sink_lo..sink_hi));
            }
            for _ in 0..offset {
                tokens.push(filler(&mut rng));
            }
            tokens.extend_from_slice(&consensus);
            while tokens.len() < spec.doc_len {
                tokens.push(filler(&mut rng));
            }
            Document { doc_id: format!("doc-{i}"), token_ids: tokens }
        })
        .collect();

    // Query: half consensus tokens (when available), half shared-band noise.
    let query: Vec<u32> = (0..spec.query_len)
        .map(|i| {
            if !consensus.is_empty() && i % 2 == 0 {
                consensus[rng.random_range(0..consensus.len())]
            } else {
                rng.random_range(shared_lo..shared_hi)
            }
        })
        .collect();

    Ok(Corpus { seed: spec.seed, documents, query, consensus_len })
}

/// Fraction of document `a`'s tokens whose values also occur in document
/// `b`.
pub fn common_token_fraction(a: &Document, b: &Document) -> f32 {
    let set: std::collections::HashSet<u32> = b.token_ids.iter().copied().collect();
    let common = a.token_ids.iter().filter(|t| set.contains(t)).count();
    common as f32 / a.token_ids.len() as f32
}
