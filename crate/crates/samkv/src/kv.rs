//! Block-level KV cache management: partitioning, role labeling, composite
//! assembly, and persistence.
//!
//! Cache file layout (all little-endian):
//!
//! ```text
//! magic "MCKV" | record tag u8 (0x02) | format version u16
//! doc_id: len u16 + UTF-8 bytes | generation u8
//! token_count u32 | token ids u32*
//! num_layers u32 | hidden u32 | block_count u32
//! per block: index u32 | span start u32 | span end u32 | role u8 | has_q u8
//!            per layer: K rows f32 | V rows f32 | Q rows f32 (if has_q)
//!                       | mean_key f32[hidden]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{prefill_full, PrefillOptions, PrefillOutput};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{
    read_exact, read_mat, read_u16, read_u32, read_u8, write_f32s, ModelWeights, WEIGHT_MAGIC,
};

pub const CACHE_RECORD_TAG: u8 = 0x02;
pub const CACHE_FORMAT_VERSION: u16 = 1;

/// Position of a block within its document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockRole {
    Initial,
    Middle,
    Local,
}

/// Whether a cache still holds its original prefilled values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generation {
    #[default]
    Old,
    New,
}

/// Block partitioning configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub block_size: usize,
    pub n_initial: usize,
    pub n_local: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig { block_size: 64, n_initial: 1, n_local: 2 }
    }
}

/// One fixed-size block of cached K/V (and optionally Q) rows.
///
/// Tensor fields are indexed by layer; each entry covers the block's token
/// span with `hidden` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct KVBlock {
    pub index: usize,
    /// Absolute `[start, end)` token positions within the document.
    pub span: (usize, usize),
    pub role: BlockRole,
    pub k: Vec<Mat>,
    pub v: Vec<Mat>,
    pub q: Option<Vec<Mat>>,
    /// Per-layer arithmetic mean of the block's K rows (per-head segments
    /// laid out contiguously).
    pub mean_key: Vec<Vec<f32>>,
}

impl KVBlock {
    pub fn len(&self) -> usize {
        self.span.1 - self.span.0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest deviation between the stored mean key and one recomputed
    /// from the K rows.
    pub fn mean_key_deviation(&self) -> f32 {
        let mut worst = 0.0f32;
        for (k, stored) in self.k.iter().zip(&self.mean_key) {
            let fresh = k.mean_rows();
            for (a, b) in fresh.iter().zip(stored) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

/// Per-document blocked KV cache.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentCache {
    pub doc_id: String,
    pub token_ids: Vec<u32>,
    pub generation: Generation,
    pub blocks: Vec<KVBlock>,
}

impl DocumentCache {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.k.len())
    }

    pub fn blocks_with_role(&self, role: BlockRole) -> impl Iterator<Item = &KVBlock> {
        self.blocks.iter().filter(move |b| b.role == role)
    }

    pub fn middle_blocks(&self) -> impl Iterator<Item = &KVBlock> {
        self.blocks_with_role(BlockRole::Middle)
    }

    pub fn block(&self, index: usize) -> &KVBlock {
        &self.blocks[index]
    }
}

/// Label blocks of a prefill output and assemble a [`DocumentCache`].
///
/// When `retain_q` was set on the prefill, Q rows are kept only on
/// initial- and local-role blocks.
pub fn document_cache_from_prefill(
    doc_id: &str,
    token_ids: &[u32],
    prefill: &PrefillOutput,
    cfg: BlockConfig,
) -> DocumentCache {
    let len = token_ids.len();
    let spans = tile_spans(len, cfg.block_size);
    let roles = assign_roles(spans.len(), cfg);
    let blocks = spans
        .iter()
        .zip(&roles)
        .enumerate()
        .map(|(i, (&(start, end), &role))| {
            let keep_q = role != BlockRole::Middle && prefill.layers[0].q.is_some();
            let k: Vec<Mat> =
                prefill.layers.iter().map(|l| l.k.row_slice(start, end)).collect();
            let v: Vec<Mat> =
                prefill.layers.iter().map(|l| l.v.row_slice(start, end)).collect();
            let q = keep_q.then(|| {
                prefill
                    .layers
                    .iter()
                    .map(|l| l.q.as_ref().unwrap().row_slice(start, end))
                    .collect()
            });
            let mean_key = k.iter().map(Mat::mean_rows).collect();
            KVBlock { index: i, span: (start, end), role, k, v, q, mean_key }
        })
        .collect();
    DocumentCache {
        doc_id: doc_id.to_string(),
        token_ids: token_ids.to_vec(),
        generation: Generation::Old,
        blocks,
    }
}

/// Independent prefill of one document plus block labeling.
pub fn prefill_document(
    weights: &ModelWeights,
    doc_id: &str,
    token_ids: &[u32],
    cfg: BlockConfig,
    opts: PrefillOptions,
) -> Result<(DocumentCache, PrefillOutput)> {
    let prefill = prefill_full(weights, token_ids, opts)?;
    let cache = document_cache_from_prefill(doc_id, token_ids, &prefill, cfg);
    Ok((cache, prefill))
}

/// Contiguous `[start, end)` spans tiling `[0, len)`; only the final span
/// may be shorter than `block_size`.
fn tile_spans(len: usize, block_size: usize) -> Vec<(usize, usize)> {
    assert!(block_size >= 1, "block_size must be >= 1");
    let mut spans = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + block_size).min(len);
        spans.push((start, end));
        start = end;
    }
    spans
}

/// Greedy role assignment: the first `n_initial` blocks are initial, the
/// last `n_local` are local, and overlapping claims go to initial.
fn assign_roles(n_blocks: usize, cfg: BlockConfig) -> Vec<BlockRole> {
    let mut roles = vec![BlockRole::Middle; n_blocks];
    for role in roles.iter_mut().take(cfg.n_initial) {
        *role = BlockRole::Initial;
    }
    let local_start = n_blocks.saturating_sub(cfg.n_local).max(cfg.n_initial.min(n_blocks));
    for role in roles.iter_mut().skip(local_start) {
        *role = BlockRole::Local;
    }
    roles
}

/// Re-tile an existing cache under a new block configuration. Values are
/// preserved; only spans, roles, and Q retention change.
pub fn partition_blocks(cache: &DocumentCache, cfg: BlockConfig) -> DocumentCache {
    let num_layers = cache.num_layers();
    let hidden = cache.blocks.first().map_or(0, |b| b.k[0].cols());
    let mut k_full: Vec<Mat> = (0..num_layers).map(|_| Mat::zeros(0, hidden)).collect();
    let mut v_full: Vec<Mat> = (0..num_layers).map(|_| Mat::zeros(0, hidden)).collect();
    let all_q = cache.blocks.iter().all(|b| b.q.is_some());
    let mut q_full: Vec<Mat> = (0..num_layers).map(|_| Mat::zeros(0, hidden)).collect();
    for block in &cache.blocks {
        for n in 0..num_layers {
            k_full[n].extend_rows(&block.k[n]);
            v_full[n].extend_rows(&block.v[n]);
            if all_q {
                q_full[n].extend_rows(&block.q.as_ref().unwrap()[n]);
            }
        }
    }

    let spans = tile_spans(cache.len(), cfg.block_size);
    let roles = assign_roles(spans.len(), cfg);
    let blocks = spans
        .iter()
        .zip(&roles)
        .enumerate()
        .map(|(i, (&(start, end), &role))| {
            let k: Vec<Mat> = k_full.iter().map(|m| m.row_slice(start, end)).collect();
            let v: Vec<Mat> = v_full.iter().map(|m| m.row_slice(start, end)).collect();
            let q = (all_q && role != BlockRole::Middle)
                .then(|| q_full.iter().map(|m| m.row_slice(start, end)).collect());
            let mean_key = k.iter().map(Mat::mean_rows).collect();
            KVBlock { index: i, span: (start, end), role, k, v, q, mean_key }
        })
        .collect();
    DocumentCache {
        doc_id: cache.doc_id.clone(),
        token_ids: cache.token_ids.clone(),
        generation: cache.generation,
        blocks,
    }
}

/// One token slot of a composite cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSlot {
    pub doc_index: usize,
    pub block_index: usize,
    pub role: BlockRole,
    /// Token position within the source document.
    pub doc_pos: usize,
    pub token_id: u32,
}

/// Per-layer rows of a composite cache, aligned to the slot list.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLayer {
    pub k: Mat,
    pub v: Mat,
    /// True where this layer did not retain the slot and the row only
    /// exists for cross-layer alignment (it carries the prefilled KV).
    pub padded: Vec<bool>,
}

/// Ordered multi-document cache: every layer exposes the same slot list,
/// with per-layer padding flags marking alignment-only rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeCache {
    pub slots: Vec<CompositeSlot>,
    pub layers: Vec<CompositeLayer>,
}

impl CompositeCache {
    /// Assemble a composite from explicit per-document block choices.
    /// All layers expose every chosen block; no padding flags are set.
    pub fn from_blocks(docs: &[DocumentCache], chosen: &[Vec<usize>]) -> Result<CompositeCache> {
        if docs.is_empty() {
            return Err(Error::Input("empty document list".into()));
        }
        let num_layers = docs[0].num_layers();
        let hidden = docs[0].blocks[0].k[0].cols();
        let mut slots = Vec::new();
        let mut layers: Vec<CompositeLayer> = (0..num_layers)
            .map(|_| CompositeLayer {
                k: Mat::zeros(0, hidden),
                v: Mat::zeros(0, hidden),
                padded: Vec::new(),
            })
            .collect();
        for (doc_index, (doc, blocks)) in docs.iter().zip(chosen).enumerate() {
            if doc.num_layers() != num_layers {
                return Err(Error::Cache(format!(
                    "document {} has {} layers, expected {}",
                    doc.doc_id,
                    doc.num_layers(),
                    num_layers
                )));
            }
            for &bi in blocks {
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
                    layer.k.extend_rows(&block.k[n]);
                    layer.v.extend_rows(&block.v[n]);
                    layer.padded.extend(std::iter::repeat(false).take(block.len()));
                }
            }
        }
        Ok(CompositeCache { slots, layers })
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Engine context view over all rows (padding included).
    pub fn context_view(&self) -> Vec<(&Mat, &Mat)> {
        self.layers.iter().map(|l| (&l.k, &l.v)).collect()
    }

    /// Drop alignment-only rows, leaving each layer with exactly the slots
    /// it retained.
    pub fn strip_padding(&self) -> StrippedCache {
        let hidden = self.layers.first().map_or(0, |l| l.k.cols());
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let mut slot_ids = Vec::new();
                let mut k = Mat::zeros(0, hidden);
                let mut v = Mat::zeros(0, hidden);
                for i in 0..self.slots.len() {
                    if !layer.padded[i] {
                        slot_ids.push(i);
                        k.push_row(layer.k.row(i));
                        v.push_row(layer.v.row(i));
                    }
                }
                StrippedLayer { slot_ids, k, v }
            })
            .collect();
        StrippedCache { slots: self.slots.clone(), layers }
    }
}

/// Concatenate each document's initial blocks then local blocks, documents
/// in the given order.
pub fn build_composite_initial_local(docs: &[DocumentCache]) -> Result<CompositeCache> {
    if docs.is_empty() {
        return Err(Error::Input("empty document list".into()));
    }
    let chosen: Vec<Vec<usize>> = docs
        .iter()
        .map(|doc| {
            let mut ids: Vec<usize> = doc
                .blocks_with_role(BlockRole::Initial)
                .map(|b| b.index)
                .collect();
            ids.extend(doc.blocks_with_role(BlockRole::Local).map(|b| b.index));
            ids
        })
        .collect();
    CompositeCache::from_blocks(docs, &chosen)
}

/// Per-layer rows after padding removal; row counts may differ per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StrippedLayer {
    /// Indices into the slot list, ascending.
    pub slot_ids: Vec<usize>,
    pub k: Mat,
    pub v: Mat,
}

/// Final sparse cache: each layer holds only its own retained slots.
#[derive(Debug, Clone, PartialEq)]
pub struct StrippedCache {
    pub slots: Vec<CompositeSlot>,
    pub layers: Vec<StrippedLayer>,
}

impl StrippedCache {
    pub fn context_view(&self) -> Vec<(&Mat, &Mat)> {
        self.layers.iter().map(|l| (&l.k, &l.v)).collect()
    }
}

/// Write a document cache to disk (bit-exact round trip).
pub fn save_cache(cache: &DocumentCache, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(WEIGHT_MAGIC)?;
    w.write_all(&[CACHE_RECORD_TAG])?;
    w.write_all(&CACHE_FORMAT_VERSION.to_le_bytes())?;
    let id_bytes = cache.doc_id.as_bytes();
    w.write_all(&(id_bytes.len() as u16).to_le_bytes())?;
    w.write_all(id_bytes)?;
    w.write_all(&[match cache.generation {
        Generation::Old => 0u8,
        Generation::New => 1u8,
    }])?;
    w.write_all(&(cache.token_ids.len() as u32).to_le_bytes())?;
    for t in &cache.token_ids {
        w.write_all(&t.to_le_bytes())?;
    }
    let num_layers = cache.num_layers();
    let hidden = cache.blocks.first().map_or(0, |b| b.k[0].cols());
    w.write_all(&(num_layers as u32).to_le_bytes())?;
    w.write_all(&(hidden as u32).to_le_bytes())?;
    w.write_all(&(cache.blocks.len() as u32).to_le_bytes())?;
    for block in &cache.blocks {
        w.write_all(&(block.index as u32).to_le_bytes())?;
        w.write_all(&(block.span.0 as u32).to_le_bytes())?;
        w.write_all(&(block.span.1 as u32).to_le_bytes())?;
        w.write_all(&[match block.role {
            BlockRole::Initial => 0u8,
            BlockRole::Middle => 1u8,
            BlockRole::Local => 2u8,
        }])?;
        w.write_all(&[block.q.is_some() as u8])?;
        for n in 0..num_layers {
            write_f32s(&mut w, block.k[n].data())?;
            write_f32s(&mut w, block.v[n].data())?;
            if let Some(q) = &block.q {
                write_f32s(&mut w, q[n].data())?;
            }
            write_f32s(&mut w, &block.mean_key[n])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a document cache written by [`save_cache`].
pub fn load_cache(path: &Path) -> Result<DocumentCache> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != WEIGHT_MAGIC {
        return Err(Error::Format("bad magic in cache file".into()));
    }
    let tag = read_u8(&mut r)?;
    if tag != CACHE_RECORD_TAG {
        return Err(Error::Format(format!("unexpected record tag {tag:#04x} in cache file")));
    }
    let version = read_u16(&mut r)?;
    if version != CACHE_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported cache format version {version}")));
    }
    let id_len = read_u16(&mut r)? as usize;
    let mut id_bytes = vec![0u8; id_len];
    read_exact(&mut r, &mut id_bytes)?;
    let doc_id = String::from_utf8(id_bytes)
        .map_err(|_| Error::Format("doc_id is not valid UTF-8".into()))?;
    let generation = match read_u8(&mut r)? {
        0 => Generation::Old,
        1 => Generation::New,
        g => return Err(Error::Format(format!("unknown generation tag {g}"))),
    };
    let token_count = read_u32(&mut r)? as usize;
    let mut token_ids = Vec::with_capacity(token_count);
    for _ in 0..token_count {
        token_ids.push(read_u32(&mut r)?);
    }
    let num_layers = read_u32(&mut r)? as usize;
    let hidden = read_u32(&mut r)? as usize;
    let block_count = read_u32(&mut r)? as usize;
    let mut blocks = Vec::with_capacity(block_count);
    for _ in 0..block_count {
        let index = read_u32(&mut r)? as usize;
        let start = read_u32(&mut r)? as usize;
        let end = read_u32(&mut r)? as usize;
        if end < start || end > token_count {
            return Err(Error::Format(format!("invalid block span [{start},{end})")));
        }
        let role = match read_u8(&mut r)? {
            0 => BlockRole::Initial,
            1 => BlockRole::Middle,
            2 => BlockRole::Local,
            x => return Err(Error::Format(format!("unknown block role {x}"))),
        };
        let has_q = read_u8(&mut r)? != 0;
        let len = end - start;
        let mut k = Vec::with_capacity(num_layers);
        let mut v = Vec::with_capacity(num_layers);
        let mut q = has_q.then(Vec::new);
        let mut mean_key = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            k.push(read_mat(&mut r, len, hidden)?);
            v.push(read_mat(&mut r, len, hidden)?);
            if let Some(qv) = &mut q {
                qv.push(read_mat(&mut r, len, hidden)?);
            }
            mean_key.push(crate::model::read_f32s(&mut r, hidden)?);
        }
        blocks.push(KVBlock { index, span: (start, end), role, k, v, q, mean_key });
    }
    Ok(DocumentCache { doc_id, token_ids, generation, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec, PositionalMode};

    fn model() -> ModelWeights {
        build_model(&ModelSpec {
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            vocab_size: 64,
            positional_mode: PositionalMode::None,
            seed: 5,
        })
        .unwrap()
    }

    fn seq(len: usize) -> Vec<u32> {
        (0..len as u32).map(|i| i % 64).collect()
    }

    fn roles_of(cache: &DocumentCache) -> Vec<BlockRole> {
        cache.blocks.iter().map(|b| b.role).collect()
    }

    #[test]
    fn partition_320_tokens_is_ini_mid_mid_loc_loc() {
        let w = model();
        let cfg = BlockConfig { block_size: 64, n_initial: 1, n_local: 2 };
        let (cache, _) =
            prefill_document(&w, "d", &seq(320), cfg, PrefillOptions::default()).unwrap();
        assert_eq!(cache.blocks.len(), 5);
        assert_eq!(
            roles_of(&cache),
            vec![
                BlockRole::Initial,
                BlockRole::Middle,
                BlockRole::Middle,
                BlockRole::Local,
                BlockRole::Local
            ]
        );
    }

    #[test]
    fn partition_single_block_doc_is_initial_only() {
        let w = model();
        let cfg = BlockConfig::default();
        let (cache, _) =
            prefill_document(&w, "d", &seq(64), cfg, PrefillOptions::default()).unwrap();
        assert_eq!(cache.blocks.len(), 1);
        assert_eq!(roles_of(&cache), vec![BlockRole::Initial]);
        assert_eq!(cache.blocks_with_role(BlockRole::Local).count(), 0);
    }

    #[test]
    fn partition_130_tokens_tiles_64_64_2() {
        let w = model();
        let cfg = BlockConfig::default();
        let (cache, _) =
            prefill_document(&w, "d", &seq(130), cfg, PrefillOptions::default()).unwrap();
        let spans: Vec<(usize, usize)> = cache.blocks.iter().map(|b| b.span).collect();
        assert_eq!(spans, vec![(0, 64), (64, 128), (128, 130)]);
        assert_eq!(
            roles_of(&cache),
            vec![BlockRole::Initial, BlockRole::Local, BlockRole::Local]
        );
    }

    #[test]
    fn prefill_document_values_match_prefill_full() {
        let w = model();
        let tokens = seq(100);
        let (cache, prefill) =
            prefill_document(&w, "d", &tokens, BlockConfig::default(), PrefillOptions::default())
                .unwrap();
        // Block rows, stitched back together, equal the raw prefill rows.
        for n in 0..2 {
            let mut row = 0;
            for block in &cache.blocks {
                for r in 0..block.len() {
                    assert_eq!(block.k[n].row(r), prefill.layers[n].k.row(row));
                    assert_eq!(block.v[n].row(r), prefill.layers[n].v.row(row));
                    row += 1;
                }
            }
            assert_eq!(row, tokens.len());
        }
    }

    #[test]
    fn mean_key_matches_recomputation() {
        let w = model();
        let (cache, _) =
            prefill_document(&w, "d", &seq(200), BlockConfig::default(), PrefillOptions::default())
                .unwrap();
        for block in &cache.blocks {
            assert!(block.mean_key_deviation() <= 1e-6);
        }
    }

    #[test]
    fn repartition_preserves_values() {
        let w = model();
        let (cache, _) = prefill_document(
            &w,
            "d",
            &seq(256),
            BlockConfig::default(),
            PrefillOptions { retain_q: true, retain_attention: false },
        )
        .unwrap();
        assert_eq!(
            roles_of(&cache),
            vec![BlockRole::Initial, BlockRole::Middle, BlockRole::Local, BlockRole::Local]
        );
        let re = partition_blocks(&cache, BlockConfig { block_size: 32, n_initial: 1, n_local: 2 });
        assert_eq!(re.blocks.len(), 8);
        // Token 70 lives in block 1 of the original (span 64..128) and block 2
        // of the re-partition (span 64..96); values must match.
        assert_eq!(cache.blocks[1].k[0].row(6), re.blocks[2].k[0].row(6));
    }

    #[test]
    fn composite_initial_local_has_one_slot_group_per_doc() {
        let w = model();
        let cfg = BlockConfig::default();
        let docs: Vec<DocumentCache> = (0..3)
            .map(|i| {
                prefill_document(&w, &format!("doc-{i}"), &seq(320), cfg, PrefillOptions::default())
                    .unwrap()
                    .0
            })
            .collect();
        let composite = build_composite_initial_local(&docs).unwrap();
        // 3 docs x (1 initial + 2 local) blocks x 64 tokens.
        assert_eq!(composite.num_slots(), 3 * 3 * 64);
        let block_seq: Vec<(usize, usize)> = composite
            .slots
            .iter()
            .map(|s| (s.doc_index, s.block_index))
            .collect::<Vec<_>>()
            .chunks(64)
            .map(|c| c[0])
            .collect();
        assert_eq!(
            block_seq,
            vec![(0, 0), (0, 3), (0, 4), (1, 0), (1, 3), (1, 4), (2, 0), (2, 3), (2, 4)]
        );
        assert!(composite.layers.iter().all(|l| l.padded.iter().all(|&p| !p)));
    }

    #[test]
    fn composite_single_doc_is_identity_and_order_follows_docs() {
        let w = model();
        let cfg = BlockConfig::default();
        let a = prefill_document(&w, "a", &seq(192), cfg, PrefillOptions::default()).unwrap().0;
        let b = prefill_document(&w, "b", &seq(256), cfg, PrefillOptions::default()).unwrap().0;

        let single = build_composite_initial_local(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.num_slots(), 192);

        let ab = build_composite_initial_local(&[a.clone(), b.clone()]).unwrap();
        let ba = build_composite_initial_local(&[b, a]).unwrap();
        let ab_docs: Vec<usize> = ab.slots.iter().map(|s| s.doc_index).collect();
        let ba_docs: Vec<usize> = ba.slots.iter().map(|s| s.doc_index).collect();
        // Permuting the documents permutes the slot groups identically.
        // Doc a (192 tokens) has all three blocks initial/local; doc b
        // (256 tokens) keeps 3 of its 4 blocks.
        assert_eq!(ab_docs.iter().filter(|&&d| d == 0).count(), 192);
        assert_eq!(ab_docs.iter().filter(|&&d| d == 1).count(), 192);
        assert_eq!(ba_docs.iter().filter(|&&d| d == 0).count(), 192);
        assert!(ab_docs.windows(2).all(|w| w[0] <= w[1]));
        assert!(ba_docs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn empty_doc_list_is_input_error() {
        assert!(matches!(build_composite_initial_local(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let w = model();
        let (cache, _) = prefill_document(
            &w,
            "round-trip",
            &seq(200),
            BlockConfig::default(),
            PrefillOptions { retain_q: true, retain_attention: false },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doc.mckv");
        save_cache(&cache, &path).unwrap();
        let loaded = load_cache(&path).unwrap();
        assert_eq!(cache, loaded);
        for block in &loaded.blocks {
            assert!(block.mean_key_deviation() <= 1e-6);
        }
    }

    #[test]
    fn truncated_cache_file_is_format_error() {
        let w = model();
        let (cache, _) =
            prefill_document(&w, "t", &seq(128), BlockConfig::default(), PrefillOptions::default())
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doc.mckv");
        save_cache(&cache, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 37]).unwrap();
        assert!(matches!(load_cache(&path), Err(Error::Format(_))));
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_cache(&path), Err(Error::Format(_))));
    }

    #[test]
    fn strip_padding_keeps_only_unpadded_rows() {
        let w = model();
        let cfg = BlockConfig::default();
        let doc = prefill_document(&w, "d", &seq(256), cfg, PrefillOptions::default()).unwrap().0;
        let mut composite =
            CompositeCache::from_blocks(std::slice::from_ref(&doc), &[vec![0, 1, 2, 3]]).unwrap();
        // Mark block 1 (slots 64..128) as padding at layer 0 only.
        for i in 64..128 {
            composite.layers[0].padded[i] = true;
        }
        let stripped = composite.strip_padding();
        assert_eq!(stripped.layers[0].slot_ids.len(), 192);
        assert_eq!(stripped.layers[1].slot_ids.len(), 256);
        assert!(stripped.layers[0].slot_ids.iter().all(|&s| !(64..128).contains(&s)));
        assert_eq!(stripped.layers[0].k.rows(), 192);
    }
}
