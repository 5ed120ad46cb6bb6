// Scratch probe: print anchor/max/min scores for the default corpus.

use samkv::analysis::{block_attributes, mean_heads};
use samkv::corpus::generate_corpus;
use samkv::engine::PrefillOptions;
use samkv::kv::prefill_document;
use samkv::model::build_model;
use samkv::pipeline::PipelineConfig;
use samkv::query::{generic_query_vector, local_q_cache, personalize};
use samkv::selection::{anchor_scores, layer_p, AnchorBelowMin};

fn main() {
    for seed in 0..4u64 {
        let config = PipelineConfig { seed, ..PipelineConfig::default() };
        let weights = build_model(&config.model).unwrap();
        let corpus = generate_corpus(&config.corpus_spec()).unwrap();
        let mut docs = Vec::new();
        let mut attrs_all = Vec::new();
        for doc in &corpus.documents {
            let (cache, prefill) = prefill_document(
                &weights,
                &doc.doc_id,
                &doc.token_ids,
                config.block_config(),
                PrefillOptions { retain_q: true, retain_attention: true },
            )
            .unwrap();
            let spans: Vec<(usize, usize)> = cache.blocks.iter().map(|b| b.span).collect();
            let attrs: Vec<Vec<_>> = prefill
                .layers
                .iter()
                .map(|l| block_attributes(&mean_heads(l.attention.as_ref().unwrap()), &spans))
                .collect();
            attrs_all.push(attrs);
            docs.push(cache);
        }
        let q_que = generic_query_vector(&weights, &corpus.query, &docs).unwrap();
        let locals: Vec<_> = docs.iter().map(|d| local_q_cache(d).unwrap()).collect();
        for (i, doc) in docs.iter().enumerate() {
            let q_hat = personalize(&q_que, &locals, &doc.doc_id, None).unwrap();
            for layer in [0usize, 1] {
                let s = anchor_scores(&q_hat, doc, &attrs_all[i], &[layer]);
                let ls = &s.per_layer[0];
                println!(
                    "seed {seed} doc {i} layer {layer}: anc={:+.4} max={:+.4} min={:+.4} p={:.3}",
                    ls.s_anc,
                    ls.s_max,
                    ls.s_min,
                    layer_p(ls.s_anc, ls.s_max, ls.s_min, AnchorBelowMin::Zero)
                );
            }
        }
    }
}
