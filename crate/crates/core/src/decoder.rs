//! Query prefill and greedy decoding over a populated cache.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoders::{CacheState, Topology};
use crate::error::{Error, Result};
use crate::kvcache::KvBlock;
use crate::model::{EncodeMode, Model};
use crate::tokenizer::EOT;
use crate::topology::SegmentGraph;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Wall clock from the run's start to the first emitted token.
    pub ttft_ns: u64,
    /// Every query-key score of the run (one head, one layer).
    pub score_count: u64,
    pub prefill_scores: u64,
    pub update_scores: u64,
    pub decode_scores: u64,
    /// Largest token count of any single block encode.
    pub peak_block_tokens: usize,
    /// Per-token KV entries held at the end of the run.
    pub kv_entries_total: usize,
    pub max_position_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub output: Vec<u32>,
    pub metrics: RunMetrics,
    /// Logits each output token was chosen from.
    pub step_logits: Vec<Vec<f32>>,
}

impl GenerationResult {
    /// Smallest gap between the best and second-best logit over all steps.
    pub fn min_margin(&self) -> f32 {
        self.step_logits
            .iter()
            .map(|row| {
                let best = argmax(row);
                let runner_up = row
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != best)
                    .map(|(_, &v)| v)
                    .fold(f32::NEG_INFINITY, f32::max);
                row[best] - runner_up
            })
            .fold(f32::INFINITY, f32::min)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// Start of the TTFT clock; defaults to the call itself.
    pub started: Option<Instant>,
}

impl GenerateOptions {
    pub fn new(max_new: usize) -> Self {
        Self {
            max_new,
            started: None,
        }
    }
}

/// Greedy choice; ties go to the lowest token id.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Blocks the query reads, one per segment:
/// sequential runs in position order, parallel round-0 blocks, and for graph
/// runs the last-round block of each target plus round 0 of pure sources.
pub fn visible_set<'a>(cache: &'a CacheState, graph: &SegmentGraph) -> Result<Vec<&'a KvBlock>> {
    match &cache.topology {
        Topology::Sequential { .. } => {
            let mut blocks = graph
                .ids()
                .map(|id| cache.store.get(id, 0))
                .collect::<Result<Vec<_>>>()?;
            blocks.sort_by_key(|b| b.position_start());
            Ok(blocks)
        }
        Topology::Parallel { .. } => graph.ids().map(|id| cache.store.get(id, 0)).collect(),
        Topology::GraphKv { .. } => graph
            .ids()
            .map(|id| {
                let round = if graph.is_target(id) { cache.rounds_used } else { 0 };
                cache.store.get(id, round)
            })
            .collect(),
    }
}

pub fn generate(
    cache: &CacheState,
    graph: &SegmentGraph,
    query: &[u32],
    opts: GenerateOptions,
    model: &Model,
) -> Result<GenerationResult> {
    let started = opts.started.unwrap_or_else(Instant::now);
    if query.is_empty() {
        return Err(Error::InvalidArgument("query must not be empty".into()));
    }
    if opts.max_new == 0 {
        return Err(Error::InvalidArgument("max_new must be >= 1".into()));
    }
    let knobs = cache.decode_knobs();
    let d_model = model.config().d_model;
    let visible = visible_set(cache, graph)?;
    let visible_max_pos = visible.iter().filter_map(|b| b.last_position()).max();

    let enc = model.encode_block(query, cache.query_start, &visible, EncodeMode::WithLogits, knobs)?;
    let logits = enc.logits.expect("logits requested");
    let last_row = logits.row(query.len() - 1).to_vec();
    let mut token = argmax(&last_row) as u32;
    let ttft_ns = started.elapsed().as_nanos() as u64;

    let mut decode_scores = enc.score_count;
    let mut peak = cache.stats.peak_block_tokens.max(query.len());
    let mut local = KvBlock::new(u32::MAX, u32::MAX, cache.query_start, d_model, enc.layers)?;
    let mut output = vec![token];
    let mut step_logits = vec![last_row];
    let mut position = cache.query_start + query.len();

    while output.len() < opts.max_new && token != EOT {
        let mut reads = visible.clone();
        reads.push(&local);
        let step = model.encode_block(&[token], position, &reads, EncodeMode::WithLogits, knobs)?;
        decode_scores += step.score_count;
        peak = peak.max(1);
        local.append(&step.layers)?;
        let row = step.logits.expect("logits requested").into_data();
        token = argmax(&row) as u32;
        output.push(token);
        step_logits.push(row);
        position += 1;
    }

    // The last emitted token is allotted the next position even though it
    // is never fed back.
    let last_allotted = cache.query_start + query.len() + output.len() - 1;
    let max_position_index = visible_max_pos.map_or(last_allotted, |v| v.max(last_allotted));
    let metrics = RunMetrics {
        ttft_ns,
        score_count: cache.stats.score_count() + decode_scores,
        prefill_scores: cache.stats.prefill_scores,
        update_scores: cache.stats.update_scores,
        decode_scores,
        peak_block_tokens: peak,
        kv_entries_total: cache.store.token_entries() + local.len(),
        max_position_index,
    };
    Ok(GenerationResult {
        output,
        metrics,
        step_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{encode_graphkv, encode_parallel, EncodeOptions};
    use crate::model::{AttentionKnobs, ModelConfig};
    use crate::topology::{build_full, build_star, Segment};

    fn segs(n: u32) -> Vec<Segment> {
        (0..n).map(|i| Segment::from_text(i, format!("segment number {i}"))).collect()
    }

    fn model() -> Model {
        Model::random(ModelConfig::tiny(2, 2, 16), 77).unwrap()
    }

    fn keys(v: &[&KvBlock]) -> Vec<(u32, u32)> {
        v.iter().map(|b| (b.segment_id(), b.round())).collect()
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }

    #[test]
    fn star_visible_set() {
        let m = model();
        let g = build_star(segs(4), 3, &[0, 1, 2]).unwrap();
        let c = encode_graphkv(&g, &m, EncodeOptions::default()).unwrap();
        let v = visible_set(&c, &g).unwrap();
        assert_eq!(keys(&v), vec![(0, 0), (1, 0), (2, 0), (3, 1)]);
    }

    #[test]
    fn edgeless_and_full_visible_sets() {
        let m = model();
        let g = SegmentGraph::new(segs(3), vec![]).unwrap();
        let c = encode_parallel(&g, &m, AttentionKnobs::default(), EncodeOptions::default()).unwrap();
        assert_eq!(keys(&visible_set(&c, &g).unwrap()), vec![(0, 0), (1, 0), (2, 0)]);

        let g = build_full(segs(4)).unwrap();
        let c = encode_graphkv(&g, &m, EncodeOptions::default()).unwrap();
        assert_eq!(
            keys(&visible_set(&c, &g).unwrap()),
            vec![(0, 1), (1, 1), (2, 1), (3, 1)]
        );
    }

    #[test]
    fn missing_block_is_reported() {
        let m = model();
        let g = build_star(segs(3), 2, &[0, 1]).unwrap();
        let mut c = encode_parallel(&g, &m, AttentionKnobs::default(), EncodeOptions::default()).unwrap();
        c.topology = Topology::GraphKv { rounds: 1 };
        c.rounds_used = 1;
        assert!(matches!(
            visible_set(&c, &g),
            Err(Error::MissingBlock { segment_id: 2, round: 1 })
        ));
    }

    #[test]
    fn decode_score_count_closed_form() {
        let m = model();
        let g = build_star(segs(3), 2, &[0, 1]).unwrap();
        let c = encode_graphkv(&g, &m, EncodeOptions::default()).unwrap();
        let query = crate::tokenizer::encode("why?");
        let r = generate(&c, &g, &query, GenerateOptions::new(6), &m).unwrap();
        let vis = g.total_tokens() as u64;
        let q = query.len() as u64;
        let mut want = q * vis + q * (q + 1) / 2;
        for k in 1..r.output.len() as u64 {
            want += vis + q + k;
        }
        assert_eq!(r.metrics.decode_scores, want);
        assert_eq!(
            r.metrics.max_position_index,
            c.query_start + query.len() + r.output.len() - 1
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let m = model();
        let g = build_star(segs(3), 2, &[0, 1]).unwrap();
        let c = encode_graphkv(&g, &m, EncodeOptions::default()).unwrap();
        let q = crate::tokenizer::encode("tell me");
        let a = generate(&c, &g, &q, GenerateOptions::new(5), &m).unwrap();
        let b = generate(&c, &g, &q, GenerateOptions::new(5), &m).unwrap();
        assert_eq!(a.output, b.output);
        let bits = |r: &GenerationResult| -> Vec<u32> {
            r.step_logits.iter().flatten().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn rejects_empty_query_and_zero_budget() {
        let m = model();
        let g = SegmentGraph::new(segs(2), vec![]).unwrap();
        let c = encode_parallel(&g, &m, AttentionKnobs::default(), EncodeOptions::default()).unwrap();
        assert!(generate(&c, &g, &[], GenerateOptions::new(3), &m).is_err());
        assert!(generate(&c, &g, &[65], GenerateOptions::new(0), &m).is_err());
    }
}
