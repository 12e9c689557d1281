//! Closed-form cost predictions, computed from segment lengths alone.
//!
//! With `S(t) = t(t+1)/2` and lengths `len_i`:
//!
//! * sequential prefill: `S(Σ len_i)`
//! * parallel prefill:   `Σ S(len_i)`
//! * graph update, per round: `Σ_j (len_j · Σ_{i∈N(j)} len_i + S(len_j))`
//! * decode over `V = Σ len_i` visible tokens with query `q` and `g` output
//!   tokens: `q·V + S(q) + Σ_{k=1}^{g-1} (V + q + k)`
//!
//! For `n` chunks of length `L` these are `O(n²L²)`, `O(nL²)` and
//! `O(|E|L²)`, and each decode step is `O(|V|L)`.

use serde::{Deserialize, Serialize};

use crate::encoders::TopologyKind;
use crate::error::{Error, Result};
use crate::kvcache::PlanOptions;
use crate::topology::SegmentGraph;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostPrediction {
    pub score_count: u64,
    pub prefill_scores: u64,
    pub update_scores: u64,
    pub decode_scores: u64,
    pub peak_block_tokens: usize,
    pub kv_entries: usize,
    pub max_position_index: usize,
}

fn tri(t: u64) -> u64 {
    t * (t + 1) / 2
}

pub fn cost_model(
    graph: &SegmentGraph,
    topology: TopologyKind,
    plan: PlanOptions,
    query_len: usize,
    gen_len: usize,
) -> Result<CostPrediction> {
    if query_len == 0 {
        return Err(Error::InvalidArgument("query_len must be >= 1".into()));
    }
    let lens: Vec<u64> = graph.segments().iter().map(|s| s.len() as u64).collect();
    let len_of = |id: u32| graph.segment(id).map_or(0, |s| s.len() as u64);
    let total: u64 = lens.iter().sum();
    let longest = lens.iter().copied().max().unwrap_or(0);
    let chunk_len = plan.l_override.map_or(longest, |l| l as u64);
    if chunk_len < longest {
        return Err(Error::InvalidArgument(format!(
            "L override {chunk_len} is shorter than the longest chunk ({longest})"
        )));
    }
    let q = query_len as u64;
    let g = gen_len as u64;

    let (prefill, update, peak_chunks, extra_kv, query_start) = match topology {
        TopologyKind::Sequential => (tri(total), 0, total, 0, total),
        TopologyKind::Parallel => (
            lens.iter().map(|&l| tri(l)).sum(),
            0,
            longest,
            0,
            plan.pe_offset as u64 + chunk_len,
        ),
        TopologyKind::GraphKv => {
            let rounds = if graph.has_edges() { plan.rounds as u64 } else { 0 };
            let per_round: u64 = graph
                .targets()
                .iter()
                .map(|&t| {
                    let src: u64 = graph.sources_of(t).iter().map(|&s| len_of(s)).sum();
                    len_of(t) * src + tri(len_of(t))
                })
                .sum();
            let target_tokens: u64 = graph.targets().iter().map(|&t| len_of(t)).sum();
            (
                lens.iter().map(|&l| tri(l)).sum(),
                rounds * per_round,
                longest,
                rounds * target_tokens,
                plan.pe_offset as u64 + (rounds + 1) * chunk_len,
            )
        }
    };

    let fed = g.saturating_sub(1);
    let decode = if g == 0 {
        q * total + tri(q)
    } else {
        q * total + tri(q) + fed * (total + q) + tri(fed)
    };
    let emitted = q + g;
    Ok(CostPrediction {
        score_count: prefill + update + decode,
        prefill_scores: prefill,
        update_scores: update,
        decode_scores: decode,
        peak_block_tokens: peak_chunks.max(q) as usize,
        kv_entries: (total + extra_kv + q + fed) as usize,
        max_position_index: (query_start + emitted - 1) as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_star, Segment};

    fn equal_chunks(n: u32, len: usize) -> Vec<Segment> {
        (0..n).map(|i| Segment::from_text(i, "w".repeat(len))).collect()
    }

    #[test]
    fn sequential_ten_by_fifty() {
        let g = SegmentGraph::new(equal_chunks(10, 50), vec![]).unwrap();
        let c = cost_model(&g, TopologyKind::Sequential, PlanOptions::default(), 1, 0).unwrap();
        assert_eq!(c.prefill_scores, 125_250);
    }

    #[test]
    fn parallel_ten_by_fifty() {
        let g = SegmentGraph::new(equal_chunks(10, 50), vec![]).unwrap();
        let c = cost_model(&g, TopologyKind::Parallel, PlanOptions::default(), 1, 0).unwrap();
        assert_eq!(c.prefill_scores, 12_750);
    }

    #[test]
    fn star_update_cost() {
        let leaves: Vec<u32> = (0..10).collect();
        let g = build_star(equal_chunks(11, 50), 10, &leaves).unwrap();
        let c = cost_model(&g, TopologyKind::GraphKv, PlanOptions::default(), 1, 0).unwrap();
        assert_eq!(c.update_scores, 26_275);
        assert_eq!(c.peak_block_tokens, 50);
        assert_eq!(c.kv_entries, 11 * 50 + 50 + 1);
    }

    #[test]
    fn span_and_decode() {
        let leaves: Vec<u32> = (0..3).collect();
        let g = build_star(equal_chunks(4, 8), 3, &leaves).unwrap();
        let c = cost_model(&g, TopologyKind::GraphKv, PlanOptions::default(), 5, 4).unwrap();
        assert_eq!(c.max_position_index, 2 * 8 + 5 + 4 - 1);
        let v = 32u64;
        assert_eq!(c.decode_scores, 5 * v + 15 + 3 * (v + 5) + 6);
        let seq = cost_model(&g, TopologyKind::Sequential, PlanOptions::default(), 5, 4).unwrap();
        assert_eq!(seq.max_position_index, 32 + 5 + 4 - 1);
        assert_eq!(seq.peak_block_tokens, 32);
    }

    #[test]
    fn rejects_short_override() {
        let g = SegmentGraph::new(equal_chunks(2, 8), vec![]).unwrap();
        let opts = PlanOptions {
            l_override: Some(4),
            ..PlanOptions::default()
        };
        assert!(cost_model(&g, TopologyKind::Parallel, opts, 1, 1).is_err());
    }
}
