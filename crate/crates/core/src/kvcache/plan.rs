//! Shared positional ranges.
//!
//! With chunk length `L`, every round-0 block starts at 0, every round-`r`
//! target block at `r·L`, and the query continues contiguously at
//! `(R+1)·L` where `R` is the number of update rounds (0 without edges).
//! The position span before the query is therefore `(R+1)·L` no matter how
//! many chunks share each range. An optional offset shifts everything.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::topology::SegmentGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub l_override: Option<usize>,
    /// Update rounds to run when the graph has edges; 0 ignores edges.
    pub rounds: u32,
    pub pe_offset: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            l_override: None,
            rounds: 1,
            pe_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PePlan {
    chunk_len: usize,
    rounds_used: u32,
    pe_offset: usize,
    query_start: usize,
    starts: BTreeMap<(u32, u32), usize>,
}

pub fn plan_positions(graph: &SegmentGraph, opts: PlanOptions) -> Result<PePlan> {
    let max_len = graph.max_len();
    let chunk_len = match opts.l_override {
        Some(l) if l < max_len => {
            return Err(Error::InvalidArgument(format!(
                "L override {l} is shorter than the longest chunk ({max_len} tokens)"
            )))
        }
        Some(l) => l,
        None => max_len,
    };
    if chunk_len == 0 {
        return Err(Error::InvalidArgument("chunk length L must be >= 1".into()));
    }
    let rounds_used = if graph.has_edges() { opts.rounds } else { 0 };
    let mut starts = BTreeMap::new();
    for id in graph.ids() {
        starts.insert((id, 0), opts.pe_offset);
    }
    for r in 1..=rounds_used {
        for t in graph.targets() {
            starts.insert((t, r), opts.pe_offset + r as usize * chunk_len);
        }
    }
    Ok(PePlan {
        chunk_len,
        rounds_used,
        pe_offset: opts.pe_offset,
        query_start: opts.pe_offset + (rounds_used as usize + 1) * chunk_len,
        starts,
    })
}

impl PePlan {
    /// `L`.
    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn rounds_used(&self) -> u32 {
        self.rounds_used
    }

    pub fn pe_offset(&self) -> usize {
        self.pe_offset
    }

    pub fn query_start(&self) -> usize {
        self.query_start
    }

    pub fn start_of(&self, segment_id: u32, round: u32) -> Option<usize> {
        self.starts.get(&(segment_id, round)).copied()
    }

    /// All planned `(segment, round) -> start` entries in canonical order.
    pub fn entries(&self) -> impl Iterator<Item = ((u32, u32), usize)> + '_ {
        self.starts.iter().map(|(&k, &v)| (k, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_star, Segment, SegmentGraph};

    fn graph(lens: &[usize], edges: Vec<(u32, u32)>) -> SegmentGraph {
        let segs = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| Segment::from_text(i as u32, "x".repeat(n)))
            .collect();
        SegmentGraph::new(segs, edges).unwrap()
    }

    #[test]
    fn edgeless_all_start_at_zero() {
        let p = plan_positions(&graph(&[4, 5, 3], vec![]), PlanOptions::default()).unwrap();
        assert_eq!(p.chunk_len(), 5);
        assert_eq!(p.rounds_used(), 0);
        for id in 0..3 {
            assert_eq!(p.start_of(id, 0), Some(0));
            assert_eq!(p.start_of(id, 1), None);
        }
        assert_eq!(p.query_start(), 5);
    }

    #[test]
    fn single_edge_moves_target_to_second_range() {
        let p = plan_positions(&graph(&[4, 5, 3], vec![(0, 2)]), PlanOptions::default()).unwrap();
        assert_eq!(p.start_of(2, 1), Some(5));
        assert_eq!(p.start_of(0, 1), None);
        assert_eq!(p.query_start(), 10);
    }

    #[test]
    fn star_span_independent_of_chunk_count() {
        let segs: Vec<Segment> = (0..100u32)
            .map(|i| Segment::from_text(i, "y".repeat(50)))
            .collect();
        let leaves: Vec<u32> = (1..100).collect();
        let g = build_star(segs, 0, &leaves).unwrap();
        let p = plan_positions(&g, PlanOptions::default()).unwrap();
        assert_eq!(p.query_start(), 100);
        // Scan every assigned index: all chunk positions lie below 2L.
        let max_assigned = g
            .segments()
            .iter()
            .flat_map(|s| {
                let r = if g.is_target(s.id) { 1 } else { 0 };
                let start = p.start_of(s.id, r).unwrap();
                start..start + s.len()
            })
            .max()
            .unwrap();
        assert!(max_assigned < 2 * 50);
    }

    #[test]
    fn override_and_offset() {
        let g = graph(&[4, 5], vec![(0, 1)]);
        let opts = PlanOptions {
            l_override: Some(8),
            rounds: 1,
            pe_offset: 3,
        };
        let p = plan_positions(&g, opts).unwrap();
        assert_eq!(p.start_of(0, 0), Some(3));
        assert_eq!(p.start_of(1, 1), Some(11));
        assert_eq!(p.query_start(), 19);
        let too_small = PlanOptions {
            l_override: Some(4),
            ..PlanOptions::default()
        };
        assert!(plan_positions(&g, too_small).is_err());
    }

    #[test]
    fn extra_rounds_stack_ranges() {
        let g = graph(&[4, 5], vec![(0, 1)]);
        let opts = PlanOptions {
            rounds: 3,
            ..PlanOptions::default()
        };
        let p = plan_positions(&g, opts).unwrap();
        assert_eq!(p.start_of(1, 3), Some(15));
        assert_eq!(p.query_start(), 20);
    }
}
