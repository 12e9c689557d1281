//! The strategies that populate a KV cache from a segment graph.
//!
//! * sequential: one causal prefill over the concatenated segments, split
//!   back into per-segment blocks at their true absolute positions;
//! * parallel: every segment prefilled alone in the shared range, edges
//!   ignored; an optional temperature/scale knob applies at decode time;
//! * graph: parallel round 0, then each target re-encoded in the next range
//!   while reading the previous-round blocks of its sources.
//!
//! Segments (and targets within a round) are independent, so they may be
//! encoded on a worker pool; results are stored in canonical order and are
//! bitwise identical to serial execution.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{plan_positions, KvBlock, KvStore, PePlan, PlanOptions};
use crate::model::{AttentionKnobs, EncodeMode, Model};
use crate::topology::SegmentGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Sequential,
    Parallel,
    #[serde(rename = "graphkv")]
    GraphKv,
}

impl TopologyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TopologyKind::Sequential => "sequential",
            TopologyKind::Parallel => "parallel",
            TopologyKind::GraphKv => "graphkv",
        }
    }
}

impl std::str::FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(TopologyKind::Sequential),
            "parallel" => Ok(TopologyKind::Parallel),
            "graphkv" => Ok(TopologyKind::GraphKv),
            other => Err(Error::InvalidArgument(format!(
                "unknown topology {other:?} (expected sequential, parallel or graphkv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Topology {
    Sequential { order: Vec<u32> },
    Parallel { knobs: AttentionKnobs },
    GraphKv { rounds: u32 },
}

impl Topology {
    pub fn kind(&self) -> TopologyKind {
        match self {
            Topology::Sequential { .. } => TopologyKind::Sequential,
            Topology::Parallel { .. } => TopologyKind::Parallel,
            Topology::GraphKv { .. } => TopologyKind::GraphKv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub plan: PlanOptions,
    /// Worker threads for independent block encodes; 1 runs inline.
    pub workers: usize,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            plan: PlanOptions::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeStats {
    /// Scores of the initial (round-0 or sequential) prefill.
    pub prefill_scores: u64,
    /// Scores of all target re-encodes.
    pub update_scores: u64,
    /// Largest token count passed to a single block encode.
    pub peak_block_tokens: usize,
}

impl EncodeStats {
    pub fn score_count(&self) -> u64 {
        self.prefill_scores + self.update_scores
    }
}

/// A populated cache plus what decoding needs to continue from it.
#[derive(Debug, Clone)]
pub struct CacheState {
    pub topology: Topology,
    pub store: KvStore,
    /// First position handed to the query.
    pub query_start: usize,
    /// `L` of the position plan; the longest segment for sequential runs.
    pub chunk_len: usize,
    pub rounds_used: u32,
    pub stats: EncodeStats,
}

impl CacheState {
    /// Attention knobs used for query and generated tokens.
    pub fn decode_knobs(&self) -> AttentionKnobs {
        match self.topology {
            Topology::Parallel { knobs } => knobs,
            _ => AttentionKnobs::default(),
        }
    }

    /// Rebuilds the state around a store loaded from disk, re-deriving
    /// positions from the graph and checking the recorded `L`.
    pub fn from_loaded(
        topology: Topology,
        graph: &SegmentGraph,
        store: KvStore,
        stored_chunk_len: usize,
        plan: PlanOptions,
    ) -> Result<Self> {
        let (query_start, chunk_len, rounds_used, expected) = match &topology {
            Topology::Sequential { order } => {
                check_order(graph, order)?;
                let mut expected = BTreeMap::new();
                let mut offset = 0;
                for &id in order {
                    expected.insert((id, 0), offset);
                    offset += graph.segment(id).map_or(0, |s| s.len());
                }
                (graph.total_tokens(), graph.max_len(), 0, expected)
            }
            Topology::Parallel { .. } => {
                let p = plan_positions(graph, PlanOptions { rounds: 0, ..plan })?;
                (p.query_start(), p.chunk_len(), 0, p.entries().collect())
            }
            Topology::GraphKv { rounds } => {
                let p = plan_positions(graph, PlanOptions { rounds: *rounds, ..plan })?;
                (p.query_start(), p.chunk_len(), p.rounds_used(), p.entries().collect())
            }
        };
        if stored_chunk_len != chunk_len {
            return Err(Error::ShapeInconsistency(format!(
                "cache was planned with L={stored_chunk_len}, graph implies L={chunk_len}"
            )));
        }
        check_layout(&store, graph, &expected, topology.kind())?;
        Ok(Self {
            topology,
            store,
            query_start,
            chunk_len,
            rounds_used,
            stats: EncodeStats::default(),
        })
    }
}

/// A loaded store must hold exactly the blocks the plan calls for, each at
/// its planned position and with its segment's length.
fn check_layout(
    store: &KvStore,
    graph: &SegmentGraph,
    expected: &BTreeMap<(u32, u32), usize>,
    kind: TopologyKind,
) -> Result<()> {
    let mismatch = |detail: String| {
        Err(Error::ShapeInconsistency(format!(
            "cache does not fit a {} run over this graph: {detail}",
            kind.as_str()
        )))
    };
    if store.len() != expected.len() {
        return mismatch(format!("{} blocks stored, {} planned", store.len(), expected.len()));
    }
    for b in store.all() {
        let key = (b.segment_id(), b.round());
        match expected.get(&key) {
            None => return mismatch(format!("unplanned block (segment {}, round {})", key.0, key.1)),
            Some(&start) if start != b.position_start() => {
                return mismatch(format!(
                    "block (segment {}, round {}) starts at {}, plan says {start}",
                    key.0,
                    key.1,
                    b.position_start()
                ))
            }
            Some(_) => {}
        }
        let want_len = graph.segment(key.0).map_or(0, |s| s.len());
        if b.len() != want_len {
            return mismatch(format!(
                "block (segment {}, round {}) has {} tokens, segment has {want_len}",
                key.0,
                key.1,
                b.len()
            ));
        }
    }
    Ok(())
}

fn check_order(graph: &SegmentGraph, order: &[u32]) -> Result<()> {
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if !sorted.iter().copied().eq(graph.ids()) {
        return Err(Error::InvalidArgument(format!(
            "sequential order {order:?} is not a permutation of the segment ids"
        )));
    }
    Ok(())
}

fn map_blocks<T, F>(items: &[T], workers: usize, f: F) -> Result<Vec<(KvBlock, u64)>>
where
    T: Sync,
    F: Fn(&T) -> Result<(KvBlock, u64)> + Sync + Send,
{
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// One causal prefill over the segments in `order`.
pub fn encode_sequential(graph: &SegmentGraph, order: &[u32], model: &Model) -> Result<CacheState> {
    check_order(graph, order)?;
    let segs: Vec<_> = order
        .iter()
        .map(|&id| graph.segment(id).expect("order checked"))
        .collect();
    let tokens: Vec<u32> = segs.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let enc = model.encode_block(&tokens, 0, &[], EncodeMode::Prefill, AttentionKnobs::default())?;
    let whole = KvBlock::new(u32::MAX, 0, 0, model.config().d_model, enc.layers)?;
    let mut store = KvStore::new();
    let mut offset = 0;
    for s in &segs {
        store.put(whole.slice(s.id, 0, offset, offset + s.len())?);
        offset += s.len();
    }
    Ok(CacheState {
        topology: Topology::Sequential {
            order: order.to_vec(),
        },
        store,
        query_start: tokens.len(),
        chunk_len: graph.max_len(),
        rounds_used: 0,
        stats: EncodeStats {
            prefill_scores: enc.score_count,
            update_scores: 0,
            peak_block_tokens: tokens.len(),
        },
    })
}

fn prefill_round0(graph: &SegmentGraph, plan: &PePlan, model: &Model, workers: usize) -> Result<(KvStore, EncodeStats)> {
    let d_model = model.config().d_model;
    let results = map_blocks(graph.segments(), workers, |seg| {
        let start = plan.start_of(seg.id, 0).expect("every segment has a round-0 start");
        let enc = model.encode_block(&seg.tokens, start, &[], EncodeMode::Prefill, AttentionKnobs::default())?;
        Ok((KvBlock::new(seg.id, 0, start, d_model, enc.layers)?, enc.score_count))
    })?;
    let mut store = KvStore::new();
    let mut stats = EncodeStats::default();
    for (block, scores) in results {
        stats.prefill_scores += scores;
        stats.peak_block_tokens = stats.peak_block_tokens.max(block.len());
        store.put(block);
    }
    Ok((store, stats))
}

/// Independent prefill of every segment in the shared range; edges ignored.
pub fn encode_parallel(
    graph: &SegmentGraph,
    model: &Model,
    knobs: AttentionKnobs,
    opts: EncodeOptions,
) -> Result<CacheState> {
    knobs.validate()?;
    let plan = plan_positions(graph, PlanOptions { rounds: 0, ..opts.plan })?;
    let (store, stats) = prefill_round0(graph, &plan, model, opts.workers)?;
    Ok(CacheState {
        topology: Topology::Parallel { knobs },
        store,
        query_start: plan.query_start(),
        chunk_len: plan.chunk_len(),
        rounds_used: 0,
        stats,
    })
}

/// Round-0 parallel prefill followed by `opts.plan.rounds` target updates.
///
/// In round `r` each target reads, for every source, that source's block of
/// the highest round below `r` (round 0 for pure sources), so targets within
/// a round never depend on each other.
pub fn encode_graphkv(graph: &SegmentGraph, model: &Model, opts: EncodeOptions) -> Result<CacheState> {
    if opts.plan.rounds == 0 {
        return Err(Error::InvalidArgument("graph encoding needs rounds >= 1".into()));
    }
    let plan = plan_positions(graph, opts.plan)?;
    let (mut store, mut stats) = prefill_round0(graph, &plan, model, opts.workers)?;
    let d_model = model.config().d_model;
    let targets = graph.targets();
    for round in 1..=plan.rounds_used() {
        let prev = &store;
        let results = map_blocks(&targets, opts.workers, |&t| {
            let seg = graph.segment(t).expect("target exists");
            let visible = graph
                .sources_of(t)
                .iter()
                .map(|&s| prev.latest(s, round - 1))
                .collect::<Result<Vec<_>>>()?;
            let start = plan.start_of(t, round).expect("target has a start");
            let enc = model.encode_block(&seg.tokens, start, &visible, EncodeMode::Prefill, AttentionKnobs::default())?;
            Ok((KvBlock::new(t, round, start, d_model, enc.layers)?, enc.score_count))
        })?;
        for (block, scores) in results {
            stats.update_scores += scores;
            stats.peak_block_tokens = stats.peak_block_tokens.max(block.len());
            store.put(block);
        }
    }
    Ok(CacheState {
        topology: Topology::GraphKv {
            rounds: opts.plan.rounds,
        },
        store,
        query_start: plan.query_start(),
        chunk_len: plan.chunk_len(),
        rounds_used: plan.rounds_used(),
        stats,
    })
}

/// Dispatches on `topology`; sequential runs use the graph's input order.
pub fn encode(graph: &SegmentGraph, model: &Model, topology: &Topology, opts: EncodeOptions) -> Result<CacheState> {
    match topology {
        Topology::Sequential { order } => encode_sequential(graph, order, model),
        Topology::Parallel { knobs } => encode_parallel(graph, model, *knobs, opts),
        Topology::GraphKv { rounds } => encode_graphkv(
            graph,
            model,
            EncodeOptions {
                plan: PlanOptions {
                    rounds: *rounds,
                    ..opts.plan
                },
                ..opts
            },
        ),
    }
}
