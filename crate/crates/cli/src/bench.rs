//! Memory and time-to-first-token sweeps on synthetic star graphs.
//!
//! Both sweeps write versioned CSV whose first column is the schema tag.

use std::path::Path;
use std::time::Instant;

use segkv::kvcache::{load_cache, save_cache};
use segkv::oracle::cost_model;
use segkv::topology::{build_star, synth_star, Segment};
use segkv::{
    encode, generate, tokenizer, AttentionKnobs, CacheState, EncodeOptions, GenerateOptions,
    Model, ModelConfig, PlanOptions, SegmentGraph, Topology, TopologyKind,
};
use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::error::{CliError, CliResult};

pub const MEMORY_SCHEMA: &str = "segkv.memory.v1";
pub const TTFT_SCHEMA: &str = "segkv.ttft.v1";
pub const DEFAULT_QUERY: &str = "What do these papers have in common?";

/// Model used by the benches when no weight file is given: one layer, one
/// head, width 8, so the sequential baseline's 50k-token prefills fit a
/// desk-time budget on a single core.
pub fn bench_config() -> ModelConfig {
    ModelConfig::tiny(1, 1, 8)
}

pub fn bench_model(weights: Option<&Path>, seed: u64) -> CliResult<Model> {
    Ok(match weights {
        Some(p) => Model::load(p)?,
        None => Model::random(bench_config(), seed)?,
    })
}

fn topology(kind: TopologyKind, graph: &SegmentGraph) -> Topology {
    match kind {
        TopologyKind::Sequential => Topology::Sequential {
            order: graph.input_order().to_vec(),
        },
        TopologyKind::Parallel => Topology::Parallel {
            knobs: AttentionKnobs::default(),
        },
        TopologyKind::GraphKv => Topology::GraphKv { rounds: 1 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub schema: String,
    pub topology: TopologyKind,
    pub neighbors: usize,
    pub words: usize,
    /// Heap high-water mark of encode + first token; empty when not measured.
    pub peak_bytes: Option<u64>,
    pub model_peak_tokens: usize,
    pub kv_entries: usize,
}

#[derive(Debug, Clone)]
pub struct MemorySweep {
    pub words: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub topologies: Vec<TopologyKind>,
    pub budget_tokens: Option<usize>,
    pub measure: bool,
    pub query: String,
    pub seed: u64,
}

pub fn bench_memory(model: &Model, sweep: &MemorySweep) -> CliResult<Vec<MemoryRow>> {
    let query = tokenizer::encode(&sweep.query);
    if query.is_empty() {
        return Err(CliError::input("query must not be empty"));
    }
    let mut neighbors = sweep.neighbors.clone();
    neighbors.sort_unstable();
    neighbors.dedup();
    let mut rows = Vec::new();
    for &words in &sweep.words {
        for &kind in &sweep.topologies {
            for &n in &neighbors {
                let graph = synth_star(n, words, sweep.seed)?;
                let predicted = cost_model(&graph, kind, PlanOptions::default(), query.len(), 1)?;
                if sweep.budget_tokens.is_some_and(|b| predicted.peak_block_tokens > b) {
                    break;
                }
                let peak_bytes = if sweep.measure && alloc::is_active() {
                    let base = alloc::reset_peak();
                    let cache = encode(&graph, model, &topology(kind, &graph), EncodeOptions::default())?;
                    generate(&cache, &graph, &query, GenerateOptions::new(1), model)?;
                    drop(cache);
                    Some((alloc::peak() - base) as u64)
                } else {
                    None
                };
                rows.push(MemoryRow {
                    schema: MEMORY_SCHEMA.into(),
                    topology: kind,
                    neighbors: n,
                    words,
                    peak_bytes,
                    model_peak_tokens: predicted.peak_block_tokens,
                    kv_entries: predicted.kv_entries,
                });
            }
        }
    }
    Ok(rows)
}

/// Predicted peak block tokens of star graphs with `1..=cap` neighbors:
/// leaves are `pool[..n]`, the center is the last pool segment.
pub fn peak_profile(kind: TopologyKind, pool: &[Segment], query_len: usize, cap: usize) -> CliResult<Vec<usize>> {
    if pool.len() < cap + 1 {
        return Err(CliError::input(format!(
            "pool of {} segments is too small for {cap} neighbors",
            pool.len()
        )));
    }
    let center = pool.last().expect("pool checked");
    (1..=cap)
        .map(|n| {
            let mut segs: Vec<Segment> = pool[..n].to_vec();
            segs.push(Segment {
                id: n as u32,
                ..center.clone()
            });
            let leaves: Vec<u32> = (0..n as u32).collect();
            let graph = build_star(segs, n as u32, &leaves)?;
            Ok(cost_model(&graph, kind, PlanOptions::default(), query_len, 1)?.peak_block_tokens)
        })
        .collect()
}

/// Largest neighbor count whose whole prefix of the profile fits `budget`.
pub fn max_neighbors_within(profile: &[usize], budget: usize) -> usize {
    profile.iter().take_while(|&&p| p <= budget).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtftVariant {
    Sequential,
    Parallel,
    GraphKv,
    ParallelCached,
    GraphKvCached,
}

impl TtftVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            TtftVariant::Sequential => "sequential",
            TtftVariant::Parallel => "parallel",
            TtftVariant::GraphKv => "graphkv",
            TtftVariant::ParallelCached => "parallel-cached",
            TtftVariant::GraphKvCached => "graphkv-cached",
        }
    }

    fn kind(&self) -> TopologyKind {
        match self {
            TtftVariant::Sequential => TopologyKind::Sequential,
            TtftVariant::Parallel | TtftVariant::ParallelCached => TopologyKind::Parallel,
            TtftVariant::GraphKv | TtftVariant::GraphKvCached => TopologyKind::GraphKv,
        }
    }

    fn cached(&self) -> bool {
        matches!(self, TtftVariant::ParallelCached | TtftVariant::GraphKvCached)
    }
}

impl std::str::FromStr for TtftVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            TtftVariant::Sequential,
            TtftVariant::Parallel,
            TtftVariant::GraphKv,
            TtftVariant::ParallelCached,
            TtftVariant::GraphKvCached,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
        .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtftRow {
    pub schema: String,
    pub topology: String,
    pub neighbors: usize,
    pub words_per_node: usize,
    pub tokens_total: usize,
    pub runs: usize,
    pub ttft_ns_median: u64,
    /// Every run's TTFT, `;`-separated, in run order.
    pub ttft_ns_raw: String,
}

#[derive(Debug, Clone)]
pub struct TtftSweep {
    pub words: Vec<usize>,
    pub neighbors: usize,
    pub runs: usize,
    pub variants: Vec<TtftVariant>,
    pub workers: usize,
    pub query: String,
    pub seed: u64,
}

/// Lower median.
pub fn median(values: &[u64]) -> u64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Runs the sweep. Cached variants are prefilled and written to `cache_dir`
/// first; each run then loads the cache and starts the clock just before
/// the query is encoded. Uncached variants time the whole encode.
pub fn bench_ttft(model: &Model, sweep: &TtftSweep, cache_dir: &Path) -> CliResult<Vec<TtftRow>> {
    if sweep.runs == 0 {
        return Err(CliError::input("--runs must be >= 1"));
    }
    let query = tokenizer::encode(&sweep.query);
    if query.is_empty() {
        return Err(CliError::input("query must not be empty"));
    }
    let opts = EncodeOptions {
        plan: PlanOptions::default(),
        workers: sweep.workers.max(1),
    };
    let mut rows = Vec::new();
    for &words in &sweep.words {
        let graph = synth_star(sweep.neighbors, words, sweep.seed)?;
        for variant in &sweep.variants {
            let topo = topology(variant.kind(), &graph);
            let mut raw = Vec::with_capacity(sweep.runs);
            if variant.cached() {
                let path = cache_dir.join(format!("{}-{words}.gkvc", variant.as_str()));
                let fresh = encode(&graph, model, &topo, opts)?;
                save_cache(&path, &fresh.store, model, fresh.chunk_len)?;
                drop(fresh);
                for _ in 0..sweep.runs {
                    let (l, store) = load_cache(&path, model)?;
                    let cache = CacheState::from_loaded(topo.clone(), &graph, store, l, opts.plan)?;
                    let started = Instant::now();
                    let r = generate(&cache, &graph, &query, timed(started), model)?;
                    raw.push(r.metrics.ttft_ns);
                }
            } else {
                for _ in 0..sweep.runs {
                    let started = Instant::now();
                    let cache = encode(&graph, model, &topo, opts)?;
                    let r = generate(&cache, &graph, &query, timed(started), model)?;
                    raw.push(r.metrics.ttft_ns);
                }
            }
            rows.push(TtftRow {
                schema: TTFT_SCHEMA.into(),
                topology: variant.as_str().into(),
                neighbors: sweep.neighbors,
                words_per_node: words,
                tokens_total: graph.total_tokens(),
                runs: sweep.runs,
                ttft_ns_median: median(&raw),
                ttft_ns_raw: raw.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
            });
        }
    }
    Ok(rows)
}

fn timed(started: Instant) -> GenerateOptions {
    GenerateOptions {
        max_new: 1,
        started: Some(started),
    }
}

/// CSV text with a header row, even when `rows` is empty.
pub fn to_csv<T: Serialize>(header: &[&str], rows: &[T]) -> CliResult<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const MEMORY_HEADER: &[&str] = &[
    "schema",
    "topology",
    "neighbors",
    "words",
    "peak_bytes",
    "model_peak_tokens",
    "kv_entries",
];

pub const TTFT_HEADER: &[&str] = &[
    "schema",
    "topology",
    "neighbors",
    "words_per_node",
    "tokens_total",
    "runs",
    "ttft_ns_median",
    "ttft_ns_raw",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_is_lower_middle() {
        assert_eq!(median(&[5, 1, 3]), 3);
        assert_eq!(median(&[4, 1, 3, 2]), 2);
        assert_eq!(median(&[7]), 7);
    }

    #[test]
    fn memory_rows_follow_cost_model() {
        let model = Model::random(bench_config(), 1).unwrap();
        let sweep = MemorySweep {
            words: vec![20],
            neighbors: vec![1, 2, 3],
            topologies: vec![TopologyKind::Sequential, TopologyKind::GraphKv],
            budget_tokens: None,
            measure: false,
            query: "why?".into(),
            seed: 3,
        };
        let rows = bench_memory(&model, &sweep).unwrap();
        assert_eq!(rows.len(), 6);
        let graph_peaks: Vec<usize> = rows
            .iter()
            .filter(|r| r.topology == TopologyKind::GraphKv)
            .map(|r| r.model_peak_tokens)
            .collect();
        let longest = |n| synth_star(n, 20, 3).unwrap().max_len();
        assert_eq!(graph_peaks, vec![longest(1), longest(2), longest(3)]);
        for r in rows.iter().filter(|r| r.topology == TopologyKind::Sequential) {
            assert_eq!(r.model_peak_tokens, synth_star(r.neighbors, 20, 3).unwrap().total_tokens());
        }
        assert!(rows.iter().all(|r| r.peak_bytes.is_none()));
    }

    #[test]
    fn budget_stops_a_topology() {
        let model = Model::random(bench_config(), 1).unwrap();
        let one = synth_star(1, 10, 0).unwrap().total_tokens();
        let sweep = MemorySweep {
            words: vec![10],
            neighbors: vec![1, 2, 4, 8],
            topologies: vec![TopologyKind::Sequential, TopologyKind::GraphKv],
            budget_tokens: Some(one),
            measure: false,
            query: "q".into(),
            seed: 0,
        };
        let rows = bench_memory(&model, &sweep).unwrap();
        let seq = rows.iter().filter(|r| r.topology == TopologyKind::Sequential).count();
        let gkv = rows.iter().filter(|r| r.topology == TopologyKind::GraphKv).count();
        assert_eq!((seq, gkv), (1, 4));
    }

    #[test]
    fn csv_has_schema_first_and_header_when_empty() {
        let empty = to_csv::<MemoryRow>(MEMORY_HEADER, &[]).unwrap();
        assert_eq!(empty.trim(), MEMORY_HEADER.join(","));
        let row = TtftRow {
            schema: TTFT_SCHEMA.into(),
            topology: "sequential".into(),
            neighbors: 10,
            words_per_node: 100,
            tokens_total: 6580,
            runs: 2,
            ttft_ns_median: 5,
            ttft_ns_raw: "5;9".into(),
        };
        let text = to_csv(TTFT_HEADER, &[row]).unwrap();
        let second = text.lines().nth(1).unwrap();
        assert!(second.starts_with("segkv.ttft.v1,sequential,10,100,6580,2,5,5;9"));
    }

    #[test]
    fn variants_parse() {
        for v in ["sequential", "parallel", "graphkv", "parallel-cached", "graphkv-cached"] {
            assert_eq!(v.parse::<TtftVariant>().unwrap().as_str(), v);
        }
        assert!("cached".parse::<TtftVariant>().is_err());
    }
}
