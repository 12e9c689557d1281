//! Subcommands that run the engine on user inputs.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use segkv::kvcache::{load_cache, save_cache};
use segkv::topology::{build_bipartite_topm, build_full, build_star, GraphFile};
use segkv::{
    encode, generate, tokenizer, AttentionKnobs, CacheState, EncodeOptions, EncodeStats,
    GenerateOptions, Model, ModelConfig, PlanOptions, RunMetrics, SegmentGraph, Topology,
    TopologyKind,
};
use serde::{Deserialize, Serialize};

use crate::args::{
    BuildGraphArgs, EngineArgs, GenerateArgs, GraphArgs, InitWeightsArgs, PrefillArgs,
};
use crate::error::{io_err, CliError, CliResult};

pub const GENERATE_SCHEMA: &str = "segkv.generate.v1";
pub const PREFILL_SCHEMA: &str = "segkv.prefill.v1";
pub const DEFAULT_SEED: u64 = 42;

/// `GKV_SEED` if set, else 42.
pub fn seed() -> CliResult<u64> {
    match std::env::var("GKV_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::input(format!("GKV_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

pub fn load_graph(args: &GraphArgs) -> CliResult<SegmentGraph> {
    let file = GraphFile::read(&args.graph)?;
    if let Some(m) = args.m {
        let scores = file.scores.as_ref().ok_or_else(|| {
            CliError::input(format!("{}: --m needs a \"scores\" array", args.graph.display()))
        })?;
        return Ok(build_bipartite_topm(file.segments(), scores, m)?);
    }
    if args.full {
        return Ok(build_full(file.segments())?);
    }
    Ok(file.to_graph()?)
}

pub fn plan_options(engine: &EngineArgs) -> PlanOptions {
    PlanOptions {
        l_override: engine.l_override,
        rounds: engine.rounds,
        pe_offset: engine.pe_offset,
    }
}

/// Resolves the topology and prints warnings for options it ignores.
pub fn topology_for(engine: &EngineArgs, graph: &SegmentGraph, warn: &mut dyn Write) -> Topology {
    let knobs = AttentionKnobs {
        temperature: engine.temperature,
        scale: engine.scale,
    };
    let default_knobs = knobs == AttentionKnobs::default();
    match engine.topology {
        TopologyKind::Sequential => {
            if !default_knobs {
                let _ = writeln!(warn, "warning: --temperature/--scale only affect the parallel topology");
            }
            Topology::Sequential {
                order: graph.input_order().to_vec(),
            }
        }
        TopologyKind::Parallel => {
            if graph.has_edges() {
                let _ = writeln!(
                    warn,
                    "warning: parallel topology ignores the graph's {} edges",
                    graph.edge_count()
                );
            }
            Topology::Parallel { knobs }
        }
        TopologyKind::GraphKv => {
            if !default_knobs {
                let _ = writeln!(warn, "warning: --temperature/--scale only affect the parallel topology");
            }
            Topology::GraphKv {
                rounds: engine.rounds,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub schema: String,
    pub topology: TopologyKind,
    pub query: String,
    pub output_tokens: Vec<u32>,
    pub output_text: String,
    pub from_cache: bool,
    pub query_start: usize,
    pub chunk_len: usize,
    pub rounds_used: u32,
    pub metrics: RunMetrics,
}

impl GenerateReport {
    /// The report with wall-clock fields zeroed, for determinism checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.metrics.ttft_ns = 0;
        r
    }
}

pub fn run_generate(args: &GenerateArgs, warn: &mut dyn Write) -> CliResult<GenerateReport> {
    let model = Model::load(&args.weights)?;
    let graph = load_graph(&args.graph)?;
    let topology = topology_for(&args.engine, &graph, warn);
    let query = tokenizer::encode(&args.query);
    if query.is_empty() {
        return Err(CliError::input("--query must not be empty"));
    }
    let plan = plan_options(&args.engine);

    let (cache, started) = match &args.cache {
        Some(path) => {
            let (l, store) = load_cache(path, &model)?;
            let cache = CacheState::from_loaded(topology, &graph, store, l, plan)?;
            (cache, Instant::now())
        }
        None => {
            let started = Instant::now();
            let cache = encode(
                &graph,
                &model,
                &topology,
                EncodeOptions {
                    plan,
                    workers: args.engine.workers,
                },
            )?;
            (cache, started)
        }
    };
    let opts = GenerateOptions {
        max_new: args.max_new,
        started: Some(started),
    };
    let result = generate(&cache, &graph, &query, opts, &model)?;
    Ok(GenerateReport {
        schema: GENERATE_SCHEMA.into(),
        topology: cache.topology.kind(),
        query: args.query.clone(),
        output_text: tokenizer::decode(&result.output),
        output_tokens: result.output,
        from_cache: args.cache.is_some(),
        query_start: cache.query_start,
        chunk_len: cache.chunk_len,
        rounds_used: cache.rounds_used,
        metrics: result.metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillReport {
    pub schema: String,
    pub topology: TopologyKind,
    pub cache: String,
    pub blocks: usize,
    pub kv_entries: usize,
    pub chunk_len: usize,
    pub rounds_used: u32,
    pub query_start: usize,
    pub stats: EncodeStats,
}

pub fn run_prefill(args: &PrefillArgs, warn: &mut dyn Write) -> CliResult<PrefillReport> {
    let model = Model::load(&args.weights)?;
    let graph = load_graph(&args.graph)?;
    let topology = topology_for(&args.engine, &graph, warn);
    let cache = encode(
        &graph,
        &model,
        &topology,
        EncodeOptions {
            plan: plan_options(&args.engine),
            workers: args.engine.workers,
        },
    )?;
    save_cache(&args.out, &cache.store, &model, cache.chunk_len)?;
    Ok(PrefillReport {
        schema: PREFILL_SCHEMA.into(),
        topology: topology.kind(),
        cache: args.out.display().to_string(),
        blocks: cache.store.len(),
        kv_entries: cache.store.token_entries(),
        chunk_len: cache.chunk_len,
        rounds_used: cache.rounds_used,
        query_start: cache.query_start,
        stats: cache.stats,
    })
}

pub fn run_build_graph(args: &BuildGraphArgs) -> CliResult<GraphFile> {
    let file = GraphFile::read(&args.graph)?;
    let graph = if let Some(m) = args.m {
        let scores = file.scores.as_ref().ok_or_else(|| {
            CliError::input(format!("{}: --m needs a \"scores\" array", args.graph.display()))
        })?;
        build_bipartite_topm(file.segments(), scores, m)?
    } else if args.full {
        build_full(file.segments())?
    } else if let Some(center) = args.star {
        let leaves: Vec<u32> = file
            .segments
            .iter()
            .map(|s| s.id)
            .filter(|&id| id != center)
            .collect();
        build_star(file.segments(), center, &leaves)?
    } else {
        return Err(CliError::input("choose one of --m, --full or --star"));
    };
    Ok(GraphFile::from_graph(&graph, file.scores.clone()))
}

pub fn run_init_weights(args: &InitWeightsArgs, seed: u64) -> CliResult<u64> {
    let config = ModelConfig::tiny(args.layers, args.heads, args.d_model);
    let model = Model::random(config, seed)?;
    model.save(&args.out)?;
    Ok(model.model_hash())
}

/// Writes `text` to `out`, or to stdout when no path is given.
pub fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_err(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Internal(format!("stdout: {e}")))
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}
