//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use segkv::TopologyKind;

#[derive(Debug, Parser)]
#[command(name = "segkv", version, about = "Segment-graph KV cache inference engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a graph and generate greedily from a query.
    Generate(GenerateArgs),
    /// Encode a graph and write its KV cache to disk.
    Prefill(PrefillArgs),
    /// Peak-memory sweep over neighbor counts (CSV).
    BenchMemory(BenchMemoryArgs),
    /// Time-to-first-token sweep over words per node (CSV).
    BenchTtft(BenchTtftArgs),
    /// Run the oracle-equivalence and invariant suite.
    Verify(VerifyArgs),
    /// Turn a scored segment list into a topology JSON.
    BuildGraph(BuildGraphArgs),
    /// Write seeded random weights.
    InitWeights(InitWeightsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GraphArgs {
    /// Graph JSON file.
    #[arg(long)]
    pub graph: PathBuf,
    /// Rebuild edges as bipartite top-m from the file's scores.
    #[arg(long, conflicts_with = "full")]
    pub m: Option<usize>,
    /// Rebuild edges so every segment reads every other one.
    #[arg(long)]
    pub full: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    #[arg(long, default_value = "graphkv")]
    pub topology: TopologyKind,
    /// Decode-time attention temperature (parallel topology only).
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
    /// Decode-time attention scale (parallel topology only).
    #[arg(long, default_value_t = 1.0)]
    pub scale: f32,
    /// Target update rounds (graphkv only).
    #[arg(long, default_value_t = 1)]
    pub rounds: u32,
    /// Worker threads for independent block encodes.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Shift every planned position by this amount.
    #[arg(long, default_value_t = 0)]
    pub pe_offset: usize,
    /// Chunk length L; defaults to the longest segment.
    #[arg(long)]
    pub l_override: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Weight file (`GKVW`).
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    /// Decode from a cache written by `prefill` instead of encoding.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PrefillArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub weights: PathBuf,
    /// Cache file to write (`GKVC`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchMemoryArgs {
    /// Weight file; defaults to seeded random weights of the bench config.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "500,1000")]
    pub words: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub neighbors: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "sequential,graphkv")]
    pub topologies: Vec<TopologyKind>,
    /// Stop a topology's sweep once its peak block exceeds this many tokens.
    #[arg(long)]
    pub budget_tokens: Option<usize>,
    /// Also run each configuration and record the heap peak.
    #[arg(long)]
    pub measure: bool,
    #[arg(long, default_value = crate::bench::DEFAULT_QUERY)]
    pub query: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchTtftArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "100,200,400,800")]
    pub words: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub neighbors: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Any of sequential, parallel, graphkv, parallel-cached, graphkv-cached.
    #[arg(long, value_delimiter = ',', default_value = "sequential,graphkv-cached")]
    pub variants: Vec<crate::bench::TtftVariant>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value = crate::bench::DEFAULT_QUERY)]
    pub query: String,
    /// Directory for prefilled caches; a temporary one by default.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Include the wall-clock TTFT trend check.
    #[arg(long)]
    pub with_ttft: bool,
    /// Run only the named checks.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BuildGraphArgs {
    /// Input graph JSON (segments, optional scores; edges are replaced).
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, required_unless_present_any = ["full", "star"])]
    pub m: Option<usize>,
    #[arg(long, conflicts_with_all = ["m", "star"])]
    pub full: bool,
    /// Star topology: this id is the center, every other segment a leaf.
    #[arg(long, conflicts_with = "m")]
    pub star: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InitWeightsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub d_model: usize,
}
