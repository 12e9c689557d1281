//! Acceptance checks shared by `segkv verify` and the `acceptance` test
//! target. Each check returns a one-line detail on success or the reason it
//! failed; [`run_check`] adds timing and the budget verdict.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkv::kvcache::{load_cache, save_cache};
use segkv::oracle::{cost_model, full_attention_reference, rel_err, segment_mask};
use segkv::topology::{build_bipartite_topm, build_full, build_star, synth_star, synth_text, GraphFile};
use segkv::{
    encode, encode_graphkv, encode_parallel, encode_sequential, generate, tokenizer, AttentionKnobs,
    CacheState, EncodeOptions, GenerateOptions, GenerationResult, KvBlock, Model, ModelConfig,
    PlanOptions, Segment, SegmentGraph, Topology, TopologyKind,
};
use serde::Serialize;

use crate::args::{EngineArgs, GenerateArgs, GraphArgs, PrefillArgs};
use crate::bench::{self, TtftSweep, TtftVariant};
use crate::commands::{run_generate, run_prefill};

pub const VERIFY_SCHEMA: &str = "segkv.verify.v1";

/// Relative-error tolerance against the f64 reference.
const TOL: f64 = 1e-5;
/// Greedy comparisons are skipped (and the instance redrawn) below this
/// logit margin.
const MIN_MARGIN: f32 = 1e-4;

type CheckResult = Result<String, String>;

pub struct CheckContext {
    pub seed: u64,
    /// Scratch directory for cache and weight files.
    pub scratch: PathBuf,
}

pub struct Check {
    pub name: &'static str,
    pub budget: Option<Duration>,
    /// Wall-clock comparison; `verify` skips it unless asked.
    pub timing: bool,
    run: fn(&CheckContext) -> CheckResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub elapsed_s: f64,
    pub budget_s: Option<f64>,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        let budget = self.budget_s.map_or(String::new(), |b| format!(" / {b:.0}s"));
        format!(
            "{} {} ({:.2}s{budget}): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed_s,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub schema: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

pub fn registry() -> Vec<Check> {
    let secs = |s| Some(Duration::from_secs(s));
    vec![
        Check { name: "chain_matches_concatenation", budget: secs(30), timing: false, run: chain_matches_concatenation },
        Check { name: "edgeless_equals_parallel", budget: secs(10), timing: false, run: edgeless_equals_parallel },
        Check { name: "source_order_invariance", budget: secs(120), timing: false, run: source_order_invariance },
        Check { name: "positional_span", budget: secs(30), timing: false, run: positional_span },
        Check { name: "complexity_accounting", budget: secs(60), timing: false, run: complexity_accounting },
        Check { name: "memory_scaling", budget: secs(5), timing: false, run: memory_scaling },
        Check { name: "ttft_trend", budget: secs(120), timing: true, run: ttft_trend },
        Check { name: "positional_bias", budget: None, timing: false, run: positional_bias },
        Check { name: "determinism", budget: None, timing: false, run: determinism },
    ]
}

pub fn run_check(check: &Check, ctx: &CheckContext) -> CheckOutcome {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(|| (check.run)(ctx)))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            Err(format!("panicked: {msg}"))
        });
    let elapsed = started.elapsed();
    let over = check.budget.is_some_and(|b| elapsed > b);
    let (passed, mut detail) = match result {
        Ok(d) => (!over, d),
        Err(d) => (false, d),
    };
    if over {
        detail = format!("over time budget; {detail}");
    }
    CheckOutcome {
        name: check.name.into(),
        passed,
        elapsed_s: elapsed.as_secs_f64(),
        budget_s: check.budget.map(|b| b.as_secs_f64()),
        detail,
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        // Written negated so that NaN comparisons fail.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn model(layers: usize, heads: usize, d: usize, seed: u64) -> Result<Model, String> {
    Model::random(ModelConfig::tiny(layers, heads, d), seed).map_err(e)
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Synthetic text cut to exactly `bytes` bytes (the generator emits ASCII).
fn text_of_len(bytes: usize, rng: &mut ChaCha8Rng) -> String {
    let mut t = String::new();
    while t.len() < bytes {
        t.push_str(&synth_text(8, rng));
        t.push(' ');
    }
    t.truncate(bytes);
    t
}

fn greedy(cache: &CacheState, graph: &SegmentGraph, query: &[u32], n: usize, m: &Model) -> Result<GenerationResult, String> {
    generate(cache, graph, query, GenerateOptions::new(n), m).map_err(e)
}

fn block_err(m: &Model, block: &KvBlock, keys: &[Vec<f64>], values: &[Vec<f64>], from: usize) -> f64 {
    let d = m.config().d_model;
    (0..m.config().n_layers)
        .map(|l| {
            let span = from * d..(from + block.len()) * d;
            rel_err(&block.layer(l).keys, &keys[l][span.clone()])
                .max(rel_err(&block.layer(l).values, &values[l][span]))
        })
        .fold(0.0, f64::max)
}

/// Greedy decoding on the f64 reference: `prefix` tokens at `positions`
/// with `mask`, then `steps` causal tokens at consecutive positions after
/// the last prefix position. Returns the tokens and the first-step logits.
fn reference_greedy(
    prefix: &[u32],
    positions: &[usize],
    lengths: &[usize],
    reads: &[Vec<usize>],
    steps: usize,
    m: &Model,
) -> Result<(Vec<u32>, Vec<f64>), String> {
    let vocab = m.config().vocab_size;
    let mut tokens = prefix.to_vec();
    let mut pos = positions.to_vec();
    let mut lens = lengths.to_vec();
    let mut out = Vec::new();
    let mut first = Vec::new();
    while out.len() < steps {
        let r = full_attention_reference(&tokens, &pos, &segment_mask(&lens, reads), m).map_err(e)?;
        let last = &r.logits[(tokens.len() - 1) * vocab..];
        if first.is_empty() {
            first = last.to_vec();
        }
        let best = last
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > last[b] { i } else { b });
        let tok = best as u32;
        out.push(tok);
        if tok == tokenizer::EOT || out.len() == steps {
            break;
        }
        // The new token is one more row of the query segment.
        tokens.push(tok);
        pos.push(pos.last().unwrap() + 1);
        *lens.last_mut().unwrap() += 1;
    }
    Ok((out, first))
}

/// Target B of a chain A -> B with len(B) <= len(A) = L matches the
/// reference on the concatenation A‖B, and greedy decoding over the cache
/// matches reference decoding over A‖B‖query.
fn chain_matches_concatenation(ctx: &CheckContext) -> CheckResult {
    let (mut kv_worst, mut logit_worst) = (0.0f64, 0.0f64);
    let (mut done, mut redrawn, mut seq_matches) = (0, 0, 0);
    let mut attempt = 0u64;
    while done < 20 {
        ensure!(attempt < 60, "only {done} unambiguous instances in {attempt} draws");
        let m = model(2, 2, 16, ctx.seed + attempt)?;
        let mut r = rng(ctx.seed, 100 + attempt);
        attempt += 1;
        let a = text_of_len(r.gen_range(24..64), &mut r);
        let equal = done % 2 == 0;
        let b = text_of_len(if equal { a.len() } else { r.gen_range(4..a.len()) }, &mut r);
        let q = tokenizer::encode(&synth_text(3, &mut r));
        let g = SegmentGraph::new(
            vec![Segment::from_text(0, a), Segment::from_text(1, b)],
            vec![(0, 1)],
        )
        .map_err(e)?;
        let (la, lb) = (g.segment(0).unwrap().len(), g.segment(1).unwrap().len());
        let cache = encode_graphkv(&g, &m, EncodeOptions::default()).map_err(e)?;

        let ab: Vec<u32> = g.segments().iter().flat_map(|s| s.tokens.clone()).collect();
        let causal = (0..la + lb).collect::<Vec<_>>();
        let r_ab = full_attention_reference(&ab, &causal, &segkv::oracle::causal_mask(la + lb), &m).map_err(e)?;
        let block = cache.store.get(1, 1).map_err(e)?;
        kv_worst = kv_worst.max(block_err(&m, block, &r_ab.keys, &r_ab.values, la));

        let res = greedy(&cache, &g, &q, 6, &m)?;
        if res.min_margin() < MIN_MARGIN {
            redrawn += 1;
            continue;
        }
        let l = la;
        let prefix: Vec<u32> = ab.iter().chain(&q).copied().collect();
        let positions: Vec<usize> = (0..la + lb).chain(2 * l..2 * l + q.len()).collect();
        // A‖B is one causal span; the query reads all of it.
        let (ref_out, first) = reference_greedy(
            &prefix,
            &positions,
            &[la + lb, q.len()],
            &[vec![], vec![0]],
            res.output.len(),
            &m,
        )?;
        logit_worst = logit_worst.max(rel_err(&res.step_logits[0], &first));
        ensure!(
            ref_out == res.output,
            "instance {attempt}: greedy {:?} != reference {:?}",
            res.output,
            ref_out
        );
        if equal {
            let seq = encode_sequential(&g, &[0, 1], &m).map_err(e)?;
            let s = greedy(&seq, &g, &q, 6, &m)?;
            ensure!(s.output == res.output, "instance {attempt}: sequential output differs");
            seq_matches += 1;
        }
        done += 1;
    }
    ensure!(kv_worst <= TOL, "target K/V rel err {kv_worst:.2e} > {TOL:.0e}");
    ensure!(logit_worst <= TOL, "first-step logit rel err {logit_worst:.2e} > {TOL:.0e}");
    Ok(format!(
        "{done} models: K/V rel err {kv_worst:.2e}, logits {logit_worst:.2e}, greedy equal, \
         {seq_matches} sequential matches, {redrawn} redrawn"
    ))
}

fn random_segments(r: &mut ChaCha8Rng, n: usize, max_bytes: usize) -> Vec<Segment> {
    (0..n)
        .map(|i| {
            let len = r.gen_range(1..=max_bytes);
            Segment::from_text(i as u32, text_of_len(len, r))
        })
        .collect()
}

fn random_edges(r: &mut ChaCha8Rng, n: usize) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    for s in 0..n as u32 {
        for t in 0..n as u32 {
            if s != t && r.gen_bool(0.3) {
                edges.push((s, t));
            }
        }
    }
    edges
}

fn random_plan(r: &mut ChaCha8Rng, longest: usize) -> PlanOptions {
    PlanOptions {
        l_override: r.gen_bool(0.5).then(|| longest + r.gen_range(0..4)),
        rounds: r.gen_range(1..=3),
        pe_offset: r.gen_range(0..4),
    }
}

/// With no edges the graph encoder is the parallel encoder, bit for bit.
fn edgeless_equals_parallel(ctx: &CheckContext) -> CheckResult {
    for i in 0..10u64 {
        let m = model(2, 2, 16, ctx.seed + i)?;
        let mut r = rng(ctx.seed, 200 + i);
        let n = r.gen_range(2..7);
        let segs = random_segments(&mut r, n, 40);
        let g = SegmentGraph::new(segs, random_edges(&mut r, n)).map_err(e)?.without_edges();
        let opts = EncodeOptions {
            plan: random_plan(&mut r, g.max_len()),
            workers: 1,
        };
        let a = encode_graphkv(&g, &m, opts).map_err(e)?;
        let b = encode_parallel(&g, &m, AttentionKnobs::default(), opts).map_err(e)?;
        ensure!(a.store.bit_eq(&b.store), "graph {i}: stores differ");
        ensure!(a.query_start == b.query_start, "graph {i}: query starts differ");
        let q = tokenizer::encode("and?");
        let (ga, gb) = (greedy(&a, &g, &q, 5, &m)?, greedy(&b, &g, &q, 5, &m)?);
        ensure!(ga.output == gb.output, "graph {i}: outputs differ");
        let bits = |x: &GenerationResult| -> Vec<u32> { x.step_logits.iter().flatten().map(|v| v.to_bits()).collect() };
        ensure!(bits(&ga) == bits(&gb), "graph {i}: logits differ");
    }
    Ok("10 graphs: stores, logits and outputs bitwise equal".into())
}

/// Relabelling the five sources of a star leaves the target block within
/// tolerance and the greedy output unchanged, over all 120 orders.
fn source_order_invariance(ctx: &CheckContext) -> CheckResult {
    for attempt in 0..10u64 {
        let seed = ctx.seed + 1000 * attempt;
        let m = model(2, 2, 16, seed)?;
        let mut r = rng(seed, 300);
        let sources: Vec<String> = (0..5).map(|_| synth_text(r.gen_range(3..8), &mut r)).collect();
        let center = synth_text(r.gen_range(4..10), &mut r);
        let q = tokenizer::encode(&synth_text(3, &mut r));
        let build = |perm: &[usize]| -> Result<SegmentGraph, String> {
            let mut segs: Vec<Segment> = perm
                .iter()
                .enumerate()
                .map(|(id, &p)| Segment::from_text(id as u32, sources[p].clone()))
                .collect();
            segs.push(Segment::from_text(5, center.clone()));
            build_star(segs, 5, &[0, 1, 2, 3, 4]).map_err(e)
        };
        let g0 = build(&[0, 1, 2, 3, 4])?;
        let c0 = encode_graphkv(&g0, &m, EncodeOptions::default()).map_err(e)?;
        let base = greedy(&c0, &g0, &q, 8, &m)?;
        if base.min_margin() < MIN_MARGIN {
            continue;
        }
        let target0 = c0.store.get(5, 1).map_err(e)?;
        let as_f64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let mut worst = 0.0f64;
        let mut count = 0;
        for perm in (0..5).permutations(5) {
            let g = build(&perm)?;
            let c = encode_graphkv(&g, &m, EncodeOptions::default()).map_err(e)?;
            let t = c.store.get(5, 1).map_err(e)?;
            for l in 0..m.config().n_layers {
                worst = worst
                    .max(rel_err(&t.layer(l).keys, &as_f64(&target0.layer(l).keys)))
                    .max(rel_err(&t.layer(l).values, &as_f64(&target0.layer(l).values)));
            }
            let out = greedy(&c, &g, &q, 8, &m)?;
            ensure!(out.output == base.output, "order {perm:?} changed the output");
            count += 1;
        }
        ensure!(worst <= TOL, "target K/V rel err {worst:.2e} > {TOL:.0e}");
        return Ok(format!(
            "{count} orders: target K/V rel err {worst:.2e}, outputs identical (seed {seed})"
        ));
    }
    Err("no instance with a greedy margin above 1e-4 in 10 draws".into())
}

/// The largest position index is 2L + query + generated - 1 for any number
/// of neighbors.
fn positional_span(ctx: &CheckContext) -> CheckResult {
    const L: usize = 16;
    let m = model(2, 2, 16, ctx.seed)?;
    let q = tokenizer::encode("where?");
    let mut seen = Vec::new();
    for n in [2usize, 10, 100] {
        let mut r = rng(ctx.seed, 400 + n as u64);
        let mut segs: Vec<Segment> = (0..n)
            .map(|i| {
                let len = if i == 0 { L } else { r.gen_range(1..=L) };
                Segment::from_text(i as u32, text_of_len(len, &mut r))
            })
            .collect();
        segs.push(Segment::from_text(n as u32, text_of_len(L, &mut r)));
        let leaves: Vec<u32> = (0..n as u32).collect();
        let g = build_star(segs, n as u32, &leaves).map_err(e)?;
        let cache = encode_graphkv(&g, &m, EncodeOptions::default()).map_err(e)?;
        ensure!(cache.chunk_len == L, "n={n}: chunk length {} != {L}", cache.chunk_len);
        for b in cache.store.all() {
            ensure!(b.position_start() + b.len() <= 2 * L, "n={n}: block ({}, {}) passes 2L", b.segment_id(), b.round());
        }
        let res = greedy(&cache, &g, &q, 5, &m)?;
        let gen = res.output.len();
        let expect = 2 * L + q.len() + gen - 1;
        let got = res.metrics.max_position_index;
        ensure!(got == expect, "n={n}: max position {got} != {expect}");
        let predicted = cost_model(&g, TopologyKind::GraphKv, PlanOptions::default(), q.len(), gen).map_err(e)?;
        ensure!(predicted.max_position_index == got, "n={n}: cost model says {}", predicted.max_position_index);
        seen.push(format!("n={n}: {got}"));
    }
    Ok(format!("L={L}, query {}: {}", q.len(), seen.join(", ")))
}

/// Every counter the engine reports equals the closed-form prediction.
fn complexity_accounting(ctx: &CheckContext) -> CheckResult {
    let m = model(2, 2, 16, ctx.seed)?;
    let mut compared = 0;
    for i in 0..50u64 {
        let mut r = rng(ctx.seed, 500 + i);
        let n = r.gen_range(1..9);
        let segs = random_segments(&mut r, n, 40);
        let g = match (i % 4, n) {
            (_, 1) => SegmentGraph::new(segs, vec![]),
            (0, _) => SegmentGraph::new(segs, random_edges(&mut r, n)),
            (1, _) => {
                let leaves: Vec<u32> = (1..n as u32).collect();
                build_star(segs, 0, &leaves)
            }
            (2, _) => build_full(segs),
            _ => {
                let scores: Vec<f64> = (0..n).map(|_| r.gen()).collect();
                build_bipartite_topm(segs, &scores, r.gen_range(1..n))
            }
        }
        .map_err(e)?;
        let plan = random_plan(&mut r, g.max_len());
        let q = tokenizer::encode(&text_of_len(r.gen_range(1..8), &mut r));
        let max_new = r.gen_range(1..6);
        for kind in [TopologyKind::Sequential, TopologyKind::Parallel, TopologyKind::GraphKv] {
            let topology = match kind {
                TopologyKind::Sequential => Topology::Sequential { order: g.input_order().to_vec() },
                TopologyKind::Parallel => Topology::Parallel { knobs: AttentionKnobs::default() },
                TopologyKind::GraphKv => Topology::GraphKv { rounds: plan.rounds },
            };
            let opts = EncodeOptions { plan, workers: 1 + (i as usize % 2) };
            let cache = encode(&g, &m, &topology, opts).map_err(e)?;
            let res = greedy(&cache, &g, &q, max_new, &m)?;
            let p = cost_model(&g, kind, plan, q.len(), res.output.len()).map_err(e)?;
            let got = &res.metrics;
            let pairs = [
                ("score_count", got.score_count as usize, p.score_count as usize),
                ("prefill_scores", got.prefill_scores as usize, p.prefill_scores as usize),
                ("update_scores", got.update_scores as usize, p.update_scores as usize),
                ("decode_scores", got.decode_scores as usize, p.decode_scores as usize),
                ("peak_block_tokens", got.peak_block_tokens, p.peak_block_tokens),
                ("kv_entries", got.kv_entries_total, p.kv_entries),
                ("max_position_index", got.max_position_index, p.max_position_index),
            ];
            for (name, a, b) in pairs {
                ensure!(a == b, "graph {i} {}: {name} {a} != predicted {b}", kind.as_str());
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} runs over 50 graphs: all 7 counters match"))
}

/// Peak block size is flat in the neighbor count for the graph encoder and
/// linear for sequential, so a fixed budget admits at least 3x more
/// neighbors.
fn memory_scaling(ctx: &CheckContext) -> CheckResult {
    const CAP: usize = 256;
    let q = tokenizer::encode(bench::DEFAULT_QUERY).len();
    let mut lines = Vec::new();
    for words in [500usize, 1000] {
        let mut r = rng(ctx.seed, 600 + words as u64);
        let texts: Vec<String> = (0..=CAP).map(|_| synth_text(words, &mut r)).collect();
        let l = texts.iter().map(String::len).min().unwrap();
        let pool: Vec<Segment> = texts
            .into_iter()
            .enumerate()
            .map(|(i, mut t)| {
                t.truncate(l);
                Segment::from_text(i as u32, t)
            })
            .collect();
        let gkv = bench::peak_profile(TopologyKind::GraphKv, &pool, q, CAP).map_err(e)?;
        let seq = bench::peak_profile(TopologyKind::Sequential, &pool, q, CAP).map_err(e)?;
        for n in 1..=CAP {
            ensure!(gkv[n - 1] == l, "{words} words, n={n}: graph peak {} != L={l}", gkv[n - 1]);
            ensure!(seq[n - 1] == (n + 1) * l, "{words} words, n={n}: sequential peak {} != (n+1)L", seq[n - 1]);
        }
        for k in [4usize, 5, 8, 16, 32] {
            let budget = k * l;
            let (ns, ng) = (bench::max_neighbors_within(&seq, budget), bench::max_neighbors_within(&gkv, budget));
            ensure!(ng >= 3 * ns, "{words} words, budget {k}L: {ng} vs {ns} neighbors");
            lines.push(format!("{k}L {ng}/{ns}"));
        }
        lines.push(format!("({words} words, L={l})"));
    }
    Ok(format!("graph/sequential neighbors within budget: {}", lines.join(" ")))
}

/// Cached graph decoding beats sequential prefill at every size and grows
/// more slowly with segment length.
fn ttft_trend(ctx: &CheckContext) -> CheckResult {
    let m = Model::random(bench::bench_config(), ctx.seed).map_err(e)?;
    let sweep = TtftSweep {
        words: vec![100, 200, 400, 800],
        neighbors: 10,
        runs: 5,
        variants: vec![TtftVariant::Sequential, TtftVariant::GraphKvCached],
        workers: 1,
        query: bench::DEFAULT_QUERY.into(),
        seed: ctx.seed,
    };
    let rows = bench::bench_ttft(&m, &sweep, &ctx.scratch).map_err(e)?;
    let med = |v: TtftVariant| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.topology == v.as_str())
            .map(|r| r.ttft_ns_median as f64 / 1e6)
            .collect()
    };
    let (seq, gkv) = (med(TtftVariant::Sequential), med(TtftVariant::GraphKvCached));
    ensure!(seq.len() == 4 && gkv.len() == 4, "missing rows");
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).join("/");
    for (i, w) in sweep.words.iter().enumerate() {
        ensure!(gkv[i] < seq[i], "{w} words: cached {:.2}ms >= sequential {:.2}ms", gkv[i], seq[i]);
    }
    let (gs, gg) = (seq[3] / seq[0], gkv[3] / gkv[0]);
    ensure!(gg < gs, "cached growth {gg:.1}x >= sequential growth {gs:.1}x");
    Ok(format!(
        "median ms sequential {} vs cached {}; growth {gs:.1}x vs {gg:.1}x",
        fmt(&seq),
        fmt(&gkv)
    ))
}

/// Reordering the inputs changes what sequential encoding produces but not
/// what the parallel and graph encoders produce.
fn positional_bias(ctx: &CheckContext) -> CheckResult {
    for attempt in 0..40u64 {
        let seed = ctx.seed + attempt;
        let m = model(2, 2, 16, seed)?;
        let mut r = rng(seed, 700);
        let texts: Vec<String> = (0..3).map(|_| synth_text(r.gen_range(4..9), &mut r)).collect();
        let q = tokenizer::encode(&synth_text(3, &mut r));
        let (mut seq, mut par, mut gkv) = (Vec::new(), Vec::new(), Vec::new());
        let mut margin = f32::INFINITY;
        for perm in (0..3).permutations(3) {
            let segs: Vec<Segment> = perm
                .iter()
                .enumerate()
                .map(|(id, &p)| Segment::from_text(id as u32, texts[p].clone()))
                .collect();
            let center = perm.iter().position(|&p| p == 2).unwrap() as u32;
            let leaves: Vec<u32> = (0..3).filter(|&i| i != center).collect();
            let g = build_star(segs, center, &leaves).map_err(e)?;
            let s = encode_sequential(&g, &[0, 1, 2], &m).map_err(e)?;
            seq.push(greedy(&s, &g, &q, 8, &m)?.output);
            let p = encode_parallel(&g, &m, AttentionKnobs::default(), EncodeOptions::default()).map_err(e)?;
            let pr = greedy(&p, &g, &q, 8, &m)?;
            let c = encode_graphkv(&g, &m, EncodeOptions::default()).map_err(e)?;
            let gr = greedy(&c, &g, &q, 8, &m)?;
            margin = margin.min(pr.min_margin()).min(gr.min_margin());
            par.push(pr.output);
            gkv.push(gr.output);
        }
        if margin < MIN_MARGIN {
            continue;
        }
        ensure!(par.iter().all_equal(), "seed {seed}: parallel output depends on order");
        ensure!(gkv.iter().all_equal(), "seed {seed}: graph output depends on order");
        let distinct = seq.iter().unique().count();
        if distinct > 1 {
            return Ok(format!(
                "seed {seed}: sequential gives {distinct} outputs over 6 orders, parallel and graph 1 each"
            ));
        }
    }
    Err("no instance in 40 draws where order changed the sequential output".into())
}

/// Same inputs, same bits: across runs, worker counts, cache round trips
/// and the CLI path.
fn determinism(ctx: &CheckContext) -> CheckResult {
    let m1 = model(2, 2, 16, ctx.seed)?;
    let m2 = model(2, 2, 16, ctx.seed)?;
    ensure!(m1.model_hash() == m2.model_hash(), "seeded weights differ");
    let g = synth_star(4, 12, ctx.seed).map_err(e)?;
    let q = tokenizer::encode("same?");
    let logit_bits = |x: &GenerationResult| -> Vec<u32> { x.step_logits.iter().flatten().map(|v| v.to_bits()).collect() };
    let topologies = [
        Topology::Sequential { order: g.input_order().to_vec() },
        Topology::Parallel { knobs: AttentionKnobs { temperature: 0.9, scale: 1.2 } },
        Topology::GraphKv { rounds: 2 },
    ];
    for t in &topologies {
        let name = t.kind().as_str();
        let opts = |workers| EncodeOptions { plan: PlanOptions { rounds: 2, ..PlanOptions::default() }, workers };
        let a = encode(&g, &m1, t, opts(1)).map_err(e)?;
        let b = encode(&g, &m2, t, opts(1)).map_err(e)?;
        let c = encode(&g, &m1, t, opts(3)).map_err(e)?;
        ensure!(a.store.bit_eq(&b.store), "{name}: repeated encodes differ");
        ensure!(a.store.bit_eq(&c.store), "{name}: 3 workers differ from 1");
        let (ra, rb) = (greedy(&a, &g, &q, 6, &m1)?, greedy(&b, &g, &q, 6, &m2)?);
        ensure!(logit_bits(&ra) == logit_bits(&rb), "{name}: repeated decodes differ");
        let path = ctx.scratch.join(format!("det-{name}.gkvc"));
        save_cache(&path, &a.store, &m1, a.chunk_len).map_err(e)?;
        let (l, store) = load_cache(&path, &m1).map_err(e)?;
        let loaded = CacheState::from_loaded(t.clone(), &g, store, l, opts(1).plan).map_err(e)?;
        let rl = greedy(&loaded, &g, &q, 6, &m1)?;
        ensure!(logit_bits(&rl) == logit_bits(&ra), "{name}: cache round trip changed logits");
    }

    let weights = ctx.scratch.join("det-weights.gkvw");
    let graph = ctx.scratch.join("det-graph.json");
    m1.save(&weights).map_err(e)?;
    GraphFile::from_graph(&g, None).write(&graph).map_err(e)?;
    let gen = generate_args(&weights, &graph, None);
    let mut sink = Vec::new();
    let r1 = run_generate(&gen, &mut sink).map_err(e)?;
    let r2 = run_generate(&gen, &mut sink).map_err(e)?;
    ensure!(r1.without_timing() == r2.without_timing(), "CLI reports differ");
    let caches = [ctx.scratch.join("det-a.gkvc"), ctx.scratch.join("det-b.gkvc")];
    for out in &caches {
        run_prefill(
            &PrefillArgs { graph: gen.graph.clone(), engine: gen.engine.clone(), weights: weights.clone(), out: out.clone() },
            &mut sink,
        )
        .map_err(e)?;
    }
    let read = |p: &Path| std::fs::read(p).map_err(e);
    ensure!(read(&caches[0])? == read(&caches[1])?, "prefill files differ");
    let cached = run_generate(&generate_args(&weights, &graph, Some(caches[0].clone())), &mut sink).map_err(e)?;
    ensure!(cached.output_tokens == r1.output_tokens, "CLI output from cache differs");
    Ok("3 topologies: runs, workers 1/3 and cache round trip bitwise; CLI reports and prefill files identical".into())
}

fn generate_args(weights: &Path, graph: &Path, cache: Option<PathBuf>) -> GenerateArgs {
    GenerateArgs {
        graph: GraphArgs { graph: graph.into(), m: None, full: false },
        engine: EngineArgs {
            topology: TopologyKind::GraphKv,
            temperature: 1.0,
            scale: 1.0,
            rounds: 1,
            workers: 1,
            pe_offset: 0,
            l_override: None,
        },
        weights: weights.into(),
        query: "same?".into(),
        max_new: 6,
        cache,
        out: None,
    }
}

/// Runs the selected checks, printing each line as it finishes.
pub fn run_all(checks: &[Check], ctx: &CheckContext, mut on_line: impl FnMut(&str)) -> VerifyReport {
    let outcomes: Vec<CheckOutcome> = checks
        .iter()
        .map(|c| {
            let o = run_check(c, ctx);
            on_line(&o.line());
            o
        })
        .collect();
    VerifyReport {
        schema: VERIFY_SCHEMA.into(),
        seed: ctx.seed,
        passed: outcomes.iter().all(|o| o.passed),
        checks: outcomes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let names: Vec<_> = registry().iter().map(|c| c.name).collect();
        assert!(names.iter().all_unique());
        assert_eq!(registry().iter().filter(|c| c.timing).count(), 1);
    }

    #[test]
    fn failures_and_panics_fail() {
        let ctx = CheckContext { seed: 0, scratch: std::env::temp_dir() };
        let bad = Check { name: "bad", budget: None, timing: false, run: |_| Err("nope".into()) };
        let boom = Check { name: "boom", budget: None, timing: false, run: |_| panic!("kaboom") };
        let slow = Check {
            name: "slow",
            budget: Some(Duration::ZERO),
            timing: false,
            run: |_| {
                std::thread::sleep(Duration::from_millis(2));
                Ok("fine".into())
            },
        };
        assert!(!run_check(&bad, &ctx).passed);
        let o = run_check(&boom, &ctx);
        assert!(!o.passed && o.detail.contains("kaboom"));
        let o = run_check(&slow, &ctx);
        assert!(!o.passed && o.detail.starts_with("over time budget"));
    }

    #[test]
    fn text_of_len_is_exact() {
        let mut r = rng(1, 2);
        for n in [1, 7, 100] {
            assert_eq!(text_of_len(n, &mut r).len(), n);
        }
    }
}
