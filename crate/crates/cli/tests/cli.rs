//! The `segkv` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn segkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segkv"))
        .args(args)
        .env_remove("GKV_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let weights = dir.join("w.gkvw");
    let out = segkv(&["init-weights", "--out", s(&weights)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let graph = dir.join("g.json");
    std::fs::write(
        &graph,
        r#"{"segments":[{"id":0,"text":"first paper on caches"},{"id":1,"text":"second paper"},
            {"id":2,"text":"the cited work"}],"edges":[[0,2],[1,2]],"scores":[0.3,0.2,0.9]}"#,
    )
    .unwrap();
    (weights, graph)
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn generate_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let (w, g) = fixture(dir.path());
    let v = json(&segkv(&["generate", "--graph", s(&g), "--weights", s(&w), "--query", "why?", "--max-new", "4"]));
    assert_eq!(v["schema"], "segkv.generate.v1");
    assert_eq!(v["topology"], "graphkv");
    assert!(!v["output_tokens"].as_array().unwrap().is_empty());
    assert!(v["metrics"]["ttft_ns"].as_u64().unwrap() > 0);
}

#[test]
fn missing_input_exits_one() {
    let out = segkv(&["generate", "--graph", "/nope.json", "--weights", "/nope.gkvw", "--query", "q"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nope"));
    assert_eq!(segkv(&["generate"]).status.code(), Some(1));
    assert_eq!(segkv(&["--help"]).status.code(), Some(0));
}

#[test]
fn parallel_on_edges_warns() {
    let dir = tempfile::tempdir().unwrap();
    let (w, g) = fixture(dir.path());
    let out = segkv(&["generate", "--graph", s(&g), "--weights", s(&w), "--query", "q", "--topology", "parallel"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ignores the graph's 2 edges"));
}

#[test]
fn prefill_then_generate_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (w, g) = fixture(dir.path());
    let cache = dir.path().join("c.gkvc");
    let p = json(&segkv(&["prefill", "--graph", s(&g), "--weights", s(&w), "--out", s(&cache)]));
    // Three prefilled segments plus one update block for the target.
    assert_eq!(p["blocks"], 4);
    let base = ["generate", "--graph", s(&g), "--weights", s(&w), "--query", "and?", "--max-new", "5"];
    let fresh = json(&segkv(&base));
    let mut with_cache = base.to_vec();
    with_cache.extend(["--cache", s(&cache)]);
    let cached = json(&segkv(&with_cache));
    assert_eq!(cached["from_cache"], true);
    assert_eq!(cached["output_tokens"], fresh["output_tokens"]);

    // A cache written for one topology does not fit another.
    with_cache.extend(["--topology", "sequential"]);
    assert_eq!(segkv(&with_cache).status.code(), Some(1));
}

#[test]
fn build_graph_rewrites_edges() {
    let dir = tempfile::tempdir().unwrap();
    let (_, g) = fixture(dir.path());
    let v = json(&segkv(&["build-graph", "--graph", s(&g), "--m", "1"]));
    assert_eq!(v["edges"], serde_json::json!([[2, 0], [2, 1]]));
    let v = json(&segkv(&["build-graph", "--graph", s(&g), "--star", "0"]));
    assert_eq!(v["edges"], serde_json::json!([[1, 0], [2, 0]]));
}

#[test]
fn bench_csvs() {
    let mem = segkv(&["bench-memory", "--words", "20", "--neighbors", "1,2", "--measure"]);
    assert!(mem.status.success());
    let text = String::from_utf8(mem.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("schema,topology,neighbors"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.starts_with("segkv.memory.v1,")));
    // Heap peaks are recorded by the binary's counting allocator.
    assert!(rows.iter().all(|r| !r.split(',').nth(4).unwrap().is_empty()));

    let ttft = segkv(&["bench-ttft", "--words", "10", "--neighbors", "2", "--runs", "2"]);
    assert!(ttft.status.success());
    let text = String::from_utf8(ttft.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().skip(1).all(|r| r.starts_with("segkv.ttft.v1,")));
}

#[test]
fn init_weights_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    segkv(&["init-weights", "--out", s(&a)]);
    segkv(&["init-weights", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn verify_subset_writes_report() {
    let out = segkv(&["verify", "--only", "edgeless_equals_parallel,positional_span"]);
    let v = json(&out);
    assert_eq!(v["schema"], "segkv.verify.v1");
    assert_eq!(v["checks"].as_array().unwrap().len(), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("PASS edgeless_equals_parallel"));
    assert_eq!(segkv(&["verify", "--only", "nope"]).status.code(), Some(1));
}
