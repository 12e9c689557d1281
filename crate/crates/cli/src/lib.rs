//! The `segkv` command-line tool: generation, prefill, benchmarks and the
//! verification suite.

pub mod alloc;
pub mod args;
pub mod bench;
pub mod checks;
pub mod commands;
pub mod error;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, VerifyArgs};
use bench::{MemorySweep, TtftSweep};
use commands::{emit, to_json};
use error::{io_err, CliError, CliResult};

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn dispatch(command: Command) -> CliResult<u8> {
    let mut stderr = std::io::stderr();
    match command {
        Command::Generate(a) => {
            let report = commands::run_generate(&a, &mut stderr)?;
            emit(a.out.as_deref(), &to_json(&report))?;
        }
        Command::Prefill(a) => {
            let report = commands::run_prefill(&a, &mut stderr)?;
            println!("{}", to_json(&report).trim_end());
        }
        Command::BenchMemory(a) => {
            let seed = commands::seed()?;
            let model = bench::bench_model(a.weights.as_deref(), seed)?;
            if a.measure && !alloc::is_active() {
                let _ = writeln!(stderr, "warning: heap counter not installed; peak_bytes left empty");
            }
            let rows = bench::bench_memory(
                &model,
                &MemorySweep {
                    words: a.words,
                    neighbors: a.neighbors,
                    topologies: a.topologies,
                    budget_tokens: a.budget_tokens,
                    measure: a.measure,
                    query: a.query,
                    seed,
                },
            )?;
            emit(a.out.as_deref(), &bench::to_csv(bench::MEMORY_HEADER, &rows)?)?;
        }
        Command::BenchTtft(a) => {
            let seed = commands::seed()?;
            let model = bench::bench_model(a.weights.as_deref(), seed)?;
            let sweep = TtftSweep {
                words: a.words,
                neighbors: a.neighbors,
                runs: a.runs,
                variants: a.variants,
                workers: a.workers,
                query: a.query,
                seed,
            };
            let rows = match &a.cache_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                    bench::bench_ttft(&model, &sweep, dir)?
                }
                None => {
                    let tmp = tempfile::tempdir().map_err(|e| CliError::Internal(format!("temp dir: {e}")))?;
                    bench::bench_ttft(&model, &sweep, tmp.path())?
                }
            };
            emit(a.out.as_deref(), &bench::to_csv(bench::TTFT_HEADER, &rows)?)?;
        }
        Command::Verify(a) => return verify(&a),
        Command::BuildGraph(a) => {
            let file = commands::run_build_graph(&a)?;
            let text = serde_json::to_string_pretty(&file).map_err(|e| CliError::Internal(e.to_string()))? + "\n";
            emit(a.out.as_deref(), &text)?;
        }
        Command::InitWeights(a) => {
            let hash = commands::run_init_weights(&a, commands::seed()?)?;
            println!("{} model_hash={hash:016x}", a.out.display());
        }
    }
    Ok(0)
}

fn verify(a: &VerifyArgs) -> CliResult<u8> {
    let all = checks::registry();
    for name in &a.only {
        if !all.iter().any(|c| c.name == name) {
            let known: Vec<_> = all.iter().map(|c| c.name).collect();
            return Err(CliError::input(format!("unknown check {name:?}; known: {}", known.join(", "))));
        }
    }
    let selected: Vec<_> = all
        .into_iter()
        .filter(|c| {
            if a.only.is_empty() {
                a.with_ttft || !c.timing
            } else {
                a.only.iter().any(|n| n == c.name)
            }
        })
        .collect();
    let scratch = tempfile::tempdir().map_err(|e| CliError::Internal(format!("temp dir: {e}")))?;
    let ctx = checks::CheckContext {
        seed: commands::seed()?,
        scratch: scratch.path().to_path_buf(),
    };
    let report = checks::run_all(&selected, &ctx, |line| eprintln!("{line}"));
    emit(a.out.as_deref(), &to_json(&report))?;
    Ok(if report.passed { 0 } else { 2 })
}
