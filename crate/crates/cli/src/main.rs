use std::process::ExitCode;

use segkv_cli::alloc::{self, CountingAlloc};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() -> ExitCode {
    alloc::activate();
    segkv_cli::run(std::env::args_os())
}
