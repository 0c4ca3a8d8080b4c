//! Acceptance criteria A1-A9, one PASS/FAIL line each.
//!
//! Positional arguments select criteria (`cargo test --test acceptance -- A4 A6`).
//! With `DLOW_ACCEPTANCE_CACHE=<dir>` trained flow models are saved there and
//! reused by later runs with the same settings.

use std::path::Path;
use std::time::Instant;

use dlow_core::repro::{run_suite, SuiteOptions, ALL_CRITERIA};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let selected: Vec<&str> = if args.is_empty() {
        ALL_CRITERIA.to_vec()
    } else {
        ALL_CRITERIA
            .into_iter()
            .filter(|id| args.iter().any(|a| a == id))
            .collect()
    };
    let options = SuiteOptions {
        cache: std::env::var_os("DLOW_ACCEPTANCE_CACHE").map(Into::into),
        golden: Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/service_translate.sha256"),
        update_golden: std::env::var_os("DLOW_UPDATE_GOLDEN").is_some(),
    };
    let start = Instant::now();
    let results = run_suite(
        &selected,
        &options,
        |msg| eprintln!("[{:>7.1} s] {msg}", start.elapsed().as_secs_f64()),
        |r| println!("{}", r.line()),
    );
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "acceptance: {} passed, {failed} failed ({:.1} s)",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
