//! Finite-difference gradient check of the full model on one 5-node graph.
//!
//! Usage: `cargo run --release --example gradient_check [seed]`

use std::time::Instant;

use dcgcn::diff::FD_STEP;
use dcgcn::model::{gradient_fixture, gradient_fixture_check};

fn main() -> dcgcn::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let (mut model, examples) = gradient_fixture(seed)?;
    println!(
        "{} extended Levi nodes, {} target tokens, {} parameters",
        examples[0].graph.node_count(),
        examples[0].target.len(),
        model.params().num_scalars()
    );
    let margin = model.kink_margin(&examples)?;
    println!("closest ReLU input to its kink: {margin:.2e} (step {FD_STEP:e})");
    let start = Instant::now();
    let report = gradient_fixture_check(&mut model, &examples, 1e-4, seed)?;
    println!(
        "{} entries, max relative error {:.3e}, {:.1}s",
        report.entries.len(),
        report.max_rel_error(),
        start.elapsed().as_secs_f64()
    );
    for f in report.failures().take(10) {
        println!("  {} [{}]: analytic {:.6e} numeric {:.6e}", f.param, f.index, f.analytic, f.numeric);
    }
    println!("{}", if report.passed() { "PASS tolerance=1e-4" } else { "FAIL" });
    Ok(())
}
