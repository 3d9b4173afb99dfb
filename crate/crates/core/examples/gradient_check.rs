//! Central finite differences against the hand-written backward passes of
//! both adapter types, block by block.
//!
//! cargo run --release --example gradient_check

use disel::gradcheck::{run_suite, GradCheckConfig};
use disel::numkit::RngStream;

fn main() -> disel::Result<()> {
    let cfg = GradCheckConfig::default();
    let report = run_suite(&cfg, RngStream::new(0, 0))?;
    for layer in &report.layers {
        for b in &layer.blocks {
            println!(
                "{:<6} {:<4} entries={:<6} max_rel={:.2e} max_abs={:.2e}",
                layer.layer, b.block, b.entries_checked, b.max_rel_error, b.max_abs_error
            );
        }
    }
    println!(
        "tolerance {:.0e}: {}",
        cfg.tolerance,
        if report.passed() { "passed" } else { "FAILED" }
    );
    Ok(())
}
