//! Trains full fine-tuning, LoRA and DISeL on the toy mixture and prints
//! per-population errors against the fixed and Bayes floors.
//!
//! cargo run --release --example toy_figure1 [steps]

use disel::cli::{run_toy_figure1, ExperimentConfig};
use disel::trainer::MetricLog;

fn main() -> disel::Result<()> {
    let mut cfg = ExperimentConfig::default();
    if let Some(steps) = std::env::args().nth(1) {
        cfg.toy.train.steps = steps
            .parse()
            .map_err(|e| disel::Error::Config(format!("steps: {e}")))?;
    }
    cfg.toy.train.eval_samples = 10_000;
    let res = run_toy_figure1(&cfg, &mut MetricLog::new())?;

    println!("fixed floor {:.4}", res.fixed_floor);
    println!(
        "bayes floor {:.3e} ± {:.1e}",
        res.bayes_floor.estimate, res.bayes_floor.stderr
    );
    println!("{:<8} {:>12} {:>12}", "method", "mse_ft", "mse_pt");
    for r in &res.runs {
        println!(
            "{:<8} {:>12.5} {:>12.5}",
            r.method.name(),
            r.mse.mse_ft,
            r.mse.mse_pt
        );
    }
    for c in res.checks() {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(())
}
