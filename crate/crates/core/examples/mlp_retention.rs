//! Pre-trains a small MLP on task 1, adapts it to task 2 with each method
//! and prints task-1 accuracy at every checkpoint.
//!
//! cargo run --release --example mlp_retention [seed]

use disel::numkit::RngStream;
use disel::trainer::{retention_experiment, RetentionConfig};

fn main() -> disel::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let cfg = RetentionConfig::default();
    let out = retention_experiment(&cfg, RngStream::new(seed, 0))?;
    println!("pre-trained task-1 accuracy {:.4}", out.pretrain_accuracy);
    for run in &out.runs {
        let curve: Vec<String> = run
            .log
            .records()
            .iter()
            .filter_map(|r| r.retention_accuracy)
            .map(|a| format!("{a:.2}"))
            .collect();
        let last = run.log.records().last().expect("at least one checkpoint");
        println!(
            "{:<7} task-2 acc {:.4}  task-1 curve [{}]",
            run.method.name(),
            last.ft_accuracy.unwrap_or(f64::NAN),
            curve.join(" ")
        );
    }
    Ok(())
}
