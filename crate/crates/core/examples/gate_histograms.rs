//! Records the gates of a DISeL network on two input domains and reduces
//! them to depth-band histograms and per-gate summaries, written as CSV to
//! standard output.
//!
//! cargo run --release --example gate_histograms

use std::io::stdout;

use disel::datagen::make_retention_tasks;
use disel::diagnostics::{depth_band_histograms, gate_summary, record_gates, Band, Domain};
use disel::numkit::{RngStream, Vector};
use disel::trainer::{MethodConfig, TinyMlp};

fn main() -> disel::Result<()> {
    let rng = RngStream::new(3, 0);
    let (t1, t2) = make_retention_tasks(16, 4, 12.0, rng.named("tasks"))?;
    let mut net = TinyMlp::dense(&[16, 32, 32, 32, 4], rng.named("net"))?;
    net.attach(
        &MethodConfig::disel(4),
        &[0, 1, 2, 3],
        rng.named("adapters"),
    )?;

    let sample = |task: &disel::datagen::ClassificationTask, tag: &str| -> Vec<Vector> {
        let set = task.sample(500, rng.named(tag));
        (0..set.len()).map(|i| set.input(i)).collect()
    };
    let (a, b) = (sample(&t1, "a"), sample(&t2, "b"));
    let trace = record_gates(&net, &[Domain::new("task1", &a), Domain::new("task2", &b)])?;
    let hist = depth_band_histograms(&trace, 10)?;
    for band in Band::ALL {
        eprintln!(
            "{:<5} layers {:?}",
            band.as_str(),
            hist.bands[band as usize]
        );
    }
    hist.write_csv(stdout().lock())?;
    gate_summary(&trace)?.write_domains_csv(stdout().lock())?;
    Ok(())
}
