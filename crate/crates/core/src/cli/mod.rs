//! Config-driven experiment runner behind the `disel` binary: one
//! timestamped directory per run holding the expanded config, the metric
//! log, every CSV artifact and a manifest.

mod config;
mod experiments;

#[cfg(test)]
mod tests;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adapters::save_layers;
use crate::datagen::csv_err;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckReport;
use crate::trainer::MetricLog;

pub use config::{
    ExperimentConfig, ExperimentKind, GateSource, GatesSection, GradcheckSection, ToySection,
};
pub use experiments::{
    gate_domain_inputs, gradcheck_checks, run_gates_report, run_gradcheck, run_mlp_retention,
    run_toy_figure1, Check, GateReport, MlpRetention, RetentionSummary, ToyFigure1,
    ToyMethodResult,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_CHECKS_FAILED: u8 = 4;

/// Process exit code of an error: 2 for config and usage errors, 3 for
/// numerical failures, 1 for I/O and format errors.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Numeric(_) | Error::Diverged { .. } => EXIT_NUMERIC,
        Error::Io(_) | Error::Json(_) | Error::Format(_) => EXIT_OTHER,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "disel",
    version,
    about = "Input-gated low-rank adapter experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train FullFT, LoRA and DISeL on the toy mixture and compare with the floors.
    ToyFigure1(RunArgs),
    /// Finite-difference check of the adapter backward passes.
    Gradcheck(RunArgs),
    /// Pre-train an MLP on task 1, adapt to task 2, track task-1 accuracy.
    MlpRetention(RunArgs),
    /// Gate histograms and summaries of a saved DISeL checkpoint.
    GatesReport(GatesArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML file laid over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to these methods, in order (fullft, lora, disel).
    #[arg(long = "method")]
    methods: Vec<String>,
}

#[derive(Debug, Args)]
struct GatesArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Domains to record, replacing the configured list.
    #[arg(long = "domain")]
    domains: Vec<String>,
}

fn build_config(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.kind = kind;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    cfg.select_methods(&args.methods)?;
    Ok(cfg)
}

/// Entry point of the binary.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    let cfg = match cli.command {
        Command::ToyFigure1(a) => build_config(ExperimentKind::ToyFigure1, &a),
        Command::Gradcheck(a) => build_config(ExperimentKind::Gradcheck, &a),
        Command::MlpRetention(a) => build_config(ExperimentKind::MlpRetention, &a),
        Command::GatesReport(g) => {
            build_config(ExperimentKind::GatesReport, &g.run).map(|mut cfg| {
                if let Some(c) = g.checkpoint {
                    cfg.gates.checkpoint = Some(c);
                }
                if !g.domains.is_empty() {
                    cfg.gates.domains = g.domains;
                }
                cfg
            })
        }
    };
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match run_experiment(&cfg) {
        Ok(summary) => {
            for c in &summary.checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            println!("run directory: {}", summary.dir.display());
            ExitCode::from(if summary.passed() {
                EXIT_OK
            } else {
                EXIT_CHECKS_FAILED
            })
        }
        Err(f) => {
            eprintln!("error: {}", f.error);
            if let Some(d) = &f.dir {
                eprintln!(
                    "diagnostic written to {}",
                    d.join("diagnostic.json").display()
                );
            }
            ExitCode::from(exit_code(&f.error))
        }
    }
}

/// A finished run: its directory and the verdicts it printed.
#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub checks: Vec<Check>,
}

impl RunSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A failed run; `dir` is set once the run directory exists, and then
/// holds `diagnostic.json` and the partial metric log.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub dir: Option<PathBuf>,
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        Self { error, dir: None }
    }
}

/// An output directory that is never reused, and the files written to it.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    /// Creates `<parent>/<prefix>-<local time>`, appending `-2`, `-3`, …
    /// when that name is taken.
    pub fn create(parent: &Path, prefix: &str) -> Result<Self> {
        fs::create_dir_all(parent)?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{prefix}-{stamp}");
        for k in 1.. {
            let name = if k == 1 {
                base.clone()
            } else {
                format!("{base}-{k}")
            };
            let path = parent.join(name);
            match fs::create_dir(&path) {
                Ok(()) => {
                    return Ok(Self {
                        path,
                        artifacts: Vec::new(),
                    })
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            }
        }
        unreachable!("unbounded suffix search")
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn artifacts(&self) -> &[String] {
        &self.artifacts
    }

    /// Writes `name` (a path relative to the run directory) through a
    /// buffered writer and records it as an artifact.
    pub fn write(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut dyn Write) -> Result<()>,
    ) -> Result<()> {
        let path = self.path.join(name);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.artifacts.push(name.into());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    fn write_log(&mut self, log: &MetricLog) -> Result<()> {
        self.write("metrics.jsonl", |w| log.write_jsonl(w))?;
        self.write("metrics.csv", |w| log.write_csv(w))
    }

    fn write_gates(&mut self, g: &GateReport) -> Result<()> {
        self.write("gate_histograms.csv", |w| g.histograms.write_csv(w))?;
        self.write("gate_summary.csv", |w| g.summary.write_gates_csv(w))?;
        self.write("gate_domains.csv", |w| g.summary.write_domains_csv(w))?;
        self.write("gate_trace.csv", |w| g.trace.write_csv(w))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'static str,
    version: &'static str,
    kind: ExperimentKind,
    seed: u64,
    status: &'a str,
    artifacts: &'a [String],
}

#[derive(Serialize)]
struct Diagnostic {
    error: String,
    method: Option<String>,
    step: Option<u64>,
    loss: Option<f64>,
}

fn write_manifest(dir: &mut RunDir, cfg: &ExperimentConfig, status: &str) -> Result<()> {
    let mut artifacts = dir.artifacts.clone();
    artifacts.push("manifest.json".into());
    let m = Manifest {
        name: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        kind: cfg.kind,
        seed: cfg.seed,
        status,
        artifacts: &artifacts,
    };
    dir.write_json("manifest.json", &m)
}

/// The config written next to a training run: gate reports read from it
/// find the run's DISeL checkpoint and domains.
fn saved_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut saved = cfg.clone();
    let source = match cfg.kind {
        ExperimentKind::ToyFigure1 => Some(GateSource::ToyFigure1),
        ExperimentKind::MlpRetention => Some(GateSource::MlpRetention),
        _ => None,
    };
    if let Some(source) = source {
        saved.gates.source = source;
        saved.gates.domains = source.domains().map(String::from).to_vec();
        let has_disel = cfg
            .methods()
            .iter()
            .any(|m| m.kind == crate::trainer::MethodKind::Disel);
        saved.gates.checkpoint = has_disel.then(|| PathBuf::from("checkpoints/disel.ckpt"));
    }
    saved
}

/// Validates `cfg`, creates its run directory and runs it to completion.
pub fn run_experiment(cfg: &ExperimentConfig) -> std::result::Result<RunSummary, RunFailure> {
    cfg.validate()?;
    let mut dir = RunDir::create(&cfg.out, cfg.kind.as_str())?;
    let text = saved_config(cfg).to_toml_string()?;
    let written = dir.write("config.toml", |w| Ok(w.write_all(text.as_bytes())?));
    let mut log = MetricLog::new();
    let result = written.and_then(|()| execute(cfg, &mut dir, &mut log));
    match result {
        Ok(checks) => {
            let status = if checks.iter().all(|c| c.passed) {
                "passed"
            } else {
                "checks-failed"
            };
            let path = dir.path.clone();
            write_manifest(&mut dir, cfg, status).map_err(|e| RunFailure {
                error: e,
                dir: Some(path.clone()),
            })?;
            Ok(RunSummary { dir: path, checks })
        }
        Err(error) => {
            let path = dir.path.clone();
            // best effort: the original error is what gets reported
            let _ = write_failure(&mut dir, cfg, &log, &error);
            Err(RunFailure {
                error,
                dir: Some(path),
            })
        }
    }
}

fn write_failure(
    dir: &mut RunDir,
    cfg: &ExperimentConfig,
    log: &MetricLog,
    error: &Error,
) -> Result<()> {
    let (method, step, loss) = match error {
        Error::Diverged { method, step, loss } => (Some(method.clone()), Some(*step), Some(*loss)),
        _ => (None, None, None),
    };
    let diag = Diagnostic {
        error: error.to_string(),
        method,
        step,
        loss,
    };
    if !log.records().is_empty() {
        dir.write_log(log)?;
    }
    dir.write_json("diagnostic.json", &diag)?;
    let status = if matches!(error, Error::Diverged { .. }) {
        "diverged"
    } else {
        "failed"
    };
    write_manifest(dir, cfg, status)
}

fn execute(cfg: &ExperimentConfig, dir: &mut RunDir, log: &mut MetricLog) -> Result<Vec<Check>> {
    match cfg.kind {
        ExperimentKind::ToyFigure1 => {
            let res = run_toy_figure1(cfg, log)?;
            write_toy(dir, &res)?;
            Ok(res.checks())
        }
        ExperimentKind::Gradcheck => {
            let report = run_gradcheck(cfg)?;
            write_gradcheck(dir, &report)?;
            Ok(gradcheck_checks(&report))
        }
        ExperimentKind::MlpRetention => {
            let res = run_mlp_retention(cfg, log)?;
            write_retention(dir, &res)?;
            Ok(res.checks())
        }
        ExperimentKind::GatesReport => {
            let report = run_gates_report(cfg)?;
            dir.write_gates(&report)?;
            Ok(Vec::new())
        }
    }
}

fn csv_writer(w: &mut dyn Write) -> csv::Writer<&mut dyn Write> {
    csv::Writer::from_writer(w)
}

fn write_toy(dir: &mut RunDir, res: &ToyFigure1) -> Result<()> {
    dir.write_log(&res.log)?;
    dir.write("results.csv", |w| {
        let mut out = csv_writer(w);
        out.write_record(["method", "rank", "mse_ft", "se_ft", "mse_pt", "se_pt"])
            .map_err(csv_err)?;
        for r in &res.runs {
            let rank = match r.method.kind {
                crate::trainer::MethodKind::FullFt => String::new(),
                _ => r.method.rank.to_string(),
            };
            out.write_record([
                r.method.name().to_string(),
                rank,
                r.mse.mse_ft.to_string(),
                r.mse.se_ft.to_string(),
                r.mse.mse_pt.to_string(),
                r.mse.se_pt.to_string(),
            ])
            .map_err(csv_err)?;
        }
        Ok(out.flush()?)
    })?;
    dir.write("floors.csv", |w| {
        let mut out = csv_writer(w);
        out.write_record(["floor", "value", "stderr"])
            .map_err(csv_err)?;
        out.write_record(["fixed", &res.fixed_floor.to_string(), "0"])
            .map_err(csv_err)?;
        out.write_record([
            "bayes",
            &res.bayes_floor.estimate.to_string(),
            &res.bayes_floor.stderr.to_string(),
        ])
        .map_err(csv_err)?;
        Ok(out.flush()?)
    })?;
    if let Some(g) = &res.gates {
        dir.write_gates(g)?;
    }
    for r in &res.runs {
        save_checkpoint(dir, r.method.name(), r.model.layers())?;
    }
    Ok(())
}

fn save_checkpoint(
    dir: &mut RunDir,
    name: &str,
    layers: &[crate::adapters::AdaptedLinear],
) -> Result<()> {
    let rel = format!("checkpoints/{name}.ckpt");
    let path = dir.path.join(&rel);
    fs::create_dir_all(path.parent().expect("has parent"))?;
    save_layers(&path, layers)?;
    dir.artifacts.push(rel);
    Ok(())
}

fn write_gradcheck(dir: &mut RunDir, report: &GradCheckReport) -> Result<()> {
    dir.write("gradcheck.csv", |w| {
        let mut out = csv_writer(w);
        out.write_record([
            "layer",
            "block",
            "instances",
            "entries_checked",
            "max_rel_error",
            "max_abs_error",
            "tolerance",
            "passed",
        ])
        .map_err(csv_err)?;
        for l in &report.layers {
            for b in &l.blocks {
                out.write_record([
                    l.layer.clone(),
                    b.block.clone(),
                    l.instances.to_string(),
                    b.entries_checked.to_string(),
                    b.max_rel_error.to_string(),
                    b.max_abs_error.to_string(),
                    l.tolerance.to_string(),
                    (b.max_rel_error <= l.tolerance).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        Ok(out.flush()?)
    })
}

fn write_retention(dir: &mut RunDir, res: &MlpRetention) -> Result<()> {
    dir.write_log(&res.outcome.log)?;
    dir.write("retention_summary.csv", |w| {
        let mut out = csv_writer(w);
        out.write_record([
            "method",
            "pretrain_accuracy",
            "final_ft_accuracy",
            "final_retention",
            "final_drop",
            "max_deviation",
        ])
        .map_err(csv_err)?;
        for s in res.summaries() {
            out.write_record([
                s.method.clone(),
                res.outcome.pretrain_accuracy.to_string(),
                s.final_ft_accuracy.to_string(),
                s.final_retention.to_string(),
                s.final_drop.to_string(),
                s.max_deviation.to_string(),
            ])
            .map_err(csv_err)?;
        }
        Ok(out.flush()?)
    })?;
    if let Some(g) = &res.gates {
        dir.write_gates(g)?;
    }
    save_checkpoint(dir, "pretrained", res.outcome.pretrained.layers())?;
    for r in &res.outcome.runs {
        save_checkpoint(dir, r.method.name(), r.model.layers())?;
    }
    Ok(())
}
