use std::path::Path;

use crate::adapters::{disel_backward, load_layers, lora_backward};
use crate::datagen::{make_retention_tasks, make_toy_instance, sample_population};
use crate::diagnostics::{
    depth_band_histograms, gate_summary, record_gates, Domain, GateSummary, GateTrace, HistogramSet,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check_disel_with, check_lora_with, GradCheckReport};
use crate::numkit::{RngStream, Vector};
use crate::oracle::{bayes_loss_mc, fixed_floor_loss, McEstimate, MixtureModel, Population};
use crate::trainer::{
    evaluate_populations, retention_experiment_logged, train_toy_with, EvalSets, MethodConfig,
    MethodKind, MetricLog, PopulationMse, RetentionOutcome, TinyMlp,
};

use super::config::{ExperimentConfig, GateSource, GatesSection, ToySection};

/// One pass/fail verdict of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Gate trace of one model over labelled domains, with its reductions.
#[derive(Debug, Clone)]
pub struct GateReport {
    pub trace: GateTrace,
    pub histograms: HistogramSet,
    pub summary: GateSummary,
}

impl GateReport {
    pub fn build(model: &TinyMlp, domains: &[(String, Vec<Vector>)], bins: usize) -> Result<Self> {
        let views: Vec<Domain<'_>> = domains.iter().map(|(t, x)| Domain::new(t, x)).collect();
        let trace = record_gates(model, &views)?;
        Ok(Self {
            histograms: depth_band_histograms(&trace, bins)?,
            summary: gate_summary(&trace)?,
            trace,
        })
    }

    /// Fraction of `domain`'s gate values strictly above `t` (or strictly
    /// below when `above` is false).
    pub fn fraction(&self, domain: &str, t: f64, above: bool) -> f64 {
        let vals: Vec<f64> = self
            .trace
            .records()
            .iter()
            .filter(|r| r.domain == domain)
            .map(|r| r.value)
            .collect();
        let hits = vals
            .iter()
            .filter(|&&v| if above { v > t } else { v < t })
            .count();
        hits as f64 / vals.len().max(1) as f64
    }
}

/// Inputs of one gate domain. Samples come from
/// `RngStream::new(seed, 0).named("gates").named(tag)`, so a report on a
/// saved checkpoint sees the inputs the training run recorded.
pub fn gate_domain_inputs(
    cfg: &ExperimentConfig,
    source: GateSource,
    tag: &str,
) -> Result<Vec<Vector>> {
    let root = RngStream::new(cfg.seed, 0);
    let stream = root.named("gates").named(tag);
    let n = cfg.gates.samples;
    match (source, tag) {
        (GateSource::ToyFigure1, "ft" | "pt") => {
            let mm = make_toy_instance(&cfg.toy.instance, cfg.toy.instance.rng())?;
            let pop = if tag == "ft" {
                Population::Ft
            } else {
                Population::Pt
            };
            let b = sample_population(&mm, pop, n, stream)?;
            Ok((0..b.len()).map(|i| b.x.row_vector(i)).collect())
        }
        (GateSource::MlpRetention, "task1" | "task2") => {
            let r = &cfg.retention;
            let (t1, t2) =
                make_retention_tasks(r.d, r.n_classes, r.separation, root.named("tasks"))?;
            let task = if tag == "task1" { t1 } else { t2 };
            let set = task.sample(n, stream);
            Ok((0..set.len()).map(|i| set.input(i)).collect())
        }
        _ => Err(Error::Config(format!(
            "unknown domain '{tag}' for {source:?} (expected one of {:?})",
            source.domains()
        ))),
    }
}

fn gate_domains(
    cfg: &ExperimentConfig,
    source: GateSource,
    tags: &[String],
) -> Result<Vec<(String, Vec<Vector>)>> {
    tags.iter()
        .map(|t| Ok((t.clone(), gate_domain_inputs(cfg, source, t)?)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ToyMethodResult {
    pub method: MethodConfig,
    pub model: TinyMlp,
    pub mse: PopulationMse,
}

#[derive(Debug, Clone)]
pub struct ToyFigure1 {
    pub instance: MixtureModel,
    /// `¼ Tr(M Σ Mᵀ)`, the per-population MSE of the best fixed correction.
    pub fixed_floor: f64,
    /// Monte Carlo Bayes risk, equal to the per-population Bayes MSE by
    /// symmetry of the instance.
    pub bayes_floor: McEstimate,
    pub runs: Vec<ToyMethodResult>,
    pub log: MetricLog,
    /// Gates of the DISeL run on `ft` and `pt` inputs, if one was trained.
    pub gates: Option<GateReport>,
}

/// Trains every configured method on the toy instance. All methods share
/// the stream `RngStream::new(seed, 0)` and one set of evaluation samples;
/// records reach `log` as they are produced.
pub fn run_toy_figure1(cfg: &ExperimentConfig, log: &mut MetricLog) -> Result<ToyFigure1> {
    let toy: &ToySection = &cfg.toy;
    let mm = make_toy_instance(&toy.instance, toy.instance.rng())?;
    let root = RngStream::new(cfg.seed, 0);
    let sets = EvalSets::draw(&mm, toy.train.eval_samples, root.named("eval"))?;
    let mut runs = Vec::new();
    for method in &toy.methods {
        let model = train_toy_with(method, &mm, &toy.train, root, &sets, log)?;
        let mse = evaluate_populations(&model, &sets)?;
        runs.push(ToyMethodResult {
            method: method.clone(),
            model,
            mse,
        });
    }
    let fixed_floor = fixed_floor_loss(mm.task_matrix(), &mm.second_moment(Population::Ft))?;
    let bayes_floor = bayes_loss_mc(&mm, toy.bayes_samples, root.named("bayes"))?;
    let gates = match runs.iter().find(|r| r.method.kind == MethodKind::Disel) {
        Some(run) => {
            let tags = GateSource::ToyFigure1.domains().map(String::from);
            let domains = gate_domains(cfg, GateSource::ToyFigure1, &tags)?;
            Some(GateReport::build(&run.model, &domains, cfg.gates.bins)?)
        }
        None => None,
    };
    Ok(ToyFigure1 {
        instance: mm,
        fixed_floor,
        bayes_floor,
        runs,
        log: log.clone(),
        gates,
    })
}

impl ToyFigure1 {
    pub fn run(&self, kind: MethodKind) -> Option<&ToyMethodResult> {
        self.runs.iter().find(|r| r.method.kind == kind)
    }

    /// Fixed methods sit within 10% of the fixed floor on both
    /// populations; DISeL lies below half of it and no lower than the
    /// Bayes floor minus three combined standard errors; its gates split
    /// the populations.
    pub fn checks(&self) -> Vec<Check> {
        let f = self.fixed_floor;
        let mut out = Vec::new();
        for kind in [MethodKind::FullFt, MethodKind::Lora] {
            if let Some(r) = self.run(kind) {
                let (a, b) = (r.mse.mse_ft, r.mse.mse_pt);
                let ok = (a - f).abs() <= 0.1 * f && (b - f).abs() <= 0.1 * f;
                out.push(Check::new(
                    &format!("{}_at_fixed_floor", kind.name()),
                    ok,
                    format!("mse_ft={a:.5} mse_pt={b:.5} floor={f:.5} (within 10%)"),
                ));
            }
        }
        if let Some(r) = self.run(MethodKind::Disel) {
            let worst = r.mse.mse_ft.max(r.mse.mse_pt);
            let se_worst = if r.mse.mse_ft >= r.mse.mse_pt {
                r.mse.se_ft
            } else {
                r.mse.se_pt
            };
            let se = (self.bayes_floor.stderr.powi(2) + se_worst.powi(2)).sqrt();
            let lower = self.bayes_floor.estimate - 3.0 * se;
            out.push(Check::new(
                "disel_below_half_floor",
                worst < 0.5 * f,
                format!("max_mse={worst:.5} < {:.5}", 0.5 * f),
            ));
            out.push(Check::new(
                "disel_above_bayes_floor",
                worst >= lower,
                format!(
                    "max_mse={worst:.5} >= bayes {:.5} - 3se = {lower:.5}",
                    self.bayes_floor.estimate
                ),
            ));
        }
        if let Some(g) = &self.gates {
            let ft = g.summary.domain_mean("ft").unwrap_or(f64::NAN);
            let pt = g.summary.domain_mean("pt").unwrap_or(f64::NAN);
            out.push(Check::new(
                "gate_mean_ft",
                ft > 0.8,
                format!("{ft:.4} > 0.8"),
            ));
            out.push(Check::new(
                "gate_mean_pt",
                pt < 0.2,
                format!("{pt:.4} < 0.2"),
            ));
            let hi = g.fraction("ft", 0.9, true);
            let lo = g.fraction("pt", 0.1, false);
            out.push(Check::new(
                "gate_ft_mass_above_0.9",
                hi >= 0.6,
                format!("{hi:.4} >= 0.6"),
            ));
            out.push(Check::new(
                "gate_pt_mass_below_0.1",
                lo >= 0.6,
                format!("{lo:.4} >= 0.6"),
            ));
        }
        out
    }
}

/// Runs the finite-difference suite over the configured adapter types.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    let rng = RngStream::new(cfg.seed, 0).named("gradcheck");
    let suite = &cfg.gradcheck.suite;
    let layers = cfg
        .gradcheck
        .layers
        .iter()
        .map(|k| match k {
            MethodKind::Disel => check_disel_with(suite, rng.named("disel"), &disel_backward),
            MethodKind::Lora => check_lora_with(suite, rng.named("lora"), &lora_backward),
            MethodKind::FullFt => Err(Error::Config(
                "gradcheck covers lora and disel layers only".into(),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { layers })
}

pub fn gradcheck_checks(report: &GradCheckReport) -> Vec<Check> {
    report
        .layers
        .iter()
        .flat_map(|l| {
            l.blocks.iter().map(move |b| {
                Check::new(
                    &format!("{}.{}", l.layer, b.block),
                    b.max_rel_error <= l.tolerance,
                    format!(
                        "max_rel_error={:.3e} over {} instances",
                        b.max_rel_error, l.instances
                    ),
                )
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MlpRetention {
    pub outcome: RetentionOutcome,
    /// Gates of the DISeL run on `task1` and `task2` inputs.
    pub gates: Option<GateReport>,
}

/// Pre-trains, adapts with every configured method and records DISeL gates.
pub fn run_mlp_retention(cfg: &ExperimentConfig, log: &mut MetricLog) -> Result<MlpRetention> {
    let outcome = retention_experiment_logged(&cfg.retention, RngStream::new(cfg.seed, 0), log)?;
    let gates = match outcome
        .runs
        .iter()
        .find(|r| r.method.kind == MethodKind::Disel)
    {
        Some(run) => {
            let tags = GateSource::MlpRetention.domains().map(String::from);
            let domains = gate_domains(cfg, GateSource::MlpRetention, &tags)?;
            Some(GateReport::build(&run.model, &domains, cfg.gates.bins)?)
        }
        None => None,
    };
    Ok(MlpRetention { outcome, gates })
}

/// Per-method retention figures of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionSummary {
    pub method: String,
    pub final_ft_accuracy: f64,
    pub final_retention: f64,
    /// Pre-trained task-1 accuracy minus final task-1 accuracy.
    pub final_drop: f64,
    /// Largest deviation of task-1 accuracy from its pre-trained value
    /// over all checkpoints.
    pub max_deviation: f64,
}

impl MlpRetention {
    pub fn summaries(&self) -> Vec<RetentionSummary> {
        let base = self.outcome.pretrain_accuracy;
        self.outcome
            .runs
            .iter()
            .filter_map(|run| {
                let last = run.log.records().last()?;
                let retention: Vec<f64> = run
                    .log
                    .records()
                    .iter()
                    .filter_map(|r| r.retention_accuracy)
                    .collect();
                Some(RetentionSummary {
                    method: run.method.name().into(),
                    final_ft_accuracy: last.ft_accuracy?,
                    final_retention: last.retention_accuracy?,
                    final_drop: base - last.retention_accuracy?,
                    max_deviation: retention
                        .iter()
                        .map(|a| (a - base).abs())
                        .fold(0.0, f64::max),
                })
            })
            .collect()
    }

    /// DISeL and LoRA reach matching task-2 accuracy, DISeL forgets less,
    /// and DISeL's task-1 curve never leaves a 2% band around the
    /// pre-trained value.
    pub fn checks(&self) -> Vec<Check> {
        let s = self.summaries();
        let find = |m: &str| s.iter().find(|r| r.method == m);
        let mut out = Vec::new();
        if let (Some(d), Some(l)) = (find("disel"), find("lora")) {
            let gap = (d.final_ft_accuracy - l.final_ft_accuracy).abs();
            out.push(Check::new(
                "ft_accuracy_matched",
                gap <= 0.02,
                format!(
                    "disel={:.4} lora={:.4} gap={gap:.4} <= 0.02",
                    d.final_ft_accuracy, l.final_ft_accuracy
                ),
            ));
            out.push(Check::new(
                "disel_forgets_less_than_lora",
                d.final_drop < l.final_drop,
                format!("drop disel={:.4} < lora={:.4}", d.final_drop, l.final_drop),
            ));
        }
        if let Some(d) = find("disel") {
            out.push(Check::new(
                "disel_retention_within_2pct",
                d.max_deviation <= 0.02,
                format!("max |acc - pretrained| = {:.4} <= 0.02", d.max_deviation),
            ));
        }
        if let Some(g) = &self.gates {
            let (a, b) = (
                g.summary.domain_mean("task2"),
                g.summary.domain_mean("task1"),
            );
            if let (Some(a), Some(b)) = (a, b) {
                out.push(Check::new(
                    "gates_open_on_task2",
                    a > b,
                    format!("task2={a:.4} > task1={b:.4}"),
                ));
            }
        }
        out
    }
}

/// Rebuilds a model from a checkpoint and records its gates over the
/// configured domains.
pub fn run_gates_report(cfg: &ExperimentConfig) -> Result<GateReport> {
    let gates: &GatesSection = &cfg.gates;
    let path = gates
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("gates-report: no checkpoint given".into()))?;
    let model = load_model(path, gates.source, cfg)?;
    let domains = gate_domains(cfg, gates.source, &gates.domains)?;
    GateReport::build(&model, &domains, gates.bins)
}

fn load_model(path: &Path, source: GateSource, cfg: &ExperimentConfig) -> Result<TinyMlp> {
    let model = TinyMlp::from_layers(load_layers(path)?)?;
    Ok(match source {
        GateSource::ToyFigure1 => model,
        GateSource::MlpRetention => model.with_activation(cfg.retention.activation),
    })
}
