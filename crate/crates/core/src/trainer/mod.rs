//! Training loops for full fine-tuning, LoRA and DISeL on the toy
//! regression problem and on a small MLP retention task, with per-population
//! evaluation at evenly spaced checkpoints.

mod metrics;
mod network;
mod retention;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

pub use metrics::{MetricLog, MetricRecord, METRIC_SCHEMA_VERSION};
pub use network::{Activation, ForwardTrace, GroupRates, LayerGrads, NetGrads, TinyMlp, TrainMask};
pub use retention::{
    accuracy, pretrain, retention_experiment, retention_experiment_logged, MethodRun,
    RetentionConfig, RetentionOutcome,
};

use crate::adapters::{AdaptedLinear, FrozenLinear};
use crate::datagen::{sample_batch_noisy, sample_population, Batch};
use crate::error::{invalid, Error, Result};
use crate::numkit::{RngStream, Vector};
use crate::optim::{adamw_step, clip_factor, cosine_warmup_lr, sgd_step, AdamWConfig, AdamWState};
use crate::oracle::{McEstimate, MixtureModel, Population};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "fullft")]
    FullFt,
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "disel")]
    Disel,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::FullFt => "fullft",
            MethodKind::Lora => "lora",
            MethodKind::Disel => "disel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fullft" | "full-ft" | "full_ft" => Ok(MethodKind::FullFt),
            "lora" => Ok(MethodKind::Lora),
            "disel" => Ok(MethodKind::Disel),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected fullft, lora or disel)"
            ))),
        }
    }
}

/// A method and its own hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Defaults to `rank`, i.e. unit scale `alpha / r`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_gate_bias")]
    pub gate_bias_init: f64,
    /// Gate learning rate as a multiple of the adapter learning rate.
    #[serde(default = "default_gate_ratio")]
    pub gate_lr_ratio: f64,
}

fn default_rank() -> usize {
    2
}
fn default_gate_bias() -> f64 {
    -3.0
}
fn default_gate_ratio() -> f64 {
    5.0
}

impl MethodConfig {
    pub fn new(kind: MethodKind, rank: usize) -> Self {
        Self {
            kind,
            rank,
            alpha: None,
            gate_bias_init: default_gate_bias(),
            gate_lr_ratio: default_gate_ratio(),
        }
    }

    pub fn full_ft() -> Self {
        Self::new(MethodKind::FullFt, default_rank())
    }
    pub fn lora(rank: usize) -> Self {
        Self::new(MethodKind::Lora, rank)
    }
    pub fn disel(rank: usize) -> Self {
        Self::new(MethodKind::Disel, rank)
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != MethodKind::FullFt && self.rank == 0 {
            return Err(Error::Config(format!(
                "{}: rank must be at least 1",
                self.name()
            )));
        }
        if !(self.gate_lr_ratio >= 0.0 && self.gate_lr_ratio.is_finite()) {
            return Err(Error::Config(
                "gate_lr_ratio must be finite and non-negative".into(),
            ));
        }
        if !self.gate_bias_init.is_finite() || !self.alpha().is_finite() {
            return Err(Error::Config(
                "gate_bias_init and alpha must be finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub warmup_ratio: f64,
    /// Global gradient-norm clip; `None` disables clipping and is written
    /// as `0` in config files.
    #[serde(with = "clip_norm")]
    pub max_grad_norm: Option<f64>,
    pub adamw: AdamWConfig,
}

mod clip_norm {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.01,
            schedule: ScheduleKind::Cosine,
            warmup_ratio: 0.02,
            max_grad_norm: Some(1.0),
            adamw: AdamWConfig::default(),
        }
    }
}

impl OptimConfig {
    /// Gradient descent at a fixed rate without decay or clipping, under
    /// the cosine schedule.
    pub fn sgd(lr: f64) -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr,
            weight_decay: 0.0,
            max_grad_norm: None,
            ..Self::default()
        }
    }

    pub fn lr_scale(&self, step: u64, total: u64) -> Result<f64> {
        match self.schedule {
            ScheduleKind::Constant => Ok(1.0),
            ScheduleKind::Cosine => cosine_warmup_lr(step, total, self.warmup_ratio, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(
                "weight_decay must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("max_grad_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Evaluation points besides step 0, spread evenly up to `steps`.
    pub checkpoints: usize,
    /// Held-out samples per population (or task).
    pub eval_samples: usize,
    /// Standard deviation of target noise; toy runs only.
    pub noise_std: f64,
}

impl Default for TrainConfig {
    /// Toy-regression defaults.
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            optim: OptimConfig::sgd(0.01),
            checkpoints: 16,
            eval_samples: 50_000,
            noise_std: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(
                "noise_std must be finite and non-negative".into(),
            ));
        }
        self.optim.validate()
    }
}

/// Step 0 plus `n` evenly spaced steps ending at `total`, deduplicated.
pub fn checkpoint_steps(total: u64, n: usize) -> Vec<u64> {
    let mut steps = vec![0];
    for k in 1..=n as u64 {
        let s = (k * total + n as u64 / 2) / n as u64;
        if s > *steps.last().expect("non-empty") {
            steps.push(s);
        }
    }
    steps
}

enum Targets<'a> {
    Regression(&'a [Vector]),
    Classes(&'a [usize]),
}

/// Mean loss over a batch and its gradient with respect to each output.
fn loss_and_grad(outputs: &[Vector], targets: &Targets) -> (f64, Vec<Vector>) {
    let n = outputs.len() as f64;
    match targets {
        Targets::Regression(t) => {
            let mut loss = 0.0;
            let grads = outputs
                .iter()
                .zip(t.iter())
                .map(|(y, t)| {
                    let e: Vector = y.iter().zip(t.iter()).map(|(a, b)| a - b).collect();
                    loss += e.norm_sq();
                    e.scaled(2.0 / n)
                })
                .collect();
            (loss / n, grads)
        }
        Targets::Classes(labels) => {
            let mut loss = 0.0;
            let grads = outputs
                .iter()
                .zip(labels.iter())
                .map(|(logits, &k)| {
                    let (lse, p) = softmax(logits);
                    loss += lse - logits[k];
                    let mut g = p.scaled(1.0 / n);
                    g[k] -= 1.0 / n;
                    g
                })
                .collect();
            (loss / n, grads)
        }
    }
}

/// Log-sum-exp and softmax probabilities.
pub(crate) fn softmax(logits: &Vector) -> (f64, Vector) {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vector = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln(), e.scaled(1.0 / s))
}

pub(crate) fn cross_entropy(net: &TinyMlp, inputs: &[Vector], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &k) in inputs.iter().zip(labels) {
        let logits = net.forward(x)?;
        total += softmax(&logits).0 - logits[k];
    }
    Ok(total / inputs.len() as f64)
}

struct Optimizer {
    kind: OptimizerKind,
    adamw: AdamWConfig,
    state: AdamWState,
}

/// Runs the shared training loop; `evaluate` is called at every checkpoint
/// with `(model, step, lr, gate_lr)` and its records are appended to `log`.
#[allow(clippy::too_many_arguments)]
fn run_loop(
    net: &mut TinyMlp,
    mask: &TrainMask,
    method_name: &str,
    gate_lr_ratio: f64,
    cfg: &TrainConfig,
    mut batch: impl FnMut(u64) -> Result<(Vec<Vector>, Vec<Vector>, Vec<usize>)>,
    classification: bool,
    mut evaluate: impl FnMut(&TinyMlp, u64, f64, f64) -> Result<MetricRecord>,
    log: &mut MetricLog,
) -> Result<()> {
    cfg.validate()?;
    let checkpoints = checkpoint_steps(cfg.steps, cfg.checkpoints);
    let mut next_ckpt = 0;
    let mut opt = Optimizer {
        kind: cfg.optim.optimizer,
        adamw: cfg.optim.adamw,
        state: AdamWState::default(),
    };
    for step in 0..=cfg.steps {
        let scale = cfg.optim.lr_scale(step, cfg.steps.max(1))?;
        let lr = cfg.optim.lr * scale;
        if next_ckpt < checkpoints.len() && checkpoints[next_ckpt] == step {
            log.push(evaluate(net, step, lr, lr * gate_lr_ratio)?)?;
            next_ckpt += 1;
        }
        if step == cfg.steps {
            break;
        }
        let (inputs, reg_targets, labels) = batch(step)?;
        let mut grads = net.zero_grads(mask)?;
        let mut traces = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());
        for x in &inputs {
            let (y, t) = net.forward_cached(x)?;
            outputs.push(y);
            traces.push(t);
        }
        let targets = if classification {
            Targets::Classes(&labels)
        } else {
            Targets::Regression(&reg_targets)
        };
        let (loss, dys) = loss_and_grad(&outputs, &targets);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                method: method_name.to_string(),
                step,
                loss,
            });
        }
        for (t, dy) in traces.iter().zip(&dys) {
            net.backward(t, dy, &mut grads)?;
        }
        if let Some(max) = cfg.optim.max_grad_norm {
            let f = clip_factor(grads.norm(), max);
            if f < 1.0 {
                grads.scale(f);
            }
        }
        let rates = GroupRates {
            lr: cfg.optim.lr,
            gate_lr: cfg.optim.lr * gate_lr_ratio,
            weight_decay: cfg.optim.weight_decay,
        };
        let grad_groups = grads.groups();
        let mut groups = net.param_groups(mask, rates)?;
        let result = match opt.kind {
            OptimizerKind::Sgd => sgd_step(&mut groups, &grad_groups, scale),
            OptimizerKind::AdamW => {
                adamw_step(&mut groups, &grad_groups, &mut opt.state, &opt.adamw, scale)
            }
        };
        result.map_err(|e| match e {
            Error::Numeric(msg) => Error::Diverged {
                method: format!("{method_name} ({msg})"),
                step,
                loss,
            },
            other => other,
        })?;
    }
    Ok(())
}

/// Per-population mean squared error of the full prediction, with standard
/// errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationMse {
    pub mse_ft: f64,
    pub se_ft: f64,
    pub mse_pt: f64,
    pub se_pt: f64,
}

/// Held-out samples of each population, drawn once and reused.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSets {
    pub ft: Batch,
    pub pt: Batch,
}

impl EvalSets {
    pub fn draw(mm: &MixtureModel, n: usize, rng: RngStream) -> Result<Self> {
        Ok(Self {
            ft: sample_population(mm, Population::Ft, n, rng.named("ft"))?,
            pt: sample_population(mm, Population::Pt, n, rng.named("pt"))?,
        })
    }
}

fn batch_errors(model: &TinyMlp, batch: &Batch) -> Result<Vec<f64>> {
    (0..batch.len())
        .map(|i| {
            let y = model.forward(&batch.x.row_vector(i))?;
            Ok(y.iter()
                .zip(batch.y.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum())
        })
        .collect()
}

pub fn evaluate_populations(model: &TinyMlp, sets: &EvalSets) -> Result<PopulationMse> {
    let ft = McEstimate::from_samples(&batch_errors(model, &sets.ft)?);
    let pt = McEstimate::from_samples(&batch_errors(model, &sets.pt)?);
    Ok(PopulationMse {
        mse_ft: ft.estimate,
        se_ft: ft.stderr,
        mse_pt: pt.estimate,
        se_pt: pt.stderr,
    })
}

/// MSE over `n` fresh samples of each population.
pub fn eval_per_population(
    model: &TinyMlp,
    mm: &MixtureModel,
    n: usize,
    rng: RngStream,
) -> Result<PopulationMse> {
    if n == 0 {
        return invalid("evaluation needs at least one sample");
    }
    evaluate_populations(model, &EvalSets::draw(mm, n, rng)?)
}

/// Mean of all gate values of all DISeL layers over a set of inputs.
pub fn mean_gate(model: &TinyMlp, inputs: impl Iterator<Item = Vector>) -> Result<Option<f64>> {
    if !model.has_disel() {
        return Ok(None);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for x in inputs {
        for (_, g) in model.gate_vectors(&x)? {
            sum += g.iter().sum::<f64>();
            count += g.dim();
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// The frozen map `x ↦ W0 x` as a one-layer network.
pub fn toy_frozen_model(mm: &MixtureModel) -> Result<TinyMlp> {
    TinyMlp::from_layers(vec![AdaptedLinear::frozen(FrozenLinear::new(
        mm.w0().clone(),
        None,
    )?)])
}

/// Trained model, its checkpoint log and the evaluation sets it used.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub method: MethodConfig,
    pub model: TinyMlp,
    pub log: MetricLog,
}

/// Fits one method to the mixture regression objective. Minibatch `t` is
/// drawn from `rng.named("train").derive(t)`, evaluation sets from
/// `rng.named("eval")` and adapter initialisation from `rng.named("init")`,
/// so every method sees identical data.
pub fn train_toy(
    method: &MethodConfig,
    mm: &MixtureModel,
    cfg: &TrainConfig,
    rng: RngStream,
) -> Result<ToyRun> {
    let sets = EvalSets::draw(mm, cfg.eval_samples, rng.named("eval"))?;
    let mut log = MetricLog::new();
    let model = train_toy_with(method, mm, cfg, rng, &sets, &mut log)?;
    Ok(ToyRun {
        method: method.clone(),
        model,
        log,
    })
}

/// As [`train_toy`] with caller-supplied evaluation sets; records already
/// appended to `log` survive a divergence.
pub fn train_toy_with(
    method: &MethodConfig,
    mm: &MixtureModel,
    cfg: &TrainConfig,
    rng: RngStream,
    sets: &EvalSets,
    log: &mut MetricLog,
) -> Result<TinyMlp> {
    method.validate()?;
    let mut model = toy_frozen_model(mm)?;
    let mask = match method.kind {
        MethodKind::FullFt => TrainMask::all_dense(1),
        _ => {
            model.attach(method, &[0], rng.named("init"))?;
            TrainMask::adapters_only(1)
        }
    };
    let train_rng = rng.named("train");
    let gated = method.kind == MethodKind::Disel;
    run_loop(
        &mut model,
        &mask,
        method.name(),
        method.gate_lr_ratio,
        cfg,
        |step| {
            let b = sample_batch_noisy(mm, cfg.batch_size, cfg.noise_std, train_rng.derive(step))?;
            let xs = (0..b.len()).map(|i| b.x.row_vector(i)).collect();
            let ys = (0..b.len()).map(|i| b.y.row_vector(i)).collect();
            Ok((xs, ys, Vec::new()))
        },
        false,
        |net, step, lr, gate_lr| {
            let mse = evaluate_populations(net, sets)?;
            let mut rec = MetricRecord::new(
                "toy",
                method.name(),
                step,
                lr,
                0.5 * (mse.mse_ft + mse.mse_pt),
            );
            rec.mse_ft = Some(mse.mse_ft);
            rec.mse_ft_se = Some(mse.se_ft);
            rec.mse_pt = Some(mse.mse_pt);
            rec.mse_pt_se = Some(mse.se_pt);
            if gated {
                rec.gate_lr = Some(gate_lr);
                rec.gate_mean_ft =
                    mean_gate(net, (0..sets.ft.len()).map(|i| sets.ft.x.row_vector(i)))?;
                rec.gate_mean_pt =
                    mean_gate(net, (0..sets.pt.len()).map(|i| sets.pt.x.row_vector(i)))?;
            }
            Ok(rec)
        },
        log,
    )?;
    Ok(model)
}

/// `W − W0` of a fully fine-tuned one-layer toy model.
pub fn toy_delta(model: &TinyMlp, mm: &MixtureModel) -> Result<crate::numkit::Matrix> {
    model.layers()[0].merged_weight()?.sub(mm.w0())
}
