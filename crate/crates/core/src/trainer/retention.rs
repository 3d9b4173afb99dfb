use serde::{Deserialize, Serialize};

use super::OptimConfig;
use crate::datagen::{make_retention_tasks, ClassificationTask, LabeledSet};
use crate::error::{Error, Result};
use crate::numkit::{RngStream, Vector};

use super::{
    cross_entropy, mean_gate, run_loop, Activation, MethodConfig, MethodKind, MetricLog,
    MetricRecord, TinyMlp, TrainConfig, TrainMask,
};

/// Desk-scale retention experiment: pre-train a two-hidden-layer MLP on
/// task 1, adapt it to task 2 with each method, and track task-1 accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetentionConfig {
    pub d: usize,
    pub n_classes: usize,
    pub separation: f64,
    pub hidden: usize,
    pub activation: Activation,
    /// Layers that receive adapters; the output head stays frozen.
    pub adapted_layers: Vec<usize>,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub methods: Vec<MethodConfig>,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            d: 16,
            n_classes: 4,
            separation: 12.0,
            hidden: 64,
            activation: Activation::Tanh,
            adapted_layers: vec![0, 1],
            pretrain: TrainConfig {
                steps: 1500,
                batch_size: 64,
                optim: OptimConfig {
                    lr: 5e-3,
                    ..OptimConfig::default()
                },
                checkpoints: 4,
                eval_samples: 4000,
                noise_std: 0.0,
            },
            adapt: TrainConfig {
                steps: 1500,
                batch_size: 64,
                optim: OptimConfig::sgd(0.02),
                checkpoints: 16,
                eval_samples: 4000,
                noise_std: 0.0,
            },
            methods: vec![
                MethodConfig::full_ft(),
                MethodConfig::lora(4),
                MethodConfig::disel(4),
            ],
        }
    }
}

impl RetentionConfig {
    pub fn layer_sizes(&self) -> Vec<usize> {
        vec![self.d, self.hidden, self.hidden, self.n_classes]
    }
}

/// One adapted model and its checkpoint log.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: MethodConfig,
    pub model: TinyMlp,
    pub log: MetricLog,
}

#[derive(Debug, Clone)]
pub struct RetentionOutcome {
    pub tasks: (ClassificationTask, ClassificationTask),
    pub pretrained: TinyMlp,
    /// Task-1 accuracy of the pre-trained model on the evaluation set.
    pub pretrain_accuracy: f64,
    pub runs: Vec<MethodRun>,
    /// Records of every method, in run order.
    pub log: MetricLog,
}

fn inputs(set: &LabeledSet) -> Vec<Vector> {
    (0..set.len()).map(|i| set.input(i)).collect()
}

pub fn accuracy(net: &TinyMlp, set: &LabeledSet) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..set.len() {
        let logits = net.forward(&set.input(i))?;
        let pred = (0..logits.dim())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .expect("non-empty output");
        hits += usize::from(pred == set.labels[i]);
    }
    Ok(hits as f64 / set.len() as f64)
}

/// Dense training of a fresh network on one task with all weights free.
pub fn pretrain(
    task: &ClassificationTask,
    sizes: &[usize],
    activation: Activation,
    cfg: &TrainConfig,
    rng: RngStream,
) -> Result<TinyMlp> {
    let mut net = TinyMlp::dense(sizes, rng.named("init"))?.with_activation(activation);
    let mask = TrainMask::all_dense(net.n_layers());
    let data = rng.named("batches");
    let mut log = MetricLog::new();
    run_loop(
        &mut net,
        &mask,
        "pretrain",
        1.0,
        cfg,
        |step| {
            let b = task.sample(cfg.batch_size, data.derive(step));
            Ok((inputs(&b), Vec::new(), b.labels))
        },
        true,
        |_, step, lr, _| {
            Ok(MetricRecord::new(
                "pretrain",
                "pretrain",
                step,
                lr,
                f64::NAN,
            ))
        },
        &mut log,
    )?;
    Ok(net)
}

/// Pre-trains on task 1, then adapts a copy of the pre-trained network to
/// task 2 with every configured method. All methods share the pre-trained
/// weights, the task-2 minibatch stream and the evaluation sets.
pub fn retention_experiment(cfg: &RetentionConfig, rng: RngStream) -> Result<RetentionOutcome> {
    let mut log = MetricLog::new();
    retention_experiment_logged(cfg, rng, &mut log)
}

/// As [`retention_experiment`], appending records to `log` as they are
/// produced so that a divergence leaves the completed checkpoints behind.
pub fn retention_experiment_logged(
    cfg: &RetentionConfig,
    rng: RngStream,
    log: &mut MetricLog,
) -> Result<RetentionOutcome> {
    if cfg.methods.is_empty() {
        return Err(Error::Config(
            "retention experiment needs at least one method".into(),
        ));
    }
    cfg.methods.iter().try_for_each(MethodConfig::validate)?;
    let (task1, task2) =
        make_retention_tasks(cfg.d, cfg.n_classes, cfg.separation, rng.named("tasks"))?;
    let sizes = cfg.layer_sizes();
    let pretrained = pretrain(
        &task1,
        &sizes,
        cfg.activation,
        &cfg.pretrain,
        rng.named("pretrain"),
    )?;
    let eval1 = task1.sample(cfg.adapt.eval_samples, rng.named("eval-task1"));
    let eval2 = task2.sample(cfg.adapt.eval_samples, rng.named("eval-task2"));
    let (eval1_x, eval2_x) = (inputs(&eval1), inputs(&eval2));
    let pretrain_accuracy = accuracy(&pretrained, &eval1)?;

    let data = rng.named("adapt-batches");
    let mut runs = Vec::new();
    for method in &cfg.methods {
        let mut net = pretrained.clone();
        let mask = match method.kind {
            MethodKind::FullFt => TrainMask::all_dense(net.n_layers()),
            _ => {
                net.attach(method, &cfg.adapted_layers, rng.named("adapter-init"))?;
                TrainMask::adapters_only(net.n_layers())
            }
        };
        let gated = method.kind == MethodKind::Disel;
        let first = log.records().len();
        run_loop(
            &mut net,
            &mask,
            method.name(),
            method.gate_lr_ratio,
            &cfg.adapt,
            |step| {
                let b = task2.sample(cfg.adapt.batch_size, data.derive(step));
                Ok((inputs(&b), Vec::new(), b.labels))
            },
            true,
            |net, step, lr, gate_lr| {
                let loss = cross_entropy(net, &eval2_x, &eval2.labels)?;
                let mut rec = MetricRecord::new("retention", method.name(), step, lr, loss);
                rec.ft_accuracy = Some(accuracy(net, &eval2)?);
                rec.retention_accuracy = Some(accuracy(net, &eval1)?);
                if gated {
                    rec.gate_lr = Some(gate_lr);
                    rec.gate_mean_ft = mean_gate(net, eval2_x.iter().cloned())?;
                    rec.gate_mean_pt = mean_gate(net, eval1_x.iter().cloned())?;
                }
                Ok(rec)
            },
            log,
        )?;
        let mut own = MetricLog::new();
        log.records()[first..]
            .iter()
            .try_for_each(|r| own.push(r.clone()))?;
        runs.push(MethodRun {
            method: method.clone(),
            model: net,
            log: own,
        });
    }
    Ok(RetentionOutcome {
        tasks: (task1, task2),
        pretrained,
        pretrain_accuracy,
        runs,
        log: log.clone(),
    })
}
