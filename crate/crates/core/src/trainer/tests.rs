use super::*;
use crate::adapters::{AdaptedLinear, FrozenLinear};
use crate::datagen::{make_toy_instance, ToyInstance};
use crate::numkit::{mat_mat, standard_normal_matrix, Matrix};
use crate::oracle::fixed_floor_loss;

fn toy() -> MixtureModel {
    let cfg = ToyInstance::default();
    make_toy_instance(&cfg, cfg.rng()).unwrap()
}

fn short(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        checkpoints: 4,
        eval_samples: 2000,
        ..TrainConfig::default()
    }
}

fn linear_model(w: Matrix) -> TinyMlp {
    TinyMlp::from_layers(vec![AdaptedLinear::frozen(
        FrozenLinear::new(w, None).unwrap(),
    )])
    .unwrap()
}

fn floor(mm: &MixtureModel) -> f64 {
    fixed_floor_loss(mm.task_matrix(), &mm.second_moment(Population::Ft)).unwrap()
}

fn random_vec(n: usize, seed: u64, key: u64) -> Vector {
    Vector::from(standard_normal_matrix(1, n, RngStream::new(seed, key)).into_vec())
}

fn small_retention() -> RetentionConfig {
    let mut cfg = RetentionConfig::default();
    cfg.pretrain.steps = 400;
    cfg.adapt.steps = 300;
    cfg.adapt.checkpoints = 3;
    cfg.adapt.eval_samples = 800;
    cfg
}

#[test]
fn checkpoint_schedule() {
    let s = checkpoint_steps(1500, 16);
    assert_eq!(s.len(), 17);
    assert_eq!((s[0], s[16]), (0, 1500));
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(checkpoint_steps(3, 16), vec![0, 1, 2, 3]);
    assert_eq!(checkpoint_steps(0, 16), vec![0]);
}

#[test]
fn method_parsing_and_validation() {
    assert_eq!(MethodKind::parse("DISeL").unwrap(), MethodKind::Disel);
    assert_eq!(MethodKind::parse("full-ft").unwrap(), MethodKind::FullFt);
    assert!(matches!(MethodKind::parse("dora"), Err(Error::Config(_))));
    assert!(MethodConfig::lora(0).validate().is_err());
    assert!(MethodConfig::full_ft().validate().is_ok());
    let mut m = MethodConfig::disel(2);
    m.gate_lr_ratio = f64::NAN;
    assert!(m.validate().is_err());
    assert_eq!(MethodConfig::lora(4).alpha(), 4.0);
}

#[test]
fn optim_config_validation() {
    let mut o = OptimConfig::default();
    assert!(o.validate().is_ok());
    o.warmup_ratio = 1.0;
    assert!(o.validate().is_err());
    let mut o = OptimConfig::sgd(0.1);
    o.max_grad_norm = Some(0.0);
    assert!(o.validate().is_err());
    let t = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(t.validate(), Err(Error::Config(_))));
}

#[test]
fn network_rejects_mismatched_layers() {
    let a = AdaptedLinear::frozen(FrozenLinear::new(Matrix::zeros(3, 2), None).unwrap());
    let b = AdaptedLinear::frozen(FrozenLinear::new(Matrix::zeros(2, 4), None).unwrap());
    assert!(TinyMlp::from_layers(vec![a, b]).is_err());
    assert!(TinyMlp::from_layers(Vec::new()).is_err());
    let mut net = TinyMlp::dense(&[3, 4, 2], RngStream::new(0, 0)).unwrap();
    assert!(net
        .attach(&MethodConfig::lora(1), &[5], RngStream::new(0, 1))
        .is_err());
}

/// Central differences of `⟨c, f(x)⟩` with respect to every trained
/// parameter, against the analytic accumulator.
fn network_gradient_error(
    activation: Activation,
    method: &MethodConfig,
    dense: bool,
    seed: u64,
) -> f64 {
    let rng = RngStream::new(seed, 7);
    let mut net = TinyMlp::dense(&[5, 6, 4, 3], rng.named("net"))
        .unwrap()
        .with_activation(activation);
    net.attach(method, &[0, 1], rng.named("adapters")).unwrap();
    let n = net.n_layers();
    let mask = if dense {
        TrainMask::all_dense(n)
    } else {
        TrainMask::adapters_only(n)
    };
    let rates = GroupRates {
        lr: 0.0,
        gate_lr: 0.0,
        weight_decay: 0.0,
    };
    // open the gates and move B off zero so every block is exercised
    {
        let mut k = 0u64;
        for g in net
            .param_groups(&TrainMask::adapters_only(n), rates)
            .unwrap()
        {
            for p in g.params {
                let noise = random_vec(p.len(), seed, 100 + k);
                p.iter_mut()
                    .zip(noise.iter())
                    .for_each(|(v, e)| *v += 0.5 * e);
                k += 1;
            }
        }
    }
    let x = random_vec(5, seed, 1);
    let c = random_vec(3, seed, 2);
    let (_, trace) = net.forward_cached(&x).unwrap();
    let mut grads = net.zero_grads(&mask).unwrap();
    net.backward(&trace, &c, &mut grads).unwrap();
    let analytic: Vec<Vec<f64>> = grads
        .groups()
        .into_iter()
        .flatten()
        .map(|s| s.to_vec())
        .collect();

    let objective = |net: &TinyMlp| {
        net.forward(&x)
            .unwrap()
            .iter()
            .zip(c.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let n_blocks = analytic.len();
    for b in 0..n_blocks {
        for i in 0..analytic[b].len() {
            let eval_at = |delta: f64| {
                let mut probe = net.clone();
                {
                    let mut groups = probe.param_groups(&mask, rates).unwrap();
                    let block = groups
                        .iter_mut()
                        .flat_map(|g| g.params.iter_mut())
                        .nth(b)
                        .unwrap();
                    block[i] += delta;
                }
                objective(&probe)
            };
            let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let a = analytic[b][i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn network_backward_matches_finite_differences() {
    for activation in [Activation::Relu, Activation::Tanh] {
        for seed in 0..4 {
            for (method, dense) in [
                (MethodConfig::disel(2), false),
                (MethodConfig::lora(2), false),
                (MethodConfig::disel(3), true),
            ] {
                let err = network_gradient_error(activation, &method, dense, seed);
                assert!(
                    err < 1e-5,
                    "{activation:?} {} dense={dense} seed {seed}: {err:e}",
                    method.name()
                );
            }
        }
    }
}

#[test]
fn tanh_derivative_matches_difference_quotient() {
    for p in [-3.0, -0.4, 0.0, 0.7, 2.5] {
        let fd = ((p + 1e-6f64).tanh() - (p - 1e-6f64).tanh()) / 2e-6;
        assert!((Activation::Tanh.derivative(p) - fd).abs() < 1e-9);
    }
    assert_eq!(Activation::Relu.derivative(0.0), 0.0);
    assert_eq!(Activation::Relu.derivative(1e-300), 1.0);
}

#[test]
fn zero_step_disel_equals_frozen_model() {
    let mm = toy();
    let rng = RngStream::new(3, 0);
    let run = train_toy(&MethodConfig::disel(2), &mm, &short(0), rng).unwrap();
    let sets = EvalSets::draw(&mm, 2000, rng.named("eval")).unwrap();
    let frozen = evaluate_populations(&toy_frozen_model(&mm).unwrap(), &sets).unwrap();
    let rec = &run.log.records()[0];
    assert_eq!(run.log.records().len(), 1);
    assert_eq!(rec.mse_ft, Some(frozen.mse_ft));
    assert_eq!(rec.mse_pt, Some(frozen.mse_pt));
}

#[test]
fn true_generator_has_zero_error() {
    // with M = 0 the frozen map generates both populations exactly
    let d = 4;
    let mm = MixtureModel::new(
        Vector::basis(d, 0).scaled(2.0),
        Vector::basis(d, 0).scaled(-2.0),
        Matrix::identity(d),
        Matrix::zeros(d, d),
        standard_normal_matrix(d, d, RngStream::new(1, 1)),
    )
    .unwrap();
    let mse = eval_per_population(
        &toy_frozen_model(&mm).unwrap(),
        &mm,
        500,
        RngStream::new(2, 2),
    )
    .unwrap();
    assert_eq!((mse.mse_ft, mse.mse_pt), (0.0, 0.0));
    assert!(eval_per_population(
        &toy_frozen_model(&mm).unwrap(),
        &mm,
        0,
        RngStream::new(2, 2)
    )
    .is_err());
}

#[test]
fn frozen_model_errors_only_on_ft() {
    let mm = toy();
    let mse = eval_per_population(
        &toy_frozen_model(&mm).unwrap(),
        &mm,
        50_000,
        RngStream::new(4, 4),
    )
    .unwrap();
    assert_eq!(mse.mse_pt, 0.0);
    // E‖Mx‖² = Tr(M Σft Mᵀ) with Σft the uncentred second moment
    let m = mm.task_matrix();
    let expected = mat_mat(
        &mat_mat(m, &mm.second_moment(Population::Ft)).unwrap(),
        &m.transpose(),
    )
    .unwrap()
    .trace();
    assert!(
        (mse.mse_ft - expected).abs() <= 3.0 * mse.se_ft,
        "{} vs {expected}",
        mse.mse_ft
    );
}

#[test]
fn half_correction_sits_on_the_floor() {
    let mm = toy();
    let w = mm.w0().add(&mm.task_matrix().scaled(0.5)).unwrap();
    let mse = eval_per_population(&linear_model(w), &mm, 50_000, RngStream::new(5, 5)).unwrap();
    let f = floor(&mm);
    assert!(
        (mse.mse_ft - f).abs() <= 3.0 * mse.se_ft,
        "ft {} vs {f}",
        mse.mse_ft
    );
    assert!(
        (mse.mse_pt - f).abs() <= 3.0 * mse.se_pt,
        "pt {} vs {f}",
        mse.mse_pt
    );
}

#[test]
fn full_ft_converges_to_half_correction() {
    let mm = toy();
    let cfg = TrainConfig {
        eval_samples: 2000,
        ..TrainConfig::default()
    };
    let run = train_toy(&MethodConfig::full_ft(), &mm, &cfg, RngStream::new(0, 0)).unwrap();
    let delta = toy_delta(&run.model, &mm).unwrap();
    let half = mm.task_matrix().scaled(0.5);
    let rel = delta.sub(&half).unwrap().frobenius_norm() / mm.task_matrix().frobenius_norm();
    assert!(rel <= 0.05, "relative distance {rel}");
}

#[test]
fn lora_reaches_the_fixed_floor() {
    let mm = toy();
    let cfg = TrainConfig {
        eval_samples: 20_000,
        ..TrainConfig::default()
    };
    let run = train_toy(&MethodConfig::lora(2), &mm, &cfg, RngStream::new(0, 0)).unwrap();
    let last = run.log.last("lora").unwrap();
    let f = floor(&mm);
    for mse in [last.mse_ft.unwrap(), last.mse_pt.unwrap()] {
        assert!((mse - f).abs() <= 0.1 * f, "{mse} vs floor {f}");
    }
}

#[test]
fn adaptation_leaves_frozen_weights_and_reduces_loss() {
    let mm = toy();
    let before = toy_frozen_model(&mm).unwrap().frozen_fingerprint();
    for method in [
        MethodConfig::full_ft(),
        MethodConfig::lora(2),
        MethodConfig::disel(2),
    ] {
        let run = train_toy(&method, &mm, &short(600), RngStream::new(1, 0)).unwrap();
        let recs = run.log.method(method.name());
        assert_eq!(recs.len(), 5);
        assert!(
            recs.last().unwrap().train_loss <= recs[0].train_loss,
            "{}",
            method.name()
        );
        if method.kind != MethodKind::FullFt {
            assert_eq!(run.model.frozen_fingerprint(), before, "{}", method.name());
        } else {
            assert_ne!(run.model.frozen_fingerprint(), before);
        }
    }
}

#[test]
fn toy_runs_replay_bit_identically() {
    let mm = toy();
    let bytes = |seed| {
        let run = train_toy(
            &MethodConfig::disel(2),
            &mm,
            &short(300),
            RngStream::new(seed, 0),
        )
        .unwrap();
        let mut out = Vec::new();
        run.log.write_jsonl(&mut out).unwrap();
        run.log.write_csv(&mut out).unwrap();
        out
    };
    assert_eq!(bytes(9), bytes(9));
    assert_ne!(bytes(9), bytes(10));
}

#[test]
fn divergence_is_reported_with_the_partial_log() {
    let mm = toy();
    let mut cfg = short(200);
    cfg.optim = OptimConfig::sgd(1e4);
    cfg.optim.schedule = ScheduleKind::Constant;
    let rng = RngStream::new(0, 0);
    let sets = EvalSets::draw(&mm, 100, rng.named("eval")).unwrap();
    let mut log = MetricLog::new();
    let err = train_toy_with(&MethodConfig::lora(2), &mm, &cfg, rng, &sets, &mut log).unwrap_err();
    assert!(
        matches!(err, Error::Diverged { ref method, .. } if method.starts_with("lora")),
        "{err}"
    );
    assert_eq!(log.records()[0].step, 0);
}

#[test]
fn metric_log_enforces_monotone_steps() {
    let mut log = MetricLog::new();
    log.push(MetricRecord::new("toy", "lora", 0, 0.1, 1.0))
        .unwrap();
    log.push(MetricRecord::new("toy", "disel", 0, 0.1, 1.0))
        .unwrap();
    log.push(MetricRecord::new("toy", "lora", 5, 0.1, 0.5))
        .unwrap();
    assert!(log
        .push(MetricRecord::new("toy", "lora", 5, 0.1, 0.5))
        .is_err());
    assert!(log
        .push(MetricRecord::new("toy", "lora", 3, 0.1, 0.5))
        .is_err());
    assert_eq!(log.records().len(), 3);
    assert_eq!(log.last("lora").unwrap().step, 5);
}

#[test]
fn metric_log_jsonl_round_trip() {
    let mut log = MetricLog::new();
    let mut r = MetricRecord::new("retention", "disel", 0, 0.02, 0.7);
    r.gate_lr = Some(0.1);
    r.ft_accuracy = Some(0.25);
    r.retention_accuracy = Some(1.0);
    r.gate_mean_ft = Some(0.047);
    log.push(r).unwrap();
    log.push(MetricRecord::new("retention", "disel", 10, 0.019, 0.3))
        .unwrap();
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf).unwrap();
    assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 2);
    let back = MetricLog::read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, log);

    let stale = String::from_utf8(buf)
        .unwrap()
        .replace("\"schema_version\":1", "\"schema_version\":99");
    assert!(matches!(
        MetricLog::read_jsonl(stale.as_bytes()),
        Err(Error::Format(_))
    ));
    assert!(MetricLog::read_jsonl("{not json".as_bytes()).is_err());

    let mut csv = Vec::new();
    log.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("schema_version,experiment,method,step,lr,gate_lr,train_loss"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn retention_starts_at_pretrained_accuracy() {
    let out = retention_experiment(&small_retention(), RngStream::new(0, 0)).unwrap();
    assert_eq!(out.runs.len(), 3);
    for run in &out.runs {
        let first = &run.log.records()[0];
        assert_eq!(first.step, 0);
        assert_eq!(
            first.retention_accuracy,
            Some(out.pretrain_accuracy),
            "{}",
            run.method.name()
        );
        assert_eq!(
            first.gate_mean_ft.is_some(),
            run.method.kind == MethodKind::Disel
        );
        if run.method.kind != MethodKind::FullFt {
            assert_eq!(
                run.model.frozen_fingerprint(),
                out.pretrained.frozen_fingerprint()
            );
        }
    }
}

#[test]
fn frozen_model_retention_is_constant() {
    let cfg = small_retention();
    let out = retention_experiment(&cfg, RngStream::new(0, 0)).unwrap();
    let eval1 = out.tasks.0.sample(
        cfg.adapt.eval_samples,
        RngStream::new(0, 0).named("eval-task1"),
    );
    for _ in 0..3 {
        assert_eq!(
            accuracy(&out.pretrained, &eval1).unwrap(),
            out.pretrain_accuracy
        );
    }
}

#[test]
fn disel_gates_separate_tasks() {
    let out = retention_experiment(&RetentionConfig::default(), RngStream::new(0, 0)).unwrap();
    let last = out.log.last("disel").unwrap();
    let (ft, pt) = (last.gate_mean_ft.unwrap(), last.gate_mean_pt.unwrap());
    assert!(ft > pt, "gate means ft {ft} pt {pt}");
}

#[test]
fn retention_rejects_empty_method_list() {
    let mut cfg = small_retention();
    cfg.methods.clear();
    assert!(matches!(
        retention_experiment(&cfg, RngStream::new(0, 0)),
        Err(Error::Config(_))
    ));
}
