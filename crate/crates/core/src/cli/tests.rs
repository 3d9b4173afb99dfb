use super::*;
use crate::trainer::{Activation, MethodConfig, MethodKind, OptimizerKind};

#[test]
fn defaults_round_trip_through_toml() {
    let cfg = ExperimentConfig::default();
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
}

#[test]
fn partial_sections_keep_their_own_defaults() {
    let cfg = ExperimentConfig::from_toml_str(
        "[retention.adapt]\nsteps = 10\n[toy.train.optim]\nlr = 0.5\n",
    )
    .unwrap();
    let d = ExperimentConfig::default();
    assert_eq!(cfg.retention.adapt.steps, 10);
    // the retention adapt optimizer is SGD, not the generic AdamW default
    assert_eq!(cfg.retention.adapt.optim, d.retention.adapt.optim);
    assert_eq!(cfg.retention.adapt.optim.optimizer, OptimizerKind::Sgd);
    assert_eq!(cfg.toy.train.optim.lr, 0.5);
    assert_eq!(cfg.toy.train.steps, d.toy.train.steps);
    assert_eq!(cfg.retention.activation, Activation::Tanh);
}

#[test]
fn clip_norm_zero_means_off() {
    let cfg =
        ExperimentConfig::from_toml_str("[retention.pretrain.optim]\nmax_grad_norm = 0\n").unwrap();
    assert_eq!(cfg.retention.pretrain.optim.max_grad_norm, None);
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    for text in [
        "bogus = 1",
        "[toy]\nsteps = 3",
        "kind = \"nope\"",
        "seed = -1",
        "[gates]\nsource = \"x\"",
    ] {
        assert!(
            matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))),
            "{text}"
        );
    }
}

#[test]
fn method_selection_keeps_order_and_settings() {
    let mut cfg = ExperimentConfig::default();
    cfg.select_methods(&["disel".into(), "fullft".into()])
        .unwrap();
    let kinds: Vec<_> = cfg.toy.methods.iter().map(|m| m.kind).collect();
    assert_eq!(kinds, [MethodKind::Disel, MethodKind::FullFt]);
    assert_eq!(cfg.toy.methods[0].gate_lr_ratio, 0.5);
    assert!(cfg.select_methods(&["adalora".into()]).is_err());

    cfg.kind = ExperimentKind::MlpRetention;
    cfg.retention.methods.clear();
    cfg.select_methods(&["lora".into()]).unwrap();
    assert_eq!(cfg.retention.methods[0].rank, 4);

    cfg.kind = ExperimentKind::Gradcheck;
    cfg.select_methods(&["lora".into()]).unwrap();
    assert_eq!(cfg.gradcheck.layers, [MethodKind::Lora]);
    assert!(cfg.select_methods(&["fullft".into()]).is_err());

    cfg.kind = ExperimentKind::GatesReport;
    assert!(cfg.select_methods(&["disel".into()]).is_err());
}

#[test]
fn validation_per_kind() {
    let mut cfg = ExperimentConfig::default();
    cfg.validate().unwrap();
    cfg.toy.methods.push(MethodConfig::lora(3));
    assert!(cfg.validate().is_err());

    let mut cfg = ExperimentConfig {
        kind: ExperimentKind::GatesReport,
        ..ExperimentConfig::default()
    };
    assert!(cfg.validate().is_err());
    cfg.gates.checkpoint = Some("no/such/file.ckpt".into());
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let ckpt = tempfile::NamedTempFile::new().unwrap();
    cfg.gates.checkpoint = Some(ckpt.path().to_path_buf());
    cfg.validate().unwrap();
    cfg.gates.domains.clear();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.gates.domains = vec!["ft".into()];
    assert!(cfg.validate().is_err());
    cfg.gates.source = GateSource::ToyFigure1;
    cfg.validate().unwrap();

    let mut cfg = ExperimentConfig {
        kind: ExperimentKind::Gradcheck,
        ..ExperimentConfig::default()
    };
    cfg.gradcheck.suite.instances = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn relative_checkpoints_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[gates]\ncheckpoint = \"checkpoints/disel.ckpt\"\n").unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(
        cfg.gates.checkpoint.unwrap(),
        dir.path().join("checkpoints/disel.ckpt")
    );
    assert!(matches!(
        ExperimentConfig::load(&dir.path().join("missing.toml")),
        Err(Error::Config(_))
    ));
}

#[test]
fn exit_codes_are_distinct_per_error_class() {
    let codes = [
        exit_code(&Error::Config(String::new())),
        exit_code(&Error::Numeric(String::new())),
        exit_code(&Error::Io(std::io::Error::other("x"))),
        EXIT_CHECKS_FAILED,
    ];
    assert_eq!(codes, [EXIT_CONFIG, EXIT_NUMERIC, EXIT_OTHER, 4]);
    assert_eq!(
        exit_code(&Error::InvalidArgument(String::new())),
        EXIT_CONFIG
    );
    let diverged = Error::Diverged {
        method: "lora".into(),
        step: 3,
        loss: f64::NAN,
    };
    assert_eq!(exit_code(&diverged), EXIT_NUMERIC);
}

#[test]
fn run_dirs_are_never_reused() {
    let dir = tempfile::tempdir().unwrap();
    let a = RunDir::create(dir.path(), "x").unwrap();
    let b = RunDir::create(dir.path(), "x").unwrap();
    let c = RunDir::create(dir.path(), "x").unwrap();
    let names: std::collections::BTreeSet<_> = [&a, &b, &c]
        .iter()
        .map(|d| d.path().to_path_buf())
        .collect();
    assert_eq!(names.len(), 3);
    assert!(names
        .iter()
        .all(|p| p.parent() == Some(dir.path()) && p.is_dir()));
}
