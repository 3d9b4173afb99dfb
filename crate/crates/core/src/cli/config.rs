use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::ToyInstance;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckConfig;
use crate::trainer::{MethodConfig, MethodKind, RetentionConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    ToyFigure1,
    Gradcheck,
    MlpRetention,
    GatesReport,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ToyFigure1 => "toy-figure1",
            Self::Gradcheck => "gradcheck",
            Self::MlpRetention => "mlp-retention",
            Self::GatesReport => "gates-report",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The toy regression experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub instance: ToyInstance,
    pub train: TrainConfig,
    pub methods: Vec<MethodConfig>,
    /// Monte Carlo samples for the Bayes floor.
    pub bayes_samples: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        let instance = ToyInstance::default();
        let r = instance.lora_rank;
        // a gate rate above the adapter rate can trap one rank-one
        // component half-open in this problem
        let disel = MethodConfig {
            gate_lr_ratio: 0.5,
            ..MethodConfig::disel(r)
        };
        Self {
            instance,
            train: TrainConfig::default(),
            methods: vec![MethodConfig::full_ft(), MethodConfig::lora(r), disel],
            bayes_samples: 200_000,
        }
    }
}

/// The finite-difference suite and the adapter types it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub layers: Vec<MethodKind>,
    pub suite: GradCheckConfig,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            layers: vec![MethodKind::Disel, MethodKind::Lora],
            suite: GradCheckConfig::default(),
        }
    }
}

/// Which experiment produced the checkpoint a gate report reads, and so
/// which domains its inputs are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateSource {
    /// Domains `ft` and `pt` of the toy instance.
    ToyFigure1,
    /// Domains `task1` and `task2` of the retention tasks.
    #[default]
    MlpRetention,
}

impl GateSource {
    pub fn domains(self) -> [&'static str; 2] {
        match self {
            Self::ToyFigure1 => ["ft", "pt"],
            Self::MlpRetention => ["task1", "task2"],
        }
    }
}

/// Gate recording: the inputs and bins of every gate histogram, whether
/// produced by a training run or by a standalone report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatesSection {
    pub source: GateSource,
    /// Relative paths resolve against the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Subset of the source's domains; must not be empty.
    pub domains: Vec<String>,
    /// Inputs drawn per domain.
    pub samples: usize,
    pub bins: usize,
}

impl Default for GatesSection {
    fn default() -> Self {
        let source = GateSource::default();
        Self {
            source,
            checkpoint: None,
            domains: source.domains().map(String::from).to_vec(),
            samples: 2_000,
            bins: 50,
        }
    }
}

/// A complete, serializable description of one run. Every field has a
/// default; a config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub out: PathBuf,
    pub toy: ToySection,
    pub retention: RetentionConfig,
    pub gradcheck: GradcheckSection,
    pub gates: GatesSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::default(),
            seed: 0,
            out: PathBuf::from("runs"),
            toy: ToySection::default(),
            retention: RetentionConfig::default(),
            gradcheck: GradcheckSection::default(),
            gates: GatesSection::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses TOML text laid over the defaults, table by table, so a
    /// partial section keeps the defaults of the fields it omits.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base =
            toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        base.try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Reads a config file; a relative gate checkpoint becomes relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(ckpt) = cfg.gates.checkpoint.as_mut() {
            if ckpt.is_relative() {
                *ckpt = path.parent().unwrap_or(Path::new(".")).join(&*ckpt);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The configured method list of the current experiment; empty for
    /// experiments that train nothing.
    pub fn methods(&self) -> &[MethodConfig] {
        match self.kind {
            ExperimentKind::ToyFigure1 => &self.toy.methods,
            ExperimentKind::MlpRetention => &self.retention.methods,
            _ => &[],
        }
    }

    /// Restricts the experiment to the named methods, in the given order.
    /// A method missing from the config takes that experiment's default
    /// settings.
    pub fn select_methods(&mut self, names: &[String]) -> Result<()> {
        if names.is_empty() {
            return Ok(());
        }
        let kinds = names
            .iter()
            .map(|n| MethodKind::parse(n))
            .collect::<Result<Vec<_>>>()?;
        let (list, defaults) = match self.kind {
            ExperimentKind::ToyFigure1 => (&mut self.toy.methods, ToySection::default().methods),
            ExperimentKind::MlpRetention => (
                &mut self.retention.methods,
                RetentionConfig::default().methods,
            ),
            ExperimentKind::Gradcheck => {
                if kinds.contains(&MethodKind::FullFt) {
                    return Err(Error::Config(
                        "gradcheck covers lora and disel layers only".into(),
                    ));
                }
                self.gradcheck.layers = kinds;
                return Ok(());
            }
            ExperimentKind::GatesReport => {
                return Err(Error::Config("gates-report takes no --method".into()));
            }
        };
        let selected = kinds
            .iter()
            .map(|&k| {
                list.iter()
                    .chain(&defaults)
                    .find(|m| m.kind == k)
                    .cloned()
                    .unwrap_or_else(|| MethodConfig::new(k, 2))
            })
            .collect();
        *list = selected;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let methods = self.methods();
        let trains = matches!(
            self.kind,
            ExperimentKind::ToyFigure1 | ExperimentKind::MlpRetention
        );
        if trains && methods.is_empty() {
            return Err(Error::Config(format!(
                "{}: method list is empty",
                self.kind
            )));
        }
        methods.iter().try_for_each(MethodConfig::validate)?;
        let mut kinds: Vec<MethodKind> = methods.iter().map(|m| m.kind).collect();
        kinds.sort_by_key(|k| k.name());
        if kinds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("each method may appear only once".into()));
        }
        match self.kind {
            ExperimentKind::ToyFigure1 => {
                self.toy
                    .instance
                    .validate()
                    .map_err(|e| Error::Config(e.to_string()))?;
                self.toy.train.validate()?;
                if self.toy.bayes_samples < 2 {
                    return Err(Error::Config(
                        "toy: bayes_samples must be at least 2".into(),
                    ));
                }
            }
            ExperimentKind::MlpRetention => {
                self.retention.pretrain.validate()?;
                self.retention.adapt.validate()?;
            }
            ExperimentKind::Gradcheck => {
                let g = &self.gradcheck.suite;
                if self.gradcheck.layers.is_empty() {
                    return Err(Error::Config("gradcheck: the layer list is empty".into()));
                }
                if g.instances == 0
                    || !(g.step > 0.0)
                    || !(g.tolerance > 0.0)
                    || g.max_dim == 0
                    || g.max_rank == 0
                {
                    return Err(Error::Config(
                        "gradcheck: instances, step, tolerance, max_dim and max_rank must be positive".into(),
                    ));
                }
            }
            ExperimentKind::GatesReport => {
                if self.gates.domains.is_empty() {
                    return Err(Error::Config(
                        "gates-report: the domain list is empty".into(),
                    ));
                }
                let known = self.gates.source.domains();
                if let Some(d) = self
                    .gates
                    .domains
                    .iter()
                    .find(|d| !known.contains(&d.as_str()))
                {
                    return Err(Error::Config(format!(
                        "gates-report: unknown domain '{d}' (expected one of {known:?})"
                    )));
                }
                match &self.gates.checkpoint {
                    None => return Err(Error::Config("gates-report: no checkpoint given".into())),
                    Some(p) if !p.is_file() => {
                        return Err(Error::Config(format!(
                            "gates-report: checkpoint {} not found",
                            p.display()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        if self.gates.samples == 0 || self.gates.bins < 2 {
            return Err(Error::Config(
                "gates: samples >= 1 and bins >= 2 required".into(),
            ));
        }
        Ok(())
    }
}
