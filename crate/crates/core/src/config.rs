//! Declarative experiment configuration.
//!
//! An experiment is one TOML document. Every field has a default, so an empty
//! file is a valid (small, synthetic) FedAvgAT run. Dotted-key overrides such
//! as `schedule.e0=50` are applied to the parsed document before it is
//! deserialized, and validation reports every problem in one pass.
//!
//! ```toml
//! [run]
//! seed = 0
//! rounds = 20
//! natural_training = false
//!
//! [model]
//! hidden = [32]
//! activation = "relu"
//!
//! [data]
//! source = "synthetic"
//! class_count = 10
//! per_class = 50
//!
//! [partition]
//! kind = "non_iid"
//! clients = 5
//! skew = 2.0
//!
//! [attack]
//! t_steps = 10
//! epsilon = "8/255"
//! alpha = "2/255"
//!
//! [fusion]
//! kind = "fedcurv"
//! lambda = 1.0
//!
//! [schedule]
//! e0 = 50
//! gamma_e = 0.5
//! freq_e = 5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::AttackConfig;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::optim::OptimizerConfig;
use crate::schedule::ESchedule;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub attack: AttackConfig,
    /// Attack used for adversarial accuracy; defaults to `attack`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_attack: Option<AttackConfig>,
    pub optimizer: OptimizerConfig,
    pub fusion: FusionConfig,
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaturalAdvReport {
    /// Adversarial accuracy is left empty for naturally trained runs.
    Absent,
    /// Report 0 without measuring, as in published tables.
    Zero,
    /// Measure it under attack like any other run.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: u64,
    /// Train on clean batches (FedAvg / FedCurv baselines).
    pub natural_training: bool,
    pub natural_adv_accuracy: NaturalAdvReport,
    /// Evaluate every n rounds; the last round is always evaluated. 0 = last round only.
    pub eval_every: u64,
    /// SVCCA drift between clients every n rounds; 0 = never.
    pub svcca_every: u64,
    /// Layers to compare; empty = all.
    pub svcca_layers: Vec<usize>,
    /// Number of test inputs used as the SVCCA probe set; 0 = all.
    pub svcca_probe: usize,
    pub variance_keep: f64,
    /// Write a checkpoint every n rounds; 0 = final only.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 20,
            natural_training: false,
            natural_adv_accuracy: NaturalAdvReport::Absent,
            eval_every: 1,
            svcca_every: 0,
            svcca_layers: Vec::new(),
            svcca_probe: 0,
            variance_keep: crate::svcca::DEFAULT_VARIANCE_KEEP,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Initialization seed; derived from the master seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Relu,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub class_count: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub noise: f64,
    /// Dataset seed; derived from the master seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
    /// Min-max rescale CSV features into [0, 1].
    pub rescale: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            class_count: 10,
            per_class: 50,
            test_per_class: 20,
            input_dim: 10,
            separation: 0.5,
            noise: 0.15,
            seed: None,
            train_csv: None,
            test_csv: None,
            rescale: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    NonIid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    pub clients: usize,
    /// Percent of each minority class held by every non-owning client.
    pub skew: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            kind: PartitionKind::NonIid,
            clients: 5,
            skew: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Fedavg,
    Fedcurv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub lambda: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kind: FusionKind::Fedavg,
            lambda: 0.0,
        }
    }
}

/// Either `fixed_e`, or `e0` / `gamma_e` / `freq_e`. Without an explicit
/// `kind`, setting `e0` selects the decaying schedule.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ScheduleKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_e: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e0: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_e: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freq_e: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Fixed,
    Decay,
}

impl ScheduleConfig {
    pub fn fixed(e: u32) -> Self {
        Self {
            kind: Some(ScheduleKind::Fixed),
            fixed_e: Some(e),
            ..Self::default()
        }
    }

    pub fn decay(e0: u32, gamma_e: f64, freq_e: u32) -> Self {
        Self {
            kind: Some(ScheduleKind::Decay),
            e0: Some(e0),
            gamma_e: Some(gamma_e),
            freq_e: Some(freq_e),
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> std::result::Result<ESchedule, Vec<String>> {
        let kind = self.kind.unwrap_or(if self.e0.is_some() {
            ScheduleKind::Decay
        } else {
            ScheduleKind::Fixed
        });
        let sched = match kind {
            ScheduleKind::Fixed => ESchedule::fixed(self.fixed_e.unwrap_or(1)),
            ScheduleKind::Decay => match self.e0 {
                Some(e0) => ESchedule::Decay {
                    e0,
                    gamma: self.gamma_e.unwrap_or(1.0),
                    freq: self.freq_e.unwrap_or(1),
                },
                None => return Err(vec!["schedule.kind = \"decay\" requires schedule.e0".into()]),
            },
        };
        let problems = sched.problems();
        if problems.is_empty() {
            Ok(sched)
        } else {
            Err(problems)
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(vec![e.message().to_string()]))?;
        apply_overrides(&mut table, overrides)?;
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(vec![e.message().to_string()]))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative CSV paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.train_csv, &mut self.data.test_csv]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn eval_attack(&self) -> &AttackConfig {
        self.eval_attack.as_ref().unwrap_or(&self.attack)
    }

    pub fn schedule(&self) -> Result<ESchedule> {
        self.schedule.resolve().map_err(Error::InvalidConfig)
    }

    /// Every validation problem in the config.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.run.rounds == 0 {
            out.push("run.rounds must be at least 1".into());
        }
        if !(self.run.variance_keep > 0.0 && self.run.variance_keep <= 1.0) {
            out.push(format!(
                "run.variance_keep must be in (0, 1], got {}",
                self.run.variance_keep
            ));
        }
        if let Some(i) = self.model.hidden.iter().position(|&h| h == 0) {
            out.push(format!("model.hidden[{i}] must be positive"));
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.class_count < 2 {
                    out.push("data.class_count must be at least 2".into());
                }
                if d.per_class == 0 {
                    out.push("data.per_class must be positive".into());
                }
                if d.test_per_class == 0 {
                    out.push("data.test_per_class must be positive".into());
                }
                if d.input_dim == 0 {
                    out.push("data.input_dim must be positive".into());
                }
                if !(d.separation >= 0.0 && d.separation.is_finite()) {
                    out.push(format!(
                        "data.separation must be non-negative, got {}",
                        d.separation
                    ));
                }
                if !(d.noise >= 0.0 && d.noise.is_finite()) {
                    out.push(format!("data.noise must be non-negative, got {}", d.noise));
                }
            }
            DataSource::Csv => {
                if d.train_csv.is_none() {
                    out.push("data.source = \"csv\" requires data.train_csv".into());
                }
                if d.test_csv.is_none() {
                    out.push("data.source = \"csv\" requires data.test_csv".into());
                }
            }
        }
        let p = &self.partition;
        match p.kind {
            PartitionKind::NonIid => {
                let spec = crate::data::PartitionSpec {
                    clients: p.clients,
                    skew: p.skew,
                    seed: 0,
                };
                // Divisibility needs the class count, which CSV data only reveals on load.
                let classes = match d.source {
                    DataSource::Synthetic => d.class_count,
                    DataSource::Csv => p.clients.max(1),
                };
                out.extend(spec.problems(classes));
            }
            PartitionKind::Iid => {
                if p.clients == 0 {
                    out.push("partition.clients must be at least 1".into());
                }
            }
        }
        out.extend(self.attack.problems("attack"));
        if let Some(a) = &self.eval_attack {
            out.extend(a.problems("eval_attack"));
        }
        out.extend(self.optimizer.problems());
        if !(self.fusion.lambda >= 0.0 && self.fusion.lambda.is_finite()) {
            out.push(format!(
                "fusion.lambda must be non-negative, got {}",
                self.fusion.lambda
            ));
        }
        if let Err(p) = self.schedule.resolve() {
            out.extend(p);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Applies `a.b.c=value` overrides. Values are parsed as TOML literals, and
/// fall back to plain strings (so `fusion.kind=fedcurv` works unquoted).
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    let mut problems = Vec::new();
    for ov in overrides {
        let Some((key, raw)) = ov.split_once('=') else {
            problems.push(format!("override {ov:?} is not key=value"));
            continue;
        };
        let key = key.trim();
        let path: Vec<&str> = key.split('.').map(str::trim).collect();
        if path.iter().any(|p| p.is_empty()) {
            problems.push(format!("override key {key:?} is malformed"));
            continue;
        }
        let value = parse_override_value(raw.trim());
        if let Err(part) = set_path(table, &path, value) {
            problems.push(format!("override {key:?}: {part:?} is not a table"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(problems))
    }
}

fn set_path(
    table: &mut toml::Table,
    path: &[&str],
    value: toml::Value,
) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for part in parents {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(part.to_string()),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

pub fn parse_override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
