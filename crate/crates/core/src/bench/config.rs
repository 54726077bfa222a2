use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSettings};
use crate::data::{PartitionMode, PartitionPlan, SYNTH_NOISE};
use crate::nn::{ModelSpec, OptimizerConfig, OptimizerKind};
use crate::protocol::{DurationMode, NetworkModel, StopConfig, DEFAULT_SECONDS_PER_FLOP};
use crate::seed;
use crate::strategy::{BatchSize, StrategyConfig, StrategyName, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Invalid configuration, located by its dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn bad(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses TOML into `T`, reporting the path of the first offending field.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| bad("", e.to_string().trim_end().to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        let msg = e.into_inner().message().to_string();
        bad(&path, msg)
    })
}

/// `base/rel` with `.` and `..` folded lexically.
fn join_clean(base: &Path, rel: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in base.join(rel).components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if matches!(out.components().next_back(), Some(Component::Normal(_))) => {
                out.pop();
            }
            other => out.push(other.as_os_str()),
        }
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    out
}

fn read_file(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| bad("", format!("cannot read {}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Mnist,
    Synth,
    Dir,
}

/// Where the images come from and how they are dealt to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: SourceKind,
    /// IDX image and label files (`mnist`); gzip is detected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Class-balanced prefix of this many images (`mnist`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    /// Pre-partitioned client tree (`dir`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Synthetic sample count (`synth`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_clients: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_per_client: Option<usize>,
    /// Classes per client; 0 is IID.
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub size_jitter: f64,
}

impl DatasetConfig {
    pub fn synth(samples: usize, classes: usize, side: usize, n_clients: usize, max_per_client: usize) -> Self {
        Self {
            source: SourceKind::Synth,
            images: None,
            labels: None,
            subset: None,
            root: None,
            samples: Some(samples),
            classes: Some(classes),
            side: Some(side),
            noise: Some(SYNTH_NOISE),
            n_clients: Some(n_clients),
            max_per_client: Some(max_per_client),
            k: 0,
            size_jitter: 0.0,
        }
    }

    pub fn mnist(images: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        Self {
            source: SourceKind::Mnist,
            images: Some(images.into()),
            labels: Some(labels.into()),
            samples: None,
            classes: None,
            side: None,
            noise: None,
            ..Self::synth(0, 0, 0, 0, 0)
        }
    }

    pub fn partition_plan(&self, base_seed: u64) -> Option<PartitionPlan> {
        Some(PartitionPlan {
            mode: if self.k == 0 {
                PartitionMode::Iid
            } else {
                PartitionMode::KClass { k: self.k }
            },
            n_clients: self.n_clients?,
            max_per_client: self.max_per_client?,
            seed: seed::mix_str(base_seed, "partition"),
            size_jitter: self.size_jitter,
        })
    }

    /// `partitioned` requires client counts (run, sweep, baselines); the
    /// attack campaign reads the pool without dealing it out.
    fn resolve(&mut self, base_dir: &Path, partitioned: bool) -> Result<(), ConfigError> {
        let abs = |p: &mut Option<PathBuf>, field: &str| -> Result<(), ConfigError> {
            let path = p.as_mut().ok_or_else(|| bad(&format!("dataset.{field}"), "required for this source"))?;
            if path.is_relative() {
                *path = join_clean(base_dir, path);
            }
            if !path.exists() {
                return Err(bad(&format!("dataset.{field}"), format!("{} does not exist", path.display())));
            }
            Ok(())
        };
        match self.source {
            SourceKind::Mnist => {
                abs(&mut self.images, "images")?;
                abs(&mut self.labels, "labels")?;
                if self.subset == Some(0) {
                    return Err(bad("dataset.subset", "must be positive"));
                }
            }
            SourceKind::Dir => {
                abs(&mut self.root, "root")?;
                if self.classes.unwrap_or(0) == 0 {
                    return Err(bad("dataset.classes", "required for dir sources"));
                }
            }
            SourceKind::Synth => {
                let samples = self.samples.ok_or_else(|| bad("dataset.samples", "required for synth sources"))?;
                let classes = self.classes.ok_or_else(|| bad("dataset.classes", "required for synth sources"))?;
                if samples == 0 {
                    return Err(bad("dataset.samples", "must be positive"));
                }
                if classes < 2 {
                    return Err(bad("dataset.classes", "need at least 2 classes"));
                }
                let side = *self.side.get_or_insert(28);
                if side == 0 {
                    return Err(bad("dataset.side", "must be positive"));
                }
                let noise = *self.noise.get_or_insert(SYNTH_NOISE);
                if !(noise.is_finite() && noise >= 0.0) {
                    return Err(bad("dataset.noise", "must be finite and non-negative"));
                }
            }
        }
        if partitioned && self.source != SourceKind::Dir {
            match self.n_clients {
                None => return Err(bad("dataset.n_clients", "required")),
                Some(0) => return Err(bad("dataset.n_clients", "must be positive")),
                _ => {}
            }
            match self.max_per_client {
                None => return Err(bad("dataset.max_per_client", "required")),
                Some(0) => return Err(bad("dataset.max_per_client", "must be positive")),
                _ => {}
            }
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err(bad("dataset.size_jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Mlp,
    Lenet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: ModelName,
    /// Hidden widths of the MLP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::mlp(&[64, 64])
    }
}

impl ModelConfig {
    pub fn mlp(hidden: &[usize]) -> Self {
        Self {
            name: ModelName::Mlp,
            hidden: Some(hidden.to_vec()),
            dropout: 0.0,
        }
    }

    pub fn lenet() -> Self {
        Self {
            name: ModelName::Lenet,
            hidden: None,
            dropout: 0.0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.name {
            ModelName::Mlp => "MLP",
            ModelName::Lenet => "LeNet",
        }
    }

    pub fn build(&self, input: [usize; 3], n_classes: usize) -> Result<ModelSpec, ConfigError> {
        let spec = match self.name {
            ModelName::Mlp => ModelSpec::mlp(input, self.hidden.as_deref().unwrap_or(&[64, 64]), n_classes, self.dropout),
            ModelName::Lenet => ModelSpec::lenet(input, n_classes).map_err(|e| bad("model", e.to_string()))?,
        };
        spec.validate().map_err(|e| bad("model", e.to_string()))?;
        Ok(spec)
    }

    fn resolve(&mut self, path: &str) -> Result<(), ConfigError> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad(&format!("{path}.dropout"), "must lie in [0, 1)"));
        }
        match self.name {
            ModelName::Mlp => {
                let h = self.hidden.get_or_insert_with(|| vec![64, 64]);
                if h.contains(&0) {
                    return Err(bad(&format!("{path}.hidden"), "widths must be positive"));
                }
            }
            ModelName::Lenet => {
                if self.hidden.is_some() {
                    return Err(bad(&format!("{path}.hidden"), "only applies to mlp"));
                }
                if self.dropout != 0.0 {
                    return Err(bad(&format!("{path}.dropout"), "only applies to mlp"));
                }
            }
        }
        Ok(())
    }
}

/// Local-only and centralized reference training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Defaults to the strategy optimizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default = "default_baseline_batch")]
    pub batch: BatchSize,
    #[serde(default = "default_baseline_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_baseline_patience")]
    pub patience: usize,
}

fn yes() -> bool {
    true
}

fn default_baseline_batch() -> BatchSize {
    BatchSize::Size(32)
}

fn default_baseline_epochs() -> usize {
    100
}

fn default_baseline_patience() -> usize {
    5
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            optimizer: None,
            batch: default_baseline_batch(),
            max_epochs: default_baseline_epochs(),
            patience: default_baseline_patience(),
        }
    }
}

impl BaselineConfig {
    pub fn train_config(&self, base_seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.expect("resolved config"),
            batch: self.batch,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: seed::mix_str(base_seed, "baselines"),
        }
    }
}

fn default_spf() -> f64 {
    DEFAULT_SECONDS_PER_FLOP
}

/// Axis lists of a grid sweep. An empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub strategy: Vec<StrategyName>,
    #[serde(rename = "B", default)]
    pub batch: Vec<BatchSize>,
    #[serde(rename = "C", default)]
    pub fraction: Vec<f64>,
    #[serde(rename = "E", default)]
    pub epochs: Vec<usize>,
    #[serde(default)]
    pub lr: Vec<f64>,
    #[serde(default)]
    pub optimizer: Vec<OptimizerKind>,
    /// Partition k values; 0 is IID.
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default = "one")]
    pub repeats: usize,
    /// Accuracy-loss tolerance of the summary's selection rule.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn one() -> usize {
    1
}

fn default_delta() -> f64 {
    0.01
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            strategy: Vec::new(),
            batch: Vec::new(),
            fraction: Vec::new(),
            epochs: Vec::new(),
            lr: Vec::new(),
            optimizer: Vec::new(),
            k: Vec::new(),
            repeats: 1,
            delta: default_delta(),
        }
    }
}

/// One federated experiment, optionally with a sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    /// Base seed; partition, initialization, strategy and baseline seeds
    /// derive from it.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub network: NetworkModel,
    #[serde(default)]
    pub stop: StopConfig,
    #[serde(default)]
    pub durations: DurationMode,
    #[serde(default = "default_spf")]
    pub seconds_per_flop: f64,
    /// Validate only on the round's participants.
    #[serde(default)]
    pub lazy: bool,
    #[serde(default)]
    pub quantize_on_wire: bool,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    /// Small synthetic FedSGD setup, handy as a starting point.
    pub fn synth_default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            seed: 0,
            dataset: DatasetConfig::synth(400, 4, 8, 4, 100),
            model: ModelConfig::mlp(&[32]),
            strategy: StrategyConfig::fedsgd(OptimizerConfig::adam(0.01), 0),
            network: NetworkModel::default(),
            stop: StopConfig {
                max_round: 20,
                patience: 5,
                target_val_acc: None,
            },
            durations: DurationMode::Simulated,
            seconds_per_flop: DEFAULT_SECONDS_PER_FLOP,
            lazy: false,
            quantize_on_wire: false,
            baselines: BaselineConfig::default(),
            output: None,
            sweep: None,
        }
    }

    /// Reads and resolves a config file; relative paths are taken from the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = parse_toml(&read_file(path)?)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        parse_toml::<Self>(text)?.resolve(base_dir)
    }

    /// Validates and materializes every default. Idempotent.
    pub fn resolve(mut self, base_dir: &Path) -> Result<Self, ConfigError> {
        if self.schema != SCHEMA_VERSION {
            return Err(bad("schema", format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema)));
        }
        self.dataset.resolve(base_dir, true)?;
        self.model.resolve("model")?;
        self.strategy = self.strategy.resolved().map_err(|m| split_path(&m, "strategy"))?;
        if !matches!(self.strategy.name, StrategyName::Fedsgd | StrategyName::Fedavg) {
            return Err(bad("strategy.name", "must be fedsgd or fedavg"));
        }
        self.strategy.seed = seed::mix_str(self.seed, "strategy");
        self.network.validate().map_err(|m| bad("network", m))?;
        if let Some(t) = self.stop.target_val_acc {
            if !(0.0..=1.0).contains(&t) {
                return Err(bad("stop.target_val_acc", "must lie in [0, 1]"));
            }
        }
        if !(self.seconds_per_flop.is_finite() && self.seconds_per_flop > 0.0) {
            return Err(bad("seconds_per_flop", "must be positive"));
        }
        let b = &mut self.baselines;
        let opt = *b.optimizer.get_or_insert(self.strategy.optimizer);
        opt.validate().map_err(|m| bad("baselines.optimizer", m))?;
        if b.max_epochs == 0 {
            return Err(bad("baselines.max_epochs", "must be at least 1"));
        }
        if let Some(s) = &self.sweep {
            validate_sweep(s)?;
        }
        if let Some(out) = &mut self.output {
            if out.is_relative() {
                *out = join_clean(base_dir, out);
            }
        }
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.strategy.seed = seed::mix_str(seed, "strategy");
        self
    }

    pub fn iid_k(&self) -> usize {
        self.dataset.k
    }

    /// Serialized back to the config file format.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }
}

/// `strategy.C must be ...` becomes path `strategy.C`.
fn split_path(message: &str, prefix: &str) -> ConfigError {
    match message.split_once(' ') {
        Some((head, rest)) if head.starts_with(prefix) => bad(head.trim_end_matches(':'), rest),
        _ => bad(prefix, message),
    }
}

fn validate_sweep(s: &SweepSpec) -> Result<(), ConfigError> {
    if s.repeats == 0 {
        return Err(bad("sweep.repeats", "must be at least 1"));
    }
    if let Some(c) = s.fraction.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(bad("sweep.C", format!("values must be in (0, 1], got {c}")));
    }
    if s.epochs.contains(&0) {
        return Err(bad("sweep.E", "values must be at least 1"));
    }
    if let Some(lr) = s.lr.iter().find(|lr| !(lr.is_finite() && **lr >= 0.0)) {
        return Err(bad("sweep.lr", format!("values must be finite and non-negative, got {lr}")));
    }
    if s.strategy.iter().any(|n| !matches!(n, StrategyName::Fedsgd | StrategyName::Fedavg)) {
        return Err(bad("sweep.strategy", "values must be fedsgd or fedavg"));
    }
    if !(s.delta > 0.0) {
        return Err(bad("sweep.delta", "must be positive"));
    }
    Ok(())
}

/// Label oracle used to score analytic-attack reconstructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_oracle_model")]
    pub model: ModelConfig,
    #[serde(default = "default_oracle_train")]
    pub train: TrainConfig,
}

fn default_oracle_model() -> ModelConfig {
    ModelConfig::lenet()
}

fn default_oracle_train() -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig::adam(1e-3),
        batch: BatchSize::Size(32),
        max_epochs: 15,
        patience: 3,
        seed: 0,
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            model: default_oracle_model(),
            train: default_oracle_train(),
        }
    }
}

/// A grid of gradient-inversion attacks on single-client updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackCampaignConfig {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    /// Image pool. The first 80% trains the label oracle, the next 10%
    /// validates it and the last 10% tests it and supplies the victims.
    pub dataset: DatasetConfig,
    #[serde(default = "default_attack_model")]
    pub model: ModelConfig,
    pub attacks: Vec<AttackKind>,
    #[serde(default = "default_attack_strategies")]
    pub strategies: Vec<StrategyName>,
    pub n_images: Vec<usize>,
    /// Local epochs of FedAvg victims; FedSGD victims always take one step.
    #[serde(default = "default_attack_epochs")]
    pub epochs: Vec<usize>,
    /// Local batch of FedAvg victims.
    #[serde(default = "default_attack_batch")]
    pub batch: BatchSize,
    #[serde(default = "default_victim_lr")]
    pub victim_lr: f64,
    #[serde(default = "one")]
    pub seeds: usize,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub settings: AttackSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn default_attack_model() -> ModelConfig {
    ModelConfig::mlp(&[512, 512])
}

fn default_attack_strategies() -> Vec<StrategyName> {
    vec![StrategyName::Fedsgd]
}

fn default_attack_epochs() -> Vec<usize> {
    vec![1]
}

fn default_attack_batch() -> BatchSize {
    BatchSize::Size(1)
}

fn default_victim_lr() -> f64 {
    0.01
}

impl AttackCampaignConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = parse_toml(&read_file(path)?)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        parse_toml::<Self>(text)?.resolve(base_dir)
    }

    pub fn resolve(mut self, base_dir: &Path) -> Result<Self, ConfigError> {
        if self.schema != SCHEMA_VERSION {
            return Err(bad("schema", format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema)));
        }
        if self.dataset.source == SourceKind::Dir {
            return Err(bad("dataset.source", "attacks need an image pool (mnist or synth)"));
        }
        self.dataset.resolve(base_dir, false)?;
        self.model.resolve("model")?;
        self.oracle.model.resolve("oracle.model")?;
        if self.attacks.is_empty() {
            return Err(bad("attacks", "list at least one attack"));
        }
        if self.n_images.is_empty() || self.n_images.contains(&0) {
            return Err(bad("n_images", "list positive image counts"));
        }
        if self.strategies.is_empty() || self.strategies.iter().any(|n| !matches!(n, StrategyName::Fedsgd | StrategyName::Fedavg)) {
            return Err(bad("strategies", "list fedsgd and/or fedavg"));
        }
        if self.epochs.is_empty() || self.epochs.contains(&0) {
            return Err(bad("epochs", "list positive epoch counts"));
        }
        if !(self.victim_lr.is_finite() && self.victim_lr > 0.0) {
            return Err(bad("victim_lr", "must be positive"));
        }
        if self.seeds == 0 {
            return Err(bad("seeds", "must be at least 1"));
        }
        self.oracle
            .train
            .optimizer
            .validate()
            .map_err(|m| bad("oracle.train.optimizer", m))?;
        if let Some(out) = &mut self.output {
            if out.is_relative() {
                *out = join_clean(base_dir, out);
            }
        }
        Ok(self)
    }
}
