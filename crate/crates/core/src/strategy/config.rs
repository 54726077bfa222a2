use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::nn::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Fedsgd,
    Fedavg,
    LocalOnly,
    Central,
}

impl StrategyName {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Fedsgd => "fedsgd",
            StrategyName::Fedavg => "fedavg",
            StrategyName::LocalOnly => "local_only",
            StrategyName::Central => "central",
        }
    }

    /// Display form used in reports and attack summaries.
    pub fn label(self) -> &'static str {
        match self {
            StrategyName::Fedsgd => "FedSGD",
            StrategyName::Fedavg => "FedAvg",
            StrategyName::LocalOnly => "LocalOnly",
            StrategyName::Central => "Central",
        }
    }
}

/// Local batch size; `Full` is the whole local training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchSize {
    Full,
    Size(usize),
}

impl BatchSize {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            BatchSize::Full => n.max(1),
            BatchSize::Size(b) => b.min(n).max(1),
        }
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Full => f.write_str("inf"),
            BatchSize::Size(b) => write!(f, "{b}"),
        }
    }
}

impl std::str::FromStr for BatchSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "inf" | "∞" | "full" => Ok(BatchSize::Full),
            other => other
                .parse::<usize>()
                .ok()
                .filter(|&b| b >= 1)
                .map(BatchSize::Size)
                .ok_or_else(|| format!("batch size must be a positive integer or \"inf\", got `{other}`")),
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("inf"),
            BatchSize::Size(b) => s.serialize_u64(*b as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = BatchSize;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive integer or \"inf\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<BatchSize, E> {
                if v == 0 {
                    return Err(E::custom("batch size must be at least 1"));
                }
                Ok(BatchSize::Size(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<BatchSize, E> {
                u64::try_from(v)
                    .map_err(|_| E::custom("batch size must be positive"))
                    .and_then(|v| self.visit_u64(v))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<BatchSize, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

fn default_batch() -> BatchSize {
    BatchSize::Full
}
fn default_one() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: StrategyName,
    #[serde(rename = "B", default = "default_batch")]
    pub batch: BatchSize,
    #[serde(rename = "C", default = "default_one")]
    pub fraction: f64,
    #[serde(rename = "E", default = "default_epochs")]
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub aggregate_moments: bool,
    #[serde(default)]
    pub seed: u64,
}

impl StrategyConfig {
    pub fn fedsgd(optimizer: OptimizerConfig, seed: u64) -> Self {
        Self {
            name: StrategyName::Fedsgd,
            batch: BatchSize::Full,
            fraction: 1.0,
            epochs: 1,
            optimizer,
            aggregate_moments: false,
            seed,
        }
    }

    pub fn fedavg(batch: usize, fraction: f64, epochs: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self {
            name: StrategyName::Fedavg,
            batch: BatchSize::Size(batch),
            fraction,
            epochs,
            optimizer,
            aggregate_moments: false,
            seed,
        }
    }

    /// Checks ranges and applies FedSGD's fixed B=inf, C=1, E=1.
    /// Errors name the offending field.
    pub fn resolved(&self) -> Result<Self, String> {
        let mut c = self.clone();
        if c.name == StrategyName::Fedsgd {
            c.batch = BatchSize::Full;
            c.fraction = 1.0;
            c.epochs = 1;
        }
        if !(c.fraction > 0.0 && c.fraction <= 1.0) {
            return Err(format!("strategy.C must be in (0, 1], got {}", c.fraction));
        }
        if c.epochs == 0 {
            return Err("strategy.E must be at least 1".into());
        }
        c.optimizer.validate().map_err(|e| format!("strategy.optimizer: {e}"))?;
        Ok(c)
    }
}
