use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

/// Simulated time in integer nanoseconds, so sums are exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimDuration(pub u64);

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub fn from_secs_f64(s: f64) -> Self {
        SimDuration((s.max(0.0) * 1e9).round() as u64)
    }

    pub fn from_std(d: std::time::Duration) -> Self {
        SimDuration(d.as_nanos() as u64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn nanos(self) -> u64 {
        self.0
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: Self) -> Self {
        SimDuration(self.0 + rhs.0)
    }
}

impl AddAssign for SimDuration {
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl Sum for SimDuration {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(SimDuration::ZERO, Add::add)
    }
}

/// Where compute-step durations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationMode {
    /// Wall clock of the actual computation.
    Measured,
    /// Cost model: seconds per floating-point operation times a FLOP estimate.
    #[default]
    Simulated,
}

impl DurationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DurationMode::Measured => "measured",
            DurationMode::Simulated => "simulated",
        }
    }
}

impl std::str::FromStr for DurationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "measured" => Ok(Self::Measured),
            "simulated" => Ok(Self::Simulated),
            other => Err(format!("unknown durations mode `{other}` (expected measured or simulated)")),
        }
    }
}

/// Seconds charged per FLOP in simulated mode.
pub const DEFAULT_SECONDS_PER_FLOP: f64 = 1e-9;
