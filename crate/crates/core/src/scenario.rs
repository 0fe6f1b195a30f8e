//! Scenario files: strict TOML with unit-suffixed durations and sizes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterConfig, DataItemSpec};
use crate::engine::fnv1a64;
use crate::error::SimError;
use crate::noah::NoahConfig;
use crate::noncoop::NoncoopConfig;
use crate::ow::OwConfig;
use crate::units::Seconds;
use crate::workload::ClassSpec;

/// Scheduler selection with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum SchedulerSpec {
    Ow {
        #[serde(default = "default_busy")]
        busy_threshold: u32,
    },
    Noncoop {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_round_cap")]
        round_cap: usize,
        #[serde(default = "default_recompute")]
        recompute_period: Seconds,
    },
    Noah {
        #[serde(default = "default_alpha")]
        alpha: Seconds,
        #[serde(default = "default_control_period")]
        control_period: Seconds,
        #[serde(default)]
        c_min: u32,
        #[serde(default = "default_slack")]
        spawn_slack: u32,
    },
}

fn default_busy() -> u32 {
    16
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_round_cap() -> usize {
    200
}
fn default_recompute() -> Seconds {
    Seconds(1.0)
}
fn default_alpha() -> Seconds {
    Seconds(0.010)
}
fn default_control_period() -> Seconds {
    Seconds(0.1)
}
fn default_slack() -> u32 {
    2
}

impl SchedulerSpec {
    pub fn ow() -> Self {
        SchedulerSpec::Ow {
            busy_threshold: default_busy(),
        }
    }

    pub fn noncoop() -> Self {
        SchedulerSpec::Noncoop {
            epsilon: default_epsilon(),
            round_cap: default_round_cap(),
            recompute_period: default_recompute(),
        }
    }

    pub fn noah(alpha: f64) -> Self {
        SchedulerSpec::Noah {
            alpha: Seconds(alpha),
            control_period: default_control_period(),
            c_min: 0,
            spawn_slack: default_slack(),
        }
    }

    /// The six configurations compared in the evaluation sweep.
    pub fn evaluation_set() -> Vec<Self> {
        vec![
            Self::ow(),
            Self::noncoop(),
            Self::noah(10e-3),
            Self::noah(1e-3),
            Self::noah(100e-6),
            Self::noah(10e-6),
        ]
    }

    pub fn ow_config(&self) -> Option<OwConfig> {
        match self {
            SchedulerSpec::Ow { busy_threshold } => Some(OwConfig {
                busy_threshold: *busy_threshold,
                ..OwConfig::default()
            }),
            _ => None,
        }
    }

    pub fn noncoop_config(&self) -> Option<NoncoopConfig> {
        match self {
            SchedulerSpec::Noncoop {
                epsilon,
                round_cap,
                recompute_period,
            } => Some(NoncoopConfig {
                epsilon: *epsilon,
                round_cap: *round_cap,
                recompute_period: recompute_period.0,
                ..NoncoopConfig::default()
            }),
            _ => None,
        }
    }

    pub fn noah_config(&self) -> Option<NoahConfig> {
        match self {
            SchedulerSpec::Noah {
                alpha,
                control_period,
                c_min,
                spawn_slack,
            } => Some(NoahConfig {
                alpha: alpha.0,
                control_period: control_period.0,
                c_min: *c_min,
                spawn_slack: *spawn_slack,
            }),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        match self {
            SchedulerSpec::Ow { busy_threshold } if *busy_threshold == 0 => {
                Err(SimError::Scenario("ow: busy_threshold must be >= 1".into()))
            }
            SchedulerSpec::Noncoop {
                epsilon,
                round_cap,
                recompute_period,
            } if !(*epsilon > 0.0) || *round_cap == 0 || !(recompute_period.0 > 0.0) => Err(SimError::Scenario(
                "noncoop: epsilon, round_cap and recompute_period must be positive".into(),
            )),
            SchedulerSpec::Noah {
                alpha, control_period, ..
            } if !(alpha.0 > 0.0) || !(control_period.0 > 0.0) => Err(SimError::Scenario(
                "noah: alpha and control_period must be positive".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Short labels: `ow`, `noncoop`, `noah:10ms`.
impl fmt::Display for SchedulerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerSpec::Ow { busy_threshold } if *busy_threshold == default_busy() => f.write_str("ow"),
            SchedulerSpec::Ow { busy_threshold } => write!(f, "ow:{busy_threshold}"),
            SchedulerSpec::Noncoop { .. } => f.write_str("noncoop"),
            SchedulerSpec::Noah { alpha, .. } => write!(f, "noah:{}", alpha.label()),
        }
    }
}

impl FromStr for SchedulerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name, arg) {
            ("ow", None) => Ok(Self::ow()),
            ("ow", Some(a)) => Ok(SchedulerSpec::Ow {
                busy_threshold: a.parse().map_err(|_| format!("bad busy threshold `{a}`"))?,
            }),
            ("noncoop", None) => Ok(Self::noncoop()),
            ("noah", None) => Ok(Self::noah(default_alpha().0)),
            ("noah", Some(a)) => Ok(Self::noah(a.parse::<Seconds>()?.0)),
            _ => Err(format!(
                "unknown scheduler `{s}` (expected ow, noncoop or noah:<alpha>)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Half-life of the arrival-rate EWMA, seconds of simulated time.
    pub rate_half_life: Seconds,
    /// Half-life of the service and setup EWMAs, in samples.
    pub sample_half_life: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            rate_half_life: Seconds(2.0),
            sample_half_life: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default = "default_scheduler")]
    pub scheduler: SchedulerSpec,
    #[serde(default)]
    pub estimators: EstimatorConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Arrival trace (`time_seconds,class_name` per line) replacing the
    /// generated ramp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub data: Vec<DataItemSpec>,
    #[serde(default)]
    pub classes: Vec<ClassSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_scheduler() -> SchedulerSpec {
    SchedulerSpec::ow()
}

impl Scenario {
    /// The evaluation setup: ten hosts with 16 cores, ten single-threaded
    /// 200 ms functions ramping to `peak_rate` over 20 s, 500 ms setup.
    pub fn evaluation(peak_rate: f64, scheduler: SchedulerSpec) -> Self {
        Self {
            seeds: default_seeds(),
            cluster: ClusterConfig::default(),
            scheduler,
            estimators: EstimatorConfig::default(),
            output: OutputConfig::default(),
            replay: None,
            data: Vec::new(),
            classes: (0..10).map(|i| ClassSpec::new(format!("fn{i}"), peak_rate)).collect(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let sc: Scenario = toml::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Scenario(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            SimError::Scenario(m) => SimError::Scenario(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Hash of the effective configuration.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    /// Sets every class's peak rate.
    pub fn set_peak_rate(&mut self, rate: f64) {
        for c in &mut self.classes {
            c.peak_rate = rate;
        }
    }

    /// Common peak rate of the classes, if uniform.
    pub fn peak_rate(&self) -> Option<f64> {
        let first = self.classes.first()?.peak_rate;
        self.classes.iter().all(|c| c.peak_rate == first).then_some(first)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.cluster.validate()?;
        self.scheduler.validate()?;
        if self.seeds.is_empty() {
            return Err(SimError::Scenario("seeds must not be empty".into()));
        }
        if self.classes.is_empty() {
            return Err(SimError::Scenario("at least one class is required".into()));
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::Scenario("class names must be unique".into()));
        }
        for c in &self.classes {
            c.validate()?;
            for op in &c.data_ops {
                if !self.data.iter().any(|d| d.name == op.item) {
                    return Err(SimError::UnknownDataItem(op.item.clone()));
                }
            }
        }
        if !(self.estimators.rate_half_life.0 >= 0.0) || !(self.estimators.sample_half_life >= 0.0) {
            return Err(SimError::Scenario("estimator half-lives must be >= 0".into()));
        }
        Ok(())
    }
}
