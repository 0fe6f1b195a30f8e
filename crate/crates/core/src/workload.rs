//! Ramped multi-class Poisson workload and trace replay.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::engine::RandomStream;
use crate::error::SimError;
use crate::units::{DataOp, Seconds};

/// One function type of the workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    #[serde(default = "default_exec_time")]
    pub exec_time: Seconds,
    /// Peak arrival rate Λ, events/s.
    #[serde(default)]
    pub peak_rate: f64,
    #[serde(default = "default_ramp")]
    pub ramp_duration: Seconds,
    #[serde(default = "default_true")]
    pub stop_after_ramp: bool,
    /// Constant-rate tail after the ramp when `stop_after_ramp` is false.
    #[serde(default)]
    pub hold_duration: Seconds,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub data_ops: Vec<DataOp>,
    /// Per-class NOAH waiting-time threshold; falls back to the scheduler's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Seconds>,
}

fn default_exec_time() -> Seconds {
    Seconds(0.2)
}

fn default_ramp() -> Seconds {
    Seconds(20.0)
}

fn default_true() -> bool {
    true
}

impl ClassSpec {
    pub fn new(name: impl Into<String>, peak_rate: f64) -> Self {
        Self {
            name: name.into(),
            exec_time: default_exec_time(),
            peak_rate,
            ramp_duration: default_ramp(),
            stop_after_ramp: true,
            hold_duration: Seconds(0.0),
            data_ops: Vec::new(),
            alpha: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.peak_rate >= 0.0) || !self.peak_rate.is_finite() {
            return Err(SimError::Scenario(format!(
                "class `{}`: peak_rate must be >= 0",
                self.name
            )));
        }
        if !(self.exec_time.0 > 0.0) {
            return Err(SimError::Scenario(format!(
                "class `{}`: exec_time must be > 0",
                self.name
            )));
        }
        if !(self.ramp_duration.0 >= 0.0) || !(self.hold_duration.0 >= 0.0) {
            return Err(SimError::Scenario(format!(
                "class `{}`: durations must be >= 0",
                self.name
            )));
        }
        Ok(())
    }

    /// Arrival rate in the whole-second step containing `t`: the rate climbs
    /// by Λ/ramp each second and reaches Λ in the last step of the ramp.
    pub fn rate_at(&self, t: f64) -> f64 {
        let ramp = self.ramp_duration.0;
        if t < 0.0 {
            return 0.0;
        }
        if t < ramp {
            let steps = ramp.ceil().max(1.0);
            let step = (t.floor() + 1.0).min(steps);
            return self.peak_rate * step / steps;
        }
        if !self.stop_after_ramp && t < ramp + self.hold_duration.0 {
            return self.peak_rate;
        }
        0.0
    }

    fn end_time(&self) -> f64 {
        if self.stop_after_ramp {
            self.ramp_duration.0
        } else {
            self.ramp_duration.0 + self.hold_duration.0
        }
    }
}

/// Arrival times of one class: a Poisson process that is homogeneous within
/// each one-second segment.
pub fn generate_arrivals(spec: &ClassSpec, stream: &mut RandomStream) -> Vec<f64> {
    let mut out = Vec::new();
    if spec.peak_rate <= 0.0 {
        return out;
    }
    let end = spec.end_time();
    let mut seg_start = 0.0;
    while seg_start < end {
        let seg_end = (seg_start.floor() + 1.0).min(end);
        let rate = spec.rate_at(seg_start);
        if rate > 0.0 {
            let mut t = seg_start;
            loop {
                t += stream.exponential(rate);
                if t >= seg_end {
                    break;
                }
                if out.last().is_some_and(|&last| t <= last) {
                    continue;
                }
                out.push(t);
            }
        }
        seg_start = seg_end;
    }
    out
}

/// Peak offered load of a class set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfferedLoad {
    /// Σ Λ_k, events/s.
    pub peak_rate: f64,
    /// Σ Λ_k · exec_time_k divided by total cores.
    pub utilization: f64,
}

pub fn total_offered_load(specs: &[ClassSpec], total_cores: u32) -> OfferedLoad {
    let peak_rate = specs.iter().map(|s| s.peak_rate).sum();
    let demand: f64 = specs.iter().map(|s| s.peak_rate * s.exec_time.0).sum();
    let utilization = if total_cores == 0 {
        0.0
    } else {
        demand / f64::from(total_cores)
    };
    OfferedLoad { peak_rate, utilization }
}

/// One line of a replayed arrival trace.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct TraceArrival {
    pub time: f64,
    pub class: String,
}

/// Parses `time_seconds,class_name` lines. No header.
pub fn read_trace<R: Read>(reader: R) -> Result<Vec<TraceArrival>, SimError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out = Vec::new();
    for (line, rec) in rdr.deserialize::<(f64, String)>().enumerate() {
        let (time, class) = rec.map_err(|e| SimError::Scenario(format!("trace line {}: {e}", line + 1)))?;
        if !(time >= 0.0) || !time.is_finite() {
            return Err(SimError::Scenario(format!("trace line {}: bad time {time}", line + 1)));
        }
        out.push(TraceArrival { time, class });
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(out)
}
