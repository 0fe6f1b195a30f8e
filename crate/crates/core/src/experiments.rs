//! Run metrics, summary rows and the parameter sweep harness.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ContainerRecord;
use crate::error::SimError;
use crate::scenario::{Scenario, SchedulerSpec};
use crate::sim::{run_scenario, RunOptions, RunOutput};

/// Busy time over lifetime, summed over containers. A container's lifetime
/// ends at its last processed event; one that never served counts its setup
/// time with zero busy time.
pub fn container_utilization(records: &[ContainerRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let (busy, life) = records.iter().fold((0.0, 0.0), |(b, l), r| {
        let lifetime = if r.served > 0 {
            r.last_active_end - r.created_at
        } else {
            r.setup_duration
        };
        (b + r.busy_time_total, l + lifetime)
    });
    if life > 0.0 {
        Some((busy / life).clamp(0.0, 1.0))
    } else {
        None
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub lambda: f64,
    pub scheduler: String,
    pub seed: u64,
    pub cold_starts: u64,
    pub hosts_employed: usize,
    pub mean_response_s: f64,
    pub container_utilization: Option<f64>,
    pub p50_response_s: f64,
    pub p95_response_s: f64,
    pub p99_response_s: f64,
    pub total_events: usize,
    pub completions: usize,
    /// Arrival to execution start: dispatch, queueing and setup.
    pub mean_wait_s: f64,
    /// Execution start to completion.
    pub mean_exec_s: f64,
    pub cold_fraction: f64,
    pub random_fallbacks: u64,
    pub final_time_s: f64,
    pub trace_digest: String,
    pub error: Option<String>,
}

impl RunSummary {
    fn failed(lambda: f64, scheduler: String, seed: u64, err: String) -> Self {
        Self {
            lambda,
            scheduler,
            seed,
            cold_starts: 0,
            hosts_employed: 0,
            mean_response_s: 0.0,
            container_utilization: None,
            p50_response_s: 0.0,
            p95_response_s: 0.0,
            p99_response_s: 0.0,
            total_events: 0,
            completions: 0,
            mean_wait_s: 0.0,
            mean_exec_s: 0.0,
            cold_fraction: 0.0,
            random_fallbacks: 0,
            final_time_s: 0.0,
            trace_digest: String::new(),
            error: Some(err),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    /// The row as a CSV line, with header.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(self).expect("serializable");
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf8")
    }
}

pub fn summarize(run: &RunOutput, lambda: f64) -> RunSummary {
    let done: Vec<_> = run.invocations.iter().filter(|i| i.completion.is_some()).collect();
    let mut responses: Vec<f64> = done
        .iter()
        .map(|i| i.completion.unwrap_or_default() - i.arrival)
        .collect();
    responses.sort_by(f64::total_cmp);
    RunSummary {
        lambda,
        scheduler: run.scheduler.clone(),
        seed: run.seed,
        cold_starts: run.containers_created,
        hosts_employed: run.hosts_employed,
        mean_response_s: mean(responses.iter().copied()),
        container_utilization: container_utilization(&run.records),
        p50_response_s: percentile(&responses, 50.0),
        p95_response_s: percentile(&responses, 95.0),
        p99_response_s: percentile(&responses, 99.0),
        total_events: run.invocations.len(),
        completions: done.len(),
        mean_wait_s: mean(done.iter().map(|i| i.start.unwrap_or(i.arrival) - i.arrival)),
        mean_exec_s: mean(
            done.iter()
                .map(|i| i.completion.unwrap_or_default() - i.start.unwrap_or_default()),
        ),
        cold_fraction: if done.is_empty() {
            0.0
        } else {
            done.iter().filter(|i| i.cold).count() as f64 / done.len() as f64
        },
        random_fallbacks: run.random_fallbacks,
        final_time_s: run.final_time,
        trace_digest: run.digest.hex(),
        error: None,
    }
}

/// Runs one (scenario, seed) point and summarises it.
pub fn run_once(scenario: &Scenario, seed: u64, opts: RunOptions) -> Result<(RunSummary, RunOutput), SimError> {
    let out = run_scenario(scenario, seed, opts)?;
    let lambda = scenario.peak_rate().unwrap_or(f64::NAN);
    Ok((summarize(&out, lambda), out))
}

/// Grid of runs: every Λ × scheduler × seed over a base scenario.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub lambda_grid: Vec<f64>,
    pub schedulers: Vec<SchedulerSpec>,
    pub seeds: Vec<u64>,
    pub base: Scenario,
}

impl SweepSpec {
    /// Λ = 1..=80 with the six compared schedulers.
    pub fn evaluation(seeds: Vec<u64>) -> Self {
        Self {
            lambda_grid: (1..=80).map(f64::from).collect(),
            schedulers: SchedulerSpec::evaluation_set(),
            seeds,
            base: Scenario::evaluation(1.0, SchedulerSpec::ow()),
        }
    }

    pub fn points(&self) -> Vec<(f64, SchedulerSpec, u64)> {
        let mut pts = Vec::new();
        for &l in &self.lambda_grid {
            for s in &self.schedulers {
                for &seed in &self.seeds {
                    pts.push((l, s.clone(), seed));
                }
            }
        }
        pts
    }

    pub fn scenario_for(&self, lambda: f64, scheduler: &SchedulerSpec) -> Scenario {
        let mut sc = self.base.clone();
        sc.set_peak_rate(lambda);
        sc.scheduler = scheduler.clone();
        sc
    }
}

/// Runs a sweep. Rows are appended to `partial` (if given) as each point
/// finishes; the returned rows are sorted by (Λ, scheduler order, seed).
/// A failed point yields a row with `error` set and the sweep continues.
pub fn run_sweep(spec: &SweepSpec, parallel: usize, partial: Option<&Path>) -> Result<Vec<RunSummary>, SimError> {
    let sink = match partial {
        Some(p) => {
            let f = OpenOptions::new()
                .create(true)
                .truncate(true)
                .write(true)
                .open(p)
                .map_err(|e| SimError::Scenario(format!("cannot open {}: {e}", p.display())))?;
            Some(Mutex::new(csv::Writer::from_writer(f)))
        }
        None => None,
    };
    let points = spec.points();
    let run_point = |(lambda, sched, seed): &(f64, SchedulerSpec, u64)| {
        let scenario = spec.scenario_for(*lambda, sched);
        let row = match std::panic::catch_unwind(|| run_once(&scenario, *seed, RunOptions::default())) {
            Ok(Ok((row, _))) => row,
            Ok(Err(e)) => RunSummary::failed(*lambda, sched.to_string(), *seed, e.to_string()),
            Err(_) => RunSummary::failed(*lambda, sched.to_string(), *seed, "run panicked".into()),
        };
        if let Some(sink) = &sink {
            let mut w = sink.lock().expect("sink lock");
            let _ = w.serialize(&row);
            let _ = w.flush();
        }
        row
    };
    let mut rows: Vec<RunSummary> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| SimError::Scenario(format!("thread pool: {e}")))?;
        pool.install(|| points.par_iter().map(run_point).collect())
    } else {
        points.iter().map(run_point).collect()
    };
    let order = &spec.schedulers;
    rows.sort_by(|a, b| {
        let ra = order.iter().position(|s| s.to_string() == a.scheduler);
        let rb = order.iter().position(|s| s.to_string() == b.scheduler);
        a.lambda
            .total_cmp(&b.lambda)
            .then(ra.cmp(&rb))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(rows)
}

/// Writes rows as CSV with a header.
pub fn write_csv(rows: &[RunSummary], path: &Path) -> Result<(), SimError> {
    let io = |e: std::io::Error| SimError::Scenario(format!("cannot write {}: {e}", path.display()));
    let f = File::create(path).map_err(io)?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r).map_err(|e| SimError::Scenario(e.to_string()))?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<RunSummary>, SimError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SimError::Scenario(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| SimError::Scenario(e.to_string())))
        .collect()
}

/// Mean and sample standard deviation over seeds for one (Λ, scheduler).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub lambda: f64,
    pub scheduler: String,
    pub runs: usize,
    pub cold_starts_mean: f64,
    pub cold_starts_sd: f64,
    pub hosts_employed_mean: f64,
    pub hosts_employed_sd: f64,
    pub mean_response_s_mean: f64,
    pub mean_response_s_sd: f64,
    pub container_utilization_mean: f64,
    pub container_utilization_sd: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, var.sqrt())
}

/// Groups successful rows by (Λ, scheduler), preserving input order.
pub fn aggregate(rows: &[RunSummary]) -> Vec<AggregateRow> {
    let mut keys: Vec<(f64, String)> = Vec::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        if !keys.iter().any(|(l, s)| *l == r.lambda && *s == r.scheduler) {
            keys.push((r.lambda, r.scheduler.clone()));
        }
    }
    keys.into_iter()
        .map(|(lambda, scheduler)| {
            let group: Vec<&RunSummary> = rows
                .iter()
                .filter(|r| r.is_ok() && r.lambda == lambda && r.scheduler == scheduler)
                .collect();
            let col = |f: &dyn Fn(&RunSummary) -> f64| mean_sd(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (cm, cs) = col(&|r| r.cold_starts as f64);
            let (hm, hs) = col(&|r| r.hosts_employed as f64);
            let (rm, rs) = col(&|r| r.mean_response_s);
            let utils: Vec<f64> = group.iter().filter_map(|r| r.container_utilization).collect();
            let (um, us) = mean_sd(&utils);
            AggregateRow {
                lambda,
                scheduler,
                runs: group.len(),
                cold_starts_mean: cm,
                cold_starts_sd: cs,
                hosts_employed_mean: hm,
                hosts_employed_sd: hs,
                mean_response_s_mean: rm,
                mean_response_s_sd: rs,
                container_utilization_mean: um,
                container_utilization_sd: us,
            }
        })
        .collect()
}

pub fn write_aggregate(rows: &[AggregateRow], path: &Path) -> Result<(), SimError> {
    let io = |e: std::io::Error| SimError::Scenario(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_writer(File::create(path).map_err(io)?);
    for r in rows {
        w.serialize(r).map_err(|e| SimError::Scenario(e.to_string()))?;
    }
    w.flush().map_err(io)
}

/// Writes the per-event trace as JSON lines.
pub fn write_trace(run: &RunOutput, path: &Path) -> Result<(), SimError> {
    let io = |e: std::io::Error| SimError::Scenario(format!("cannot write {}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io)?);
    for rec in &run.trace {
        let line = serde_json::to_string(rec).map_err(|e| SimError::Scenario(e.to_string()))?;
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}
