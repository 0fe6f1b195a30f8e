//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use noah_sim::engine::RandomStream;
use noah_sim::ow::{self, OwConfig, Selection};

fn coprime(a: usize, b: usize) -> bool {
    (2..=a.min(b)).all(|d| !a.is_multiple_of(d) || !b.is_multiple_of(d))
}

/// Greedy coprime generator set, computed by trial division.
pub fn generators_oracle(n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for i in 1..=n {
        if out.iter().all(|&g| coprime(i, g)) {
            out.push(i);
        }
    }
    out
}

/// Probe walk by repeated addition of the step, level by level.
pub fn probe_oracle(hash: u64, gens: &[usize], active: &[u32], cfg: &OwConfig) -> Option<Selection> {
    let n = active.len();
    let step = gens[(hash % gens.len() as u64) as usize] % n;
    let home = (hash % n as u64) as usize;
    for level in 1..=cfg.escalation_max_multiplier {
        let mut x = home;
        for _ in 0..n {
            if active[x] < cfg.busy_threshold * level {
                return Some(Selection::Probed { site: x, level });
            }
            x = (x + step) % n;
        }
    }
    None
}

/// Compares `ow::probe` with the oracle on random instances; returns the
/// number of mismatches and the first one.
pub fn ow_mismatches(instances: usize, seed: u64) -> (usize, Option<String>) {
    let mut rng = RandomStream::new(seed, "tests/ow-oracle");
    let mut bad = 0;
    let mut first = None;
    for _ in 0..instances {
        let n = 1 + rng.index(24);
        let cfg = OwConfig {
            busy_threshold: 1 + rng.index(20) as u32,
            escalation_max_multiplier: 1 + rng.index(4) as u32,
        };
        let top = cfg.busy_threshold * cfg.escalation_max_multiplier;
        let active: Vec<u32> = (0..n).map(|_| rng.index(top as usize + 2) as u32).collect();
        let hash = ((rng.uniform() * u32::MAX as f64) as u64) << 16 | rng.index(65536) as u64;
        let gens = ow::build_generators(n);
        let got = ow::probe(hash, &gens, &active, &cfg);
        let want = probe_oracle(hash, &generators_oracle(n), &active, &cfg);
        if gens != generators_oracle(n) || got != want {
            bad += 1;
            first.get_or_insert_with(|| format!("n={n} hash={hash} active={active:?}: {got:?} vs {want:?}"));
        }
    }
    (bad, first)
}

/// Least-squares fit `y = a + b x`; returns `(a, b, r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - a - b * xi).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|yi| (yi - my).powi(2)).sum();
    (a, b, 1.0 - ss_res / ss_tot)
}

/// Erlang C from the finite sum `Σ_{k<c} a^k/k!` and the tail term.
pub fn erlang_c_sum(c: u32, a: f64) -> f64 {
    let mut term = 1.0;
    let mut head = 0.0;
    for k in 0..c {
        head += term;
        term *= a / f64::from(k + 1);
    }
    let tail = term * f64::from(c) / (f64::from(c) - a);
    tail / (head + tail)
}

/// Minimises `Σ x_i/(r_i - x_i)` subject to `Σ x_i = lambda`, `0 <= x_i < r_i`
/// by repeated exact two-coordinate exchanges.
pub fn min_cost_split(lambda: f64, residual: &[f64]) -> Vec<f64> {
    let n = residual.len();
    let cap: f64 = residual.iter().sum();
    let mut x: Vec<f64> = residual.iter().map(|r| lambda * r / cap).collect();
    let marginal = |r: f64, v: f64| r / (r - v).powi(2);
    for _ in 0..20_000 {
        let mut moved: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let (ri, rj) = (residual[i], residual[j]);
                let s = x[i] + x[j];
                let mut lo = (s - rj * (1.0 - 1e-15)).max(0.0);
                let mut hi = s.min(ri * (1.0 - 1e-15));
                if marginal(ri, lo) >= marginal(rj, s - lo) {
                    hi = lo;
                } else if marginal(ri, hi) <= marginal(rj, s - hi) {
                    lo = hi;
                }
                for _ in 0..200 {
                    if hi - lo <= 1e-16 * s.max(1.0) {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    if marginal(ri, mid) < marginal(rj, s - mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let a = 0.5 * (lo + hi);
                moved = moved.max((a - x[i]).abs());
                x[i] = a;
                x[j] = s - a;
            }
        }
        if moved < 1e-13 {
            break;
        }
    }
    x
}
