//! Self-check battery: the queueing formulas, the processor-sharing model and
//! the best-reply solver against independent simulations and numeric oracles.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;

use crate::cluster::ProcessorShare;
use crate::engine::RandomStream;
use crate::noncoop::{best_reply, equilibrium, player_cost, residual_view, Player};
use crate::queueing::{erlang_c, expected_wait};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// Mean FCFS waiting time of an M/M/c queue, simulated with the multi-server
/// Lindley recurrence over `arrivals` customers.
pub fn simulate_mmc_wait(lambda: f64, mu: f64, servers: usize, arrivals: usize, seed: u64) -> f64 {
    let mut arr = RandomStream::new(seed, "verify/mmc/arrivals");
    let mut svc = RandomStream::new(seed, "verify/mmc/service");
    let mut free: BinaryHeap<Reverse<OrderedFloat<f64>>> = (0..servers).map(|_| Reverse(OrderedFloat(0.0))).collect();
    let mut t = 0.0;
    let warmup = arrivals / 20;
    let mut total = 0.0;
    let mut counted = 0usize;
    for n in 0..arrivals {
        t += arr.exponential(lambda);
        let Reverse(OrderedFloat(first_free)) = free.pop().expect("servers > 0");
        let start = first_free.max(t);
        free.push(Reverse(OrderedFloat(start + svc.exponential(mu))));
        if n >= warmup {
            total += start - t;
            counted += 1;
        }
    }
    total / counted as f64
}

/// Mean response time of an M/M/1 processor-sharing queue on one core.
pub fn simulate_mm1_ps_response(lambda: f64, mu: f64, arrivals: usize, seed: u64) -> f64 {
    let mut arr = RandomStream::new(seed, "verify/ps/arrivals");
    let mut svc = RandomStream::new(seed, "verify/ps/service");
    let mut ps: ProcessorShare<f64> = ProcessorShare::new(1);
    let mut next_arrival = arr.exponential(lambda);
    let mut issued = 0usize;
    let mut key = 0u64;
    let warmup = arrivals / 20;
    let mut total = 0.0;
    let mut counted = 0usize;
    loop {
        let next_done = ps.next_completion();
        match next_done {
            Some(d) if issued >= arrivals || d <= next_arrival => {
                for (k, arrived) in ps.pop_due(d) {
                    if k as usize >= warmup {
                        total += d - arrived;
                        counted += 1;
                    }
                }
            }
            _ if issued < arrivals => {
                let now = next_arrival;
                ps.insert(now, key, svc.exponential(mu), now);
                key += 1;
                issued += 1;
                next_arrival = now + arr.exponential(lambda);
            }
            _ => break,
        }
    }
    total / counted as f64
}

/// Exact best reply by bisection on the Lagrange multiplier of
/// `min Σ x/(r-x)` subject to `Σ x = λ`, `0 <= x < r`.
pub fn best_reply_oracle(lambda: f64, residual: &[f64]) -> Vec<f64> {
    let flows = |nu: f64| -> Vec<f64> {
        residual
            .iter()
            .map(|&r| if r > 0.0 { (r - (r / nu).sqrt()).max(0.0) } else { 0.0 })
            .collect()
    };
    let total = |nu: f64| flows(nu).iter().sum::<f64>();
    let (mut lo, mut hi) = (1e-12_f64, 1.0_f64);
    while total(hi) < lambda {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    for _ in 0..400 {
        let mid = (lo * hi).sqrt();
        if total(mid) < lambda {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    flows(hi)
}

fn mmc_checks(quick: bool) -> Vec<Check> {
    let arrivals = if quick { 200_000 } else { 1_000_000 };
    [(5.0, 5.0, 2u32), (12.0, 5.0, 3), (40.0, 5.0, 10), (2.5, 5.0, 1)]
        .iter()
        .map(|&(lambda, mu, c)| {
            let analytic = expected_wait(c, lambda, mu).expect("stable");
            let simulated = simulate_mmc_wait(lambda, mu, c as usize, arrivals, 17);
            let rel = (simulated - analytic).abs() / analytic;
            Check::new(
                format!("M/M/{c} wait (lambda={lambda}, mu={mu})"),
                rel <= 0.05,
                format!("analytic {analytic:.6} simulated {simulated:.6} rel.err {rel:.4}"),
            )
        })
        .collect()
}

fn closed_form_checks() -> Vec<Check> {
    let c21 = erlang_c(2, 1.0).expect("valid");
    let mut worst: f64 = 0.0;
    for i in 1..100 {
        let rho = f64::from(i) / 100.0;
        worst = worst.max((erlang_c(1, rho).expect("valid") - rho).abs());
    }
    vec![
        Check::new(
            "Erlang C(2, 1) = 1/3",
            (c21 - 1.0 / 3.0).abs() <= 1e-12,
            format!("{c21:.15}"),
        ),
        Check::new(
            "Erlang C(1, rho) = rho",
            worst <= 1e-12,
            format!("max abs err {worst:.3e}"),
        ),
    ]
}

fn ps_check(quick: bool) -> Check {
    let arrivals = if quick { 100_000 } else { 400_000 };
    let (lambda, mu) = (2.5, 5.0);
    let analytic = (1.0 / mu) / (1.0 - lambda / mu);
    let simulated = simulate_mm1_ps_response(lambda, mu, arrivals, 23);
    let rel = (simulated - analytic).abs() / analytic;
    Check::new(
        "M/M/1-PS response (rho=0.5)",
        rel <= 0.05,
        format!("analytic {analytic:.6} simulated {simulated:.6} rel.err {rel:.4}"),
    )
}

fn best_reply_check(instances: usize) -> Check {
    let mut rng = RandomStream::new(99, "verify/best-reply");
    let mut worst: f64 = 0.0;
    let mut cost_gap: f64 = 0.0;
    for _ in 0..instances {
        let n = 1 + rng.index(8);
        let residual: Vec<f64> = (0..n).map(|_| 0.5 + 20.0 * rng.uniform()).collect();
        let cap: f64 = residual.iter().sum();
        let lambda = cap * (0.01 + 0.97 * rng.uniform());
        let ours = best_reply(lambda, &residual).expect("feasible");
        let oracle = best_reply_oracle(lambda, &residual);
        for (a, b) in ours.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        cost_gap = cost_gap.max(player_cost(&ours, &residual) - player_cost(&oracle, &residual));
    }
    Check::new(
        format!("best reply vs multiplier bisection ({instances} instances)"),
        worst <= 1e-4 && cost_gap <= 1e-6,
        format!("max flow diff {worst:.3e}, max cost excess {cost_gap:.3e}"),
    )
}

fn equilibrium_check() -> Check {
    let cores = vec![16.0, 12.0, 8.0, 16.0, 4.0, 16.0, 10.0, 16.0, 6.0, 16.0];
    let players: Vec<Player> = (0..10)
        .map(|k| Player {
            lambda: 2.0 + 6.0 * f64::from(k),
            mu: 4.0 + f64::from(k % 3),
        })
        .collect();
    let eq = equilibrium(&players, &cores, 1e-6, 200);
    let mut worst: f64 = 0.0;
    for k in 0..players.len() {
        let residual = residual_view(k, &players, &eq.flows, &cores);
        let reply = best_reply(players[k].lambda, &residual).expect("feasible");
        for (a, b) in reply.iter().zip(&eq.flows[k]) {
            worst = worst.max((a - b).abs() / players[k].lambda);
        }
    }
    Check::new(
        "noncooperative equilibrium is a fixed point",
        eq.converged && worst <= 1e-4,
        format!(
            "converged={} rounds={} max deviation {worst:.3e}",
            eq.converged, eq.rounds
        ),
    )
}

/// Runs the battery. `quick` shortens the simulations.
pub fn run_checks(quick: bool) -> Vec<Check> {
    let mut out = closed_form_checks();
    out.extend(mmc_checks(quick));
    out.push(ps_check(quick));
    out.push(best_reply_check(100));
    out.push(equilibrium_check());
    out
}
