//! Noncooperative load balancing. Each function class is a player that splits
//! its arrival rate across sites modelled as M/M/1 servers; iterated best
//! replies give the dispatch probabilities.

use crate::engine::RandomStream;
use crate::error::BestReplyError;

/// Fraction of the residual capacity a player may claim when its perceived
/// rate does not fit.
const FEASIBLE_SHRINK: f64 = 0.99;

/// Optimal split of `lambda` over servers with residual service rates
/// `residual`, minimising `Σ x_i / (residual_i - x_i)`.
///
/// Water-filling: sites are taken in descending residual order and the
/// largest prefix whose flows `r_i - sqrt(r_i) * t` are non-negative is used,
/// with `t = (Σ r_j - λ) / Σ sqrt(r_j)` over that prefix.
pub fn best_reply(lambda: f64, residual: &[f64]) -> Result<Vec<f64>, BestReplyError> {
    let capacity: f64 = residual.iter().filter(|r| **r > 0.0).sum();
    if lambda >= capacity {
        return Err(BestReplyError::Infeasible { lambda, capacity });
    }
    let mut out = vec![0.0; residual.len()];
    if lambda <= 0.0 {
        return Ok(out);
    }
    let mut order: Vec<usize> = (0..residual.len()).filter(|&i| residual[i] > 0.0).collect();
    order.sort_by(|&a, &b| residual[b].total_cmp(&residual[a]).then(a.cmp(&b)));

    let mut m = order.len();
    let mut sum_r: f64 = order.iter().map(|&i| residual[i]).sum();
    let mut sum_sqrt: f64 = order.iter().map(|&i| residual[i].sqrt()).sum();
    let mut t = (sum_r - lambda) / sum_sqrt;
    while m > 1 && residual[order[m - 1]].sqrt() <= t {
        let dropped = residual[order[m - 1]];
        sum_r -= dropped;
        sum_sqrt -= dropped.sqrt();
        m -= 1;
        t = (sum_r - lambda) / sum_sqrt;
    }
    for &i in &order[..m] {
        out[i] = (residual[i] - residual[i].sqrt() * t).max(0.0);
    }
    // Restore exact flow conservation lost to rounding.
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        let scale = lambda / total;
        out.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(out)
}

/// Expected number in system of one player's flows, `Σ x_i / (r_i - x_i)`.
pub fn player_cost(flows: &[f64], residual: &[f64]) -> f64 {
    flows
        .iter()
        .zip(residual)
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, r)| if x < r { x / (r - x) } else { f64::INFINITY })
        .sum()
}

/// A player's perceived arrival rate and service rate (events/s per core).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Player {
    pub lambda: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    /// flows[k][i]: events/s of player k routed to site i.
    pub flows: Vec<Vec<f64>>,
    pub converged: bool,
    pub rounds: usize,
}

impl Equilibrium {
    /// Routing probabilities of player `k`.
    pub fn split(&self, k: usize) -> Vec<f64> {
        let total: f64 = self.flows[k].iter().sum();
        if total > 0.0 {
            self.flows[k].iter().map(|x| x / total).collect()
        } else {
            vec![0.0; self.flows[k].len()]
        }
    }
}

/// Residual service rate of each site as seen by player `k`, given the other
/// players' flows. Loads are normalised to core-seconds so classes with
/// different service rates share a site consistently.
pub fn residual_view(k: usize, players: &[Player], flows: &[Vec<f64>], cores: &[f64]) -> Vec<f64> {
    cores
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let background: f64 = players
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(j, p)| flows[j][i] / p.mu)
                .sum();
            (c - background) * players[k].mu
        })
        .collect()
}

fn feasible_reply(lambda: f64, residual: &[f64]) -> Vec<f64> {
    let capacity: f64 = residual.iter().filter(|r| **r > 0.0).sum();
    if capacity <= 0.0 {
        return vec![0.0; residual.len()];
    }
    let view = lambda.min(FEASIBLE_SHRINK * capacity);
    best_reply(view, residual).expect("view shrunk below capacity")
}

/// Largest deviation of any player's best reply from its current flows,
/// measured on routing probabilities and on flows relative to `max(λ, 1)`.
fn reply_deviation(k: usize, players: &[Player], flows: &[Vec<f64>], cores: &[f64]) -> (Vec<f64>, f64) {
    let residual = residual_view(k, players, flows, cores);
    let new = feasible_reply(players[k].lambda, &residual);
    let old_total: f64 = flows[k].iter().sum();
    let new_total: f64 = new.iter().sum();
    let mut dev: f64 = 0.0;
    for i in 0..cores.len() {
        let p_old = if old_total > 0.0 { flows[k][i] / old_total } else { 0.0 };
        let p_new = if new_total > 0.0 { new[i] / new_total } else { 0.0 };
        dev = dev.max((p_new - p_old).abs());
        dev = dev.max((new[i] - flows[k][i]).abs() / players[k].lambda.max(1.0));
    }
    (new, dev)
}

/// Round-robin best replies until the profile is an `epsilon`-fixed point
/// (no player's best reply moves a routing probability by `epsilon` or
/// more) or `round_cap` rounds have run.
pub fn equilibrium(players: &[Player], cores: &[f64], epsilon: f64, round_cap: usize) -> Equilibrium {
    let n = cores.len();
    let mut flows = vec![vec![0.0; n]; players.len()];
    let mut converged = players.is_empty();
    let mut rounds = 0;
    while !converged && rounds < round_cap {
        rounds += 1;
        for k in 0..players.len() {
            flows[k] = reply_deviation(k, players, &flows, cores).0;
        }
        converged = (0..players.len()).all(|k| reply_deviation(k, players, &flows, cores).1 < epsilon);
    }
    if !converged {
        log::debug!("noncoop equilibrium did not converge within {round_cap} rounds");
    }
    Equilibrium {
        flows,
        converged,
        rounds,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoncoopConfig {
    pub epsilon: f64,
    pub round_cap: usize,
    /// Periodic recomputation interval, seconds.
    pub recompute_period: f64,
    /// Relative change of any class's perceived rate that forces recomputation.
    pub change_trigger: f64,
}

impl Default for NoncoopConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            round_cap: 200,
            recompute_period: 1.0,
            change_trigger: 0.10,
        }
    }
}

/// Dispatcher sampling sites from the current equilibrium splits.
#[derive(Debug, Clone)]
pub struct NoncoopScheduler {
    cfg: NoncoopConfig,
    cores: Vec<f64>,
    splits: Vec<Vec<f64>>,
    basis: Vec<f64>,
    last_compute: Option<f64>,
    rng: RandomStream,
    pub recomputations: u64,
    pub nonconverged: u64,
}

impl NoncoopScheduler {
    pub fn new(cfg: NoncoopConfig, cores: Vec<f64>, classes: usize, rng: RandomStream) -> Self {
        let n = cores.len();
        Self {
            cfg,
            cores,
            splits: vec![vec![1.0 / n as f64; n]; classes],
            basis: vec![0.0; classes],
            last_compute: None,
            rng,
            recomputations: 0,
            nonconverged: 0,
        }
    }

    pub fn split(&self, class: usize) -> &[f64] {
        &self.splits[class]
    }

    /// Whether the splits are stale at `now` for the perceived rates.
    pub fn needs_recompute(&self, now: f64, lambdas: &[f64]) -> bool {
        let Some(last) = self.last_compute else {
            return true;
        };
        if now - last >= self.cfg.recompute_period {
            return true;
        }
        lambdas.iter().zip(&self.basis).any(|(&l, &b)| {
            if b == 0.0 {
                l > 0.0
            } else {
                ((l - b) / b).abs() > self.cfg.change_trigger
            }
        })
    }

    pub fn recompute(&mut self, now: f64, lambdas: &[f64], mus: &[f64]) {
        let players: Vec<Player> = lambdas
            .iter()
            .zip(mus)
            .map(|(&lambda, &mu)| Player { lambda, mu })
            .collect();
        let eq = equilibrium(&players, &self.cores, self.cfg.epsilon, self.cfg.round_cap);
        if !eq.converged {
            self.nonconverged += 1;
            if self.nonconverged == 1 {
                log::warn!(
                    "noncoop equilibrium did not converge within {} rounds at t={now}; using the last iterate",
                    self.cfg.round_cap
                );
            }
        }
        for k in 0..players.len() {
            let split = eq.split(k);
            self.splits[k] = if split.iter().sum::<f64>() > 0.0 {
                split
            } else {
                // No demand yet: the zero-flow limit of the best reply sends
                // everything to the largest residual; ties share uniformly.
                let residual = residual_view(k, &players, &eq.flows, &self.cores);
                let best = residual.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ties: Vec<usize> = (0..residual.len()).filter(|&i| residual[i] == best).collect();
                let mut s = vec![0.0; residual.len()];
                for &i in &ties {
                    s[i] = 1.0 / ties.len() as f64;
                }
                s
            };
        }
        self.basis = lambdas.to_vec();
        self.last_compute = Some(now);
        self.recomputations += 1;
    }

    /// Samples a site for class `k`, refreshing the equilibrium first when stale.
    pub fn dispatch(&mut self, class: usize, now: f64, lambdas: &[f64], mus: &[f64]) -> usize {
        if self.needs_recompute(now, lambdas) {
            self.recompute(now, lambdas, mus);
        }
        sample(&self.splits[class], self.rng.uniform())
    }
}

/// Inverse-CDF sampling from a probability vector.
pub fn sample(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_split() {
        let x = best_reply(4.0, &[10.0, 10.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_split() {
        let x = best_reply(3.0, &[10.0, 5.0]).unwrap();
        assert!((x[0] - 2.971).abs() < 1e-3, "{x:?}");
        assert!((x[1] - 0.029).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn slow_site_excluded() {
        let x = best_reply(0.5, &[10.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn infeasible_rejected() {
        assert!(matches!(
            best_reply(15.0, &[10.0, 5.0]),
            Err(BestReplyError::Infeasible { .. })
        ));
    }

    #[test]
    fn single_player_equilibrium_is_best_reply() {
        let players = [Player { lambda: 30.0, mu: 5.0 }];
        let cores = [16.0, 8.0, 4.0];
        let eq = equilibrium(&players, &cores, 1e-9, 200);
        assert!(eq.converged);
        let br = best_reply(30.0, &[80.0, 40.0, 20.0]).unwrap();
        for (a, b) in eq.flows[0].iter().zip(&br) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_players_get_symmetric_splits() {
        let players = [Player { lambda: 20.0, mu: 5.0 }, Player { lambda: 20.0, mu: 5.0 }];
        let cores = [16.0, 16.0, 8.0];
        let eq = equilibrium(&players, &cores, 1e-10, 1000);
        assert!(eq.converged);
        for i in 0..3 {
            assert!((eq.flows[0][i] - eq.flows[1][i]).abs() < 1e-5, "{:?}", eq.flows);
        }
    }

    #[test]
    fn sampling_follows_split() {
        assert_eq!(sample(&[1.0, 0.0, 0.0], 0.999), 0);
        let mut rng = RandomStream::new(3, "noncoop");
        let n = 100_000;
        let hits = (0..n).filter(|_| sample(&[0.5, 0.5], rng.uniform()) == 0).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn recompute_triggers() {
        let mut s = NoncoopScheduler::new(NoncoopConfig::default(), vec![16.0; 4], 2, RandomStream::new(1, "n"));
        assert!(s.needs_recompute(0.0, &[0.0, 0.0]));
        s.recompute(0.0, &[10.0, 10.0], &[5.0, 5.0]);
        assert!(!s.needs_recompute(0.5, &[10.5, 10.0]));
        assert!(s.needs_recompute(0.5, &[20.0, 10.0]));
        assert!(s.needs_recompute(1.0, &[10.0, 10.0]));
    }

    #[test]
    fn zero_demand_spreads_uniformly() {
        let mut s = NoncoopScheduler::new(NoncoopConfig::default(), vec![16.0; 4], 1, RandomStream::new(1, "n"));
        s.recompute(0.0, &[0.0], &[5.0]);
        assert_eq!(s.split(0), &[0.25; 4]);
    }
}
