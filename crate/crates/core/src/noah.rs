//! NOAH: per-class Erlang-C instance targets, colocating placement of
//! virtual allocations, idle-first/ratio dispatch and the per-site
//! queue-or-spawn decision.

use crate::queueing::min_instances;

/// Virtual allocation matrix `c[site][class]` with per-site capacity.
///
/// Allocations are budgets only; they never create or remove containers.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationTable {
    alloc: Vec<Vec<u32>>,
    site_cap: Vec<u32>,
    target: Vec<u32>,
}

impl AllocationTable {
    pub fn new(site_cap: Vec<u32>, classes: usize) -> Self {
        let sites = site_cap.len();
        Self {
            alloc: vec![vec![0; classes]; sites],
            site_cap,
            target: vec![0; classes],
        }
    }

    pub fn sites(&self) -> usize {
        self.site_cap.len()
    }

    pub fn classes(&self) -> usize {
        self.target.len()
    }

    pub fn get(&self, site: usize, class: usize) -> u32 {
        self.alloc[site][class]
    }

    pub fn target(&self, class: usize) -> u32 {
        self.target[class]
    }

    pub fn class_total(&self, class: usize) -> u32 {
        self.alloc.iter().map(|row| row[class]).sum()
    }

    pub fn site_used(&self, site: usize) -> u32 {
        self.alloc[site].iter().sum()
    }

    pub fn site_free(&self, site: usize) -> u32 {
        self.site_cap[site] - self.site_used(site)
    }

    pub fn total_free(&self) -> u32 {
        (0..self.sites()).map(|i| self.site_free(i)).sum()
    }

    /// Sites holding at least one allocation of any class.
    pub fn sites_in_use(&self) -> Vec<usize> {
        (0..self.sites()).filter(|&i| self.site_used(i) > 0).collect()
    }

    pub fn sites_of(&self, class: usize) -> Vec<usize> {
        (0..self.sites()).filter(|&i| self.alloc[i][class] > 0).collect()
    }

    /// Places `delta` more allocations of `class`, returning `(site, count)`
    /// placements and the shortfall that did not fit.
    ///
    /// Sites already holding the class are filled first, largest holding
    /// first. The rest opens new sites: a site already employed by other
    /// classes that fits the whole remainder is preferred (tightest fit),
    /// otherwise the site with the most free capacity is taken. Ties go to
    /// the lowest site id.
    pub fn scale_out(&mut self, class: usize, delta: u32) -> (Vec<(usize, u32)>, u32) {
        let mut remaining = delta;
        let mut placed = Vec::new();

        let mut held = self.sites_of(class);
        held.sort_by(|&a, &b| self.alloc[b][class].cmp(&self.alloc[a][class]).then(a.cmp(&b)));
        for i in held {
            if remaining == 0 {
                break;
            }
            let n = self.site_free(i).min(remaining);
            if n > 0 {
                self.alloc[i][class] += n;
                remaining -= n;
                placed.push((i, n));
            }
        }

        while remaining > 0 {
            let candidates: Vec<usize> = (0..self.sites())
                .filter(|&i| self.alloc[i][class] == 0 && self.site_free(i) > 0)
                .collect();
            if candidates.is_empty() {
                break;
            }
            let fitting_in_use = candidates
                .iter()
                .copied()
                .filter(|&i| self.site_used(i) > 0 && self.site_free(i) >= remaining)
                .min_by(|&a, &b| self.site_free(a).cmp(&self.site_free(b)).then(a.cmp(&b)));
            let site = fitting_in_use.unwrap_or_else(|| {
                candidates
                    .iter()
                    .copied()
                    .max_by(|&a, &b| self.site_free(a).cmp(&self.site_free(b)).then(b.cmp(&a)))
                    .expect("non-empty")
            });
            let n = self.site_free(site).min(remaining);
            self.alloc[site][class] += n;
            remaining -= n;
            placed.push((site, n));
        }
        self.target[class] = self.class_total(class);
        (placed, remaining)
    }

    /// Removes `delta` allocations of `class`, always from the site holding
    /// the fewest (ties: highest site id).
    pub fn scale_in(&mut self, class: usize, delta: u32) -> Vec<(usize, u32)> {
        let mut removed: Vec<(usize, u32)> = Vec::new();
        for _ in 0..delta {
            let site = (0..self.sites())
                .filter(|&i| self.alloc[i][class] > 0)
                .min_by(|&a, &b| self.alloc[a][class].cmp(&self.alloc[b][class]).then(b.cmp(&a)));
            let Some(site) = site else { break };
            self.alloc[site][class] -= 1;
            match removed.iter_mut().find(|(s, _)| *s == site) {
                Some((_, n)) => *n += 1,
                None => removed.push((site, 1)),
            }
        }
        self.target[class] = self.class_total(class);
        removed
    }

    /// Verifies `Σ_i c[i][k] = target[k]` and `Σ_k c[i][k] <= cap[i]`.
    pub fn check(&self) -> Result<(), String> {
        for k in 0..self.classes() {
            if self.class_total(k) != self.target[k] {
                return Err(format!(
                    "class {k}: placed {} != target {}",
                    self.class_total(k),
                    self.target[k]
                ));
            }
        }
        for i in 0..self.sites() {
            if self.site_used(i) > self.site_cap[i] {
                return Err(format!(
                    "site {i}: {} allocations > cap {}",
                    self.site_used(i),
                    self.site_cap[i]
                ));
            }
        }
        Ok(())
    }
}

/// NOAH tuning knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct NoahConfig {
    /// Default waiting-time threshold, seconds.
    pub alpha: f64,
    pub control_period: f64,
    pub c_min: u32,
    pub spawn_slack: u32,
}

impl Default for NoahConfig {
    fn default() -> Self {
        Self {
            alpha: 0.010,
            control_period: 0.1,
            c_min: 0,
            spawn_slack: 2,
        }
    }
}

/// Result of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutcome {
    pub previous: u32,
    pub desired: u32,
    pub placed: u32,
    /// The desired count did not fit into the free cluster capacity.
    pub saturated: bool,
}

/// Recomputes the instance target of `class` and moves its allocations.
pub fn control_step(
    table: &mut AllocationTable,
    class: usize,
    lambda_hat: f64,
    mu_hat: f64,
    alpha: f64,
    c_min: u32,
) -> ControlOutcome {
    let desired = min_instances(lambda_hat, mu_hat, alpha, c_min);
    let previous = table.class_total(class);
    let mut saturated = false;
    if desired > previous {
        let (_, shortfall) = table.scale_out(class, desired - previous);
        saturated = shortfall > 0;
    } else if desired < previous {
        table.scale_in(class, previous - desired);
    }
    ControlOutcome {
        previous,
        desired,
        placed: table.class_total(class),
        saturated,
    }
}

/// Max-min fair clamp of instance targets to `capacity` slots. Classes whose
/// demand exceeds the common level share the integer remainder round-robin
/// from `first`.
pub fn fair_targets(desired: &[u32], capacity: u32, first: usize) -> Vec<u32> {
    let total: u64 = desired.iter().map(|&d| u64::from(d)).sum();
    if total <= u64::from(capacity) {
        return desired.to_vec();
    }
    let filled = |level: u32| -> u64 { desired.iter().map(|&d| u64::from(d.min(level))).sum() };
    let (mut lo, mut hi) = (0u32, desired.iter().copied().max().unwrap_or(0));
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if filled(mid) <= u64::from(capacity) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut out: Vec<u32> = desired.iter().map(|&d| d.min(lo)).collect();
    let mut spare = u64::from(capacity) - filled(lo);
    let n = desired.len();
    for i in 0..n {
        if spare == 0 {
            break;
        }
        let c = (first + i) % n;
        if desired[c] > out[c] {
            out[c] += 1;
            spare -= 1;
        }
    }
    out
}

/// One control period for all classes. Targets beyond the cluster capacity
/// are clamped max-min fairly. Scale-ins are applied first so freed
/// slots are available; scale-outs then claim capacity in round-robin class
/// order starting at `first`.
pub fn control_round(
    table: &mut AllocationTable,
    lambdas: &[f64],
    mus: &[f64],
    alphas: &[f64],
    c_min: u32,
    first: usize,
) -> Vec<ControlOutcome> {
    let k = table.classes();
    let desired: Vec<u32> = (0..k)
        .map(|c| min_instances(lambdas[c], mus[c], alphas[c], c_min))
        .collect();
    let previous: Vec<u32> = (0..k).map(|c| table.class_total(c)).collect();
    let capacity = table.total_free() + previous.iter().sum::<u32>();
    let granted = fair_targets(&desired, capacity, first);
    let mut saturated: Vec<bool> = (0..k).map(|c| granted[c] < desired[c]).collect();
    let desired = granted;
    for c in 0..k {
        if desired[c] < previous[c] {
            table.scale_in(c, previous[c] - desired[c]);
        }
    }
    for i in 0..k {
        let c = (first + i) % k;
        let have = table.class_total(c);
        if desired[c] > have {
            let (_, shortfall) = table.scale_out(c, desired[c] - have);
            saturated[c] |= shortfall > 0;
        }
    }
    (0..k)
        .map(|c| ControlOutcome {
            previous: previous[c],
            desired: desired[c],
            placed: table.class_total(c),
            saturated: saturated[c],
        })
        .collect()
}

/// Per-site view the dispatcher reads from shared host state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteLoad {
    pub idle: usize,
    /// Accepted-but-unfinished events of the class at the site.
    pub active: u32,
    pub alloc: u32,
}

/// Idle instance first (most idle, then lowest id); otherwise the site with
/// the lowest active/allocation ratio among sites holding allocations.
pub fn dispatch(loads: &[SiteLoad]) -> Option<usize> {
    let idle = (0..loads.len())
        .filter(|&i| loads[i].idle > 0)
        .max_by(|&a, &b| loads[a].idle.cmp(&loads[b].idle).then(b.cmp(&a)));
    if idle.is_some() {
        return idle;
    }
    (0..loads.len()).filter(|&i| loads[i].alloc > 0).min_by(|&a, &b| {
        // Compare active_a / alloc_a with active_b / alloc_b exactly.
        let lhs = u64::from(loads[a].active) * u64::from(loads[b].alloc);
        let rhs = u64::from(loads[b].active) * u64::from(loads[a].alloc);
        lhs.cmp(&rhs).then(a.cmp(&b))
    })
}

/// Site-local state relevant to one admission decision.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmitView {
    pub queue_len: usize,
    pub idle: usize,
    pub busy: usize,
    pub max_active: usize,
    /// Estimated time until an instance of the class frees up.
    pub est_wait: f64,
    pub setup_hat: f64,
    /// Whether a new instance may be created (allocation bound, container
    /// cap and memory).
    pub spawn_allowed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmitDecision {
    RunNow,
    Enqueue,
    Spawn,
}

pub fn site_admit_policy(v: &AdmitView) -> AdmitDecision {
    if v.queue_len == 0 && v.idle > 0 && v.busy < v.max_active {
        return AdmitDecision::RunNow;
    }
    if v.busy >= v.max_active {
        return AdmitDecision::Enqueue;
    }
    if v.est_wait > v.setup_hat && v.spawn_allowed {
        AdmitDecision::Spawn
    } else {
        AdmitDecision::Enqueue
    }
}

/// Backlog-based estimate of the wait until an instance frees: the service
/// owed to `ahead` queued events plus the residual work of the class's
/// instances, spread over those instances.
pub fn estimate_wait(ahead: usize, residuals: &[f64], mean_service: f64) -> f64 {
    if residuals.is_empty() {
        return f64::INFINITY;
    }
    (ahead as f64 * mean_service + residuals.iter().sum::<f64>()) / residuals.len() as f64
}
