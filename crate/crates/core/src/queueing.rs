//! Analytic queueing kernel: Erlang C, M/M/c mean wait, instance sizing under
//! a waiting-time threshold, and online rate estimators.

use crate::error::QueueingError;

/// Erlang C delay probability `C(c, a)` for `c` servers and offered load `a`
/// Erlangs.
///
/// Uses the Erlang B recurrence `B(k) = a B(k-1) / (k + a B(k-1))` and the
/// identity `C = c B / (c - a (1 - B))`, which stays finite for large `c`.
pub fn erlang_c(servers: u32, load: f64) -> Result<f64, QueueingError> {
    if servers == 0 {
        return Err(QueueingError::InvalidArgument("servers must be >= 1"));
    }
    if !(load >= 0.0) || !load.is_finite() {
        return Err(QueueingError::InvalidArgument("offered load must be finite and >= 0"));
    }
    let c = f64::from(servers);
    if load >= c {
        return Err(QueueingError::Unstable { servers: c, load });
    }
    let mut b = 1.0;
    for k in 1..=servers {
        b = load * b / (f64::from(k) + load * b);
    }
    Ok(c * b / (c - load * (1.0 - b)))
}

/// Mean queueing delay of an M/M/c system: `C(c, λ/μ) / (cμ - λ)`.
pub fn expected_wait(servers: u32, lambda: f64, mu: f64) -> Result<f64, QueueingError> {
    if !(mu > 0.0) {
        return Err(QueueingError::InvalidArgument("service rate must be > 0"));
    }
    if !(lambda >= 0.0) {
        return Err(QueueingError::InvalidArgument("arrival rate must be >= 0"));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let capacity = f64::from(servers) * mu;
    if capacity <= lambda {
        return Err(QueueingError::Unstable {
            servers: f64::from(servers),
            load: lambda / mu,
        });
    }
    Ok(erlang_c(servers, lambda / mu)? / (capacity - lambda))
}

/// Smallest instance count that keeps the M/M/c mean wait strictly below
/// `alpha`. Returns `c_min` when there is no demand.
pub fn min_instances(lambda: f64, mu: f64, alpha: f64, c_min: u32) -> u32 {
    assert!(mu > 0.0 && alpha > 0.0, "min_instances needs mu > 0 and alpha > 0");
    if !(lambda > 0.0) {
        return c_min;
    }
    let load = lambda / mu;
    let mut c = (load.floor() as u32).saturating_add(1).max(1);
    loop {
        // c > load holds by construction, so expected_wait cannot fail.
        let w = expected_wait(c, lambda, mu).expect("stable by construction");
        if w < alpha {
            return c.max(c_min);
        }
        c += 1;
    }
}

/// EWMA of inter-arrival gaps, inverted into a rate.
///
/// Each gap is blended with weight `1 - 2^(-m/h)`, `m` being the current mean
/// gap, so history is forgotten with a half-life of about `h` seconds at any
/// arrival rate. The weight must not depend on the sampled gap itself: that
/// would over-weight long gaps and halve the estimate for Poisson input.
#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimator {
    half_life: f64,
    mean_gap: Option<f64>,
    last_arrival: Option<f64>,
    samples: u64,
}

impl RateEstimator {
    pub fn new(half_life: f64) -> Self {
        Self {
            half_life,
            mean_gap: None,
            last_arrival: None,
            samples: 0,
        }
    }

    fn weight(&self, gap: f64) -> f64 {
        if self.half_life <= 0.0 {
            1.0
        } else {
            1.0 - (-gap / self.half_life).exp2()
        }
    }

    /// Records an arrival at `time`. The first arrival only anchors the gap
    /// sequence unless a `bootstrap_gap` is supplied.
    pub fn observe_arrival(&mut self, time: f64, bootstrap_gap: Option<f64>) {
        if let Some(last) = self.last_arrival {
            let gap = (time - last).max(0.0);
            self.observe_gap(gap);
        } else if let Some(gap) = bootstrap_gap {
            if self.mean_gap.is_none() {
                self.mean_gap = Some(gap);
            }
        }
        self.last_arrival = Some(time);
    }

    /// Blends one inter-arrival gap.
    pub fn observe_gap(&mut self, gap: f64) {
        self.samples += 1;
        self.mean_gap = Some(match self.mean_gap {
            None => gap,
            Some(m) => m + self.weight(m.max(1e-12)) * (gap - m),
        });
    }

    /// Seeds the estimate when nothing has been observed yet.
    pub fn seed_rate(&mut self, rate: f64) {
        if self.mean_gap.is_none() && rate > 0.0 {
            self.mean_gap = Some(1.0 / rate);
        }
    }

    /// Current rate estimate. An open gap longer than the running mean is
    /// blended in so the estimate decays once arrivals stop.
    pub fn rate(&self, now: f64) -> f64 {
        let Some(mut m) = self.mean_gap else {
            return 0.0;
        };
        if let Some(last) = self.last_arrival {
            let open = now - last;
            if open > m {
                m += self.weight(open) * (open - m);
            }
        }
        if m <= 0.0 {
            // Simultaneous arrivals only; treat as a very high rate.
            return f64::MAX.sqrt();
        }
        1.0 / m
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

/// Per-sample EWMA of a duration with a half-life counted in samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationEstimator {
    alpha: f64,
    mean: f64,
    samples: u64,
}

impl DurationEstimator {
    pub fn new(prior: f64, half_life_samples: f64) -> Self {
        let alpha = if half_life_samples <= 0.0 {
            1.0
        } else {
            1.0 - (-1.0 / half_life_samples).exp2()
        };
        Self {
            alpha,
            mean: prior,
            samples: 0,
        }
    }

    pub fn observe(&mut self, duration: f64) -> Result<(), QueueingError> {
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(QueueingError::InvalidArgument("durations must be positive"));
        }
        self.mean += self.alpha * (duration - self.mean);
        self.samples += 1;
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

/// An observation fed into [`ClassEstimate::update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    /// An arrival at the given absolute time.
    Arrival(f64),
    /// A completed service, in seconds.
    Service(f64),
    /// A completed instance setup, in seconds.
    Setup(f64),
}

/// Controller-side estimates for one function class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEstimate {
    pub arrivals: RateEstimator,
    pub service: DurationEstimator,
    pub setup: DurationEstimator,
}

impl ClassEstimate {
    /// `service_prior` and `setup_prior` are the shared experience values in
    /// seconds.
    pub fn new(service_prior: f64, setup_prior: f64, rate_half_life: f64, sample_half_life: f64) -> Self {
        Self {
            arrivals: RateEstimator::new(rate_half_life),
            service: DurationEstimator::new(service_prior, sample_half_life),
            setup: DurationEstimator::new(setup_prior, sample_half_life),
        }
    }

    pub fn update(&mut self, obs: Observation) -> Result<(), QueueingError> {
        match obs {
            Observation::Arrival(t) => {
                self.arrivals.observe_arrival(t, None);
                Ok(())
            }
            Observation::Service(d) => self.service.observe(d),
            Observation::Setup(d) => self.setup.observe(d),
        }
    }

    pub fn lambda_hat(&self, now: f64) -> f64 {
        self.arrivals.rate(now)
    }

    pub fn mu_hat(&self) -> f64 {
        1.0 / self.service.mean()
    }

    pub fn setup_hat(&self) -> f64 {
        self.setup.mean()
    }
}
