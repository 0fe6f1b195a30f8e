//! OpenWhisk controller heuristic: hash home host, coprime-generator probing,
//! escalating busy threshold and a random fallback.

use crate::engine::{fnv1a64, RandomStream};

/// Stable function-name hash used to pick the home host.
pub fn function_hash(name: &str) -> u64 {
    fnv1a64(name.as_bytes())
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Greedy scan `1..=pool_size`, keeping every value coprime to all values
/// kept so far.
pub fn build_generators(pool_size: usize) -> Vec<usize> {
    assert!(pool_size >= 1, "pool must hold at least one site");
    let mut gens: Vec<usize> = Vec::new();
    for i in 1..=pool_size {
        if gens.iter().all(|&g| gcd(i, g) == 1) {
            gens.push(i);
        }
    }
    gens
}

#[derive(Debug, Clone, PartialEq)]
pub struct OwConfig {
    pub busy_threshold: u32,
    pub escalation_max_multiplier: u32,
}

impl Default for OwConfig {
    fn default() -> Self {
        Self {
            busy_threshold: 16,
            escalation_max_multiplier: 3,
        }
    }
}

/// Outcome of a probe, kept apart from the random fallback so callers can
/// count overflow events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Found under the given busy level (1 = α, 2 = 2α, ...).
    Probed {
        site: usize,
        level: u32,
    },
    Random {
        site: usize,
    },
}

impl Selection {
    pub fn site(self) -> usize {
        match self {
            Selection::Probed { site, .. } | Selection::Random { site } => site,
        }
    }
}

/// Probe order for a given hash. Returns `None` when every site is at or
/// above the top busy level.
pub fn probe(hash: u64, generators: &[usize], active: &[u32], cfg: &OwConfig) -> Option<Selection> {
    let n = active.len() as u64;
    let g = generators[(hash % generators.len() as u64) as usize] as u64;
    let home = hash % n;
    for level in 1..=cfg.escalation_max_multiplier {
        let lvl = cfg.busy_threshold * level;
        for k in 0..n {
            let x = ((home + (k * g) % n) % n) as usize;
            if active[x] < lvl {
                return Some(Selection::Probed { site: x, level });
            }
        }
    }
    None
}

/// Controller state: shared per-site count of accepted-but-unfinished
/// invocations.
#[derive(Debug, Clone)]
pub struct OwScheduler {
    cfg: OwConfig,
    generators: Vec<usize>,
    active: Vec<u32>,
    rng: RandomStream,
    pub random_fallbacks: u64,
}

impl OwScheduler {
    pub fn new(cfg: OwConfig, sites: usize, rng: RandomStream) -> Self {
        Self {
            cfg,
            generators: build_generators(sites),
            active: vec![0; sites],
            rng,
            random_fallbacks: 0,
        }
    }

    pub fn generators(&self) -> &[usize] {
        &self.generators
    }

    pub fn active_counts(&self) -> &[u32] {
        &self.active
    }

    pub fn select_host(&mut self, hash: u64) -> Selection {
        match probe(hash, &self.generators, &self.active, &self.cfg) {
            Some(sel) => sel,
            None => {
                self.random_fallbacks += 1;
                Selection::Random {
                    site: self.rng.index(self.active.len()),
                }
            }
        }
    }

    pub fn on_dispatch(&mut self, site: usize) {
        self.active[site] += 1;
    }

    pub fn on_complete(&mut self, site: usize) {
        debug_assert!(self.active[site] > 0);
        self.active[site] = self.active[site].saturating_sub(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_sets() {
        assert_eq!(build_generators(1), vec![1]);
        assert_eq!(build_generators(4), vec![1, 2, 3]);
        assert_eq!(build_generators(10), vec![1, 2, 3, 5, 7]);
        assert_eq!(build_generators(16), vec![1, 2, 3, 5, 7, 11, 13]);
    }

    #[test]
    fn generators_pairwise_coprime_and_bounded() {
        for n in 1..=64 {
            let g = build_generators(n);
            for (i, &a) in g.iter().enumerate() {
                assert!((1..=n).contains(&a));
                for &b in &g[i + 1..] {
                    assert_eq!(gcd(a, b), 1);
                }
            }
        }
    }

    #[test]
    fn home_host_when_free() {
        let g = build_generators(10);
        let sel = probe(3, &g, &[0; 10], &OwConfig::default()).unwrap();
        assert_eq!(sel, Selection::Probed { site: 3, level: 1 });
    }

    #[test]
    fn overflow_follows_generator() {
        let g = build_generators(10);
        let mut active = [0u32; 10];
        active[3] = 16;
        // g = G[3 mod 5] = 5, next probe is (3 + 5) mod 10.
        let sel = probe(3, &g, &active, &OwConfig::default()).unwrap();
        assert_eq!(sel.site(), 8);
    }

    #[test]
    fn escalates_then_falls_back_to_random() {
        let g = build_generators(10);
        let active = [20u32; 10];
        let sel = probe(3, &g, &active, &OwConfig::default()).unwrap();
        assert_eq!(sel, Selection::Probed { site: 3, level: 2 });

        let mut s = OwScheduler::new(OwConfig::default(), 10, RandomStream::new(1, "ow"));
        s.active = vec![48; 10];
        assert!(matches!(s.select_host(3), Selection::Random { .. }));
        assert_eq!(s.random_fallbacks, 1);
    }

    #[test]
    fn seventeenth_event_overflows() {
        let mut s = OwScheduler::new(OwConfig::default(), 10, RandomStream::new(1, "ow"));
        for _ in 0..16 {
            let site = s.select_host(3).site();
            assert_eq!(site, 3);
            s.on_dispatch(site);
        }
        assert_eq!(s.active_counts()[3], 16);
        assert_eq!(s.select_host(3).site(), 8);
        s.on_complete(3);
        assert_eq!(s.active_counts()[3], 15);
        assert_eq!(s.select_host(3).site(), 3);
    }

    #[test]
    fn coprime_generators_cover_pool() {
        for g in [1usize, 3, 7] {
            let mut seen = [false; 10];
            for k in 0..10 {
                seen[(4 + k * g) % 10] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }
}
