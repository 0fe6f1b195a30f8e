mod common;

use std::collections::BTreeSet;

use noah_sim::engine::RandomStream;
use noah_sim::ow::{build_generators, probe, OwConfig, OwScheduler, Selection};

#[test]
fn probe_matches_oracle_on_random_instances() {
    let (bad, first) = common::ow_mismatches(10_000, 5);
    assert_eq!(bad, 0, "{first:?}");
}

#[test]
fn generator_sets_match_oracle() {
    for n in 1..=100 {
        assert_eq!(build_generators(n), common::generators_oracle(n), "n={n}");
    }
}

#[test]
fn coprime_steps_visit_every_site() {
    let n = 10;
    let gens = build_generators(n);
    let cfg = OwConfig {
        busy_threshold: 1,
        escalation_max_multiplier: 1,
    };
    // Hashes 0, 2, 4 select g = 1, 3, 7 (coprime to 10) and must reach the
    // last free site wherever it is.
    for hash in [0u64, 2, 4] {
        let g = gens[(hash % gens.len() as u64) as usize];
        assert!([1, 3, 7].contains(&g));
        let mut reached = BTreeSet::new();
        for free in 0..n {
            let mut active = vec![1u32; n];
            active[free] = 0;
            reached.insert(probe(hash, &gens, &active, &cfg).unwrap().site());
        }
        assert_eq!(reached.len(), n, "g={g}");
    }
}

#[test]
fn saturated_pool_falls_back_to_random() {
    let mut s = OwScheduler::new(OwConfig::default(), 10, RandomStream::new(3, "ow"));
    for _ in 0..48 {
        for site in 0..10 {
            s.on_dispatch(site);
        }
    }
    let mut seen = BTreeSet::new();
    for h in 0..200 {
        match s.select_host(h) {
            Selection::Random { site } => {
                seen.insert(site);
            }
            other => panic!("expected fallback, got {other:?}"),
        }
    }
    assert_eq!(s.random_fallbacks, 200);
    assert!(seen.len() >= 8);
}
