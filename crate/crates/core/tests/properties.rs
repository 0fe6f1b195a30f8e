use proptest::prelude::*;

use noah_sim::cluster::ProcessorShare;
use noah_sim::noah::{fair_targets, AllocationTable};
use noah_sim::noncoop::best_reply;
use noah_sim::queueing::{erlang_c, expected_wait, min_instances};

proptest! {
    #[test]
    fn erlang_c_is_a_probability_decreasing_in_servers(load in 0.01f64..30.0, extra in 1u32..10) {
        let c = load.floor() as u32 + extra;
        let p = erlang_c(c, load).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let q = erlang_c(c + 1, load).unwrap();
        prop_assert!(q <= p + 1e-12);
    }

    #[test]
    fn erlang_c_increases_with_load(c in 1u32..20, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let x = erlang_c(c, lo * 0.99 * f64::from(c)).unwrap();
        let y = erlang_c(c, hi * 0.99 * f64::from(c)).unwrap();
        prop_assert!(x <= y + 1e-12);
    }

    #[test]
    fn min_instances_is_minimal_and_monotone(
        lambda in 0.1f64..200.0,
        mu in 1.0f64..20.0,
        alpha_exp in -5.0f64..0.0,
        bump in 1.0f64..3.0,
    ) {
        let alpha = 10f64.powf(alpha_exp);
        let c = min_instances(lambda, mu, alpha, 1);
        prop_assert!(expected_wait(c, lambda, mu).unwrap() < alpha);
        if c > 1 {
            let below = expected_wait(c - 1, lambda, mu).map(|w| w >= alpha).unwrap_or(true);
            prop_assert!(below);
        }
        prop_assert!(min_instances(lambda * bump, mu, alpha, 1) >= c);
        prop_assert!(min_instances(lambda, mu, alpha / bump, 1) >= c);
    }

    #[test]
    fn best_reply_satisfies_kkt(
        residual in prop::collection::vec(0.5f64..30.0, 1..10),
        frac in 0.01f64..0.98,
    ) {
        let cap: f64 = residual.iter().sum();
        let lambda = cap * frac;
        let x = best_reply(lambda, &residual).unwrap();
        let total: f64 = x.iter().sum();
        prop_assert!((total - lambda).abs() <= 1e-6 * lambda.max(1.0));
        // Marginal cost r/(r-x)^2 is equal on used sites and no lower on unused ones.
        let marginal: Vec<f64> = x.iter().zip(&residual).map(|(xi, r)| r / (r - xi).powi(2)).collect();
        let used: Vec<f64> = x.iter().zip(&marginal).filter(|(xi, _)| **xi > 1e-9).map(|(_, m)| *m).collect();
        prop_assert!(!used.is_empty());
        let nu = used.iter().cloned().fold(f64::NAN, f64::max);
        for (xi, (m, r)) in x.iter().zip(marginal.iter().zip(&residual)) {
            prop_assert!(*xi >= -1e-12 && *xi < *r);
            if *xi > 1e-6 {
                prop_assert!((m - nu).abs() <= 1e-4 * nu, "m={} nu={}", m, nu);
            } else {
                prop_assert!(*m >= nu * (1.0 - 1e-4));
            }
        }
    }

    #[test]
    fn allocation_table_invariants_hold_under_random_scaling(
        caps in prop::collection::vec(0u32..20, 1..8),
        ops in prop::collection::vec((0usize..5, any::<bool>(), 0u32..25), 1..60),
    ) {
        let mut t = AllocationTable::new(caps.clone(), 5);
        for (class, out, delta) in ops {
            let free_before = t.total_free();
            let total_before = t.class_total(class);
            if out {
                let (placed, short) = t.scale_out(class, delta);
                let n: u32 = placed.iter().map(|p| p.1).sum();
                prop_assert_eq!(n + short, delta);
                prop_assert_eq!(short, delta.saturating_sub(free_before));
                prop_assert_eq!(t.class_total(class), total_before + n);
            } else {
                let removed: u32 = t.scale_in(class, delta).iter().map(|p| p.1).sum();
                prop_assert_eq!(removed, delta.min(total_before));
            }
            prop_assert!(t.check().is_ok(), "{:?}", t.check());
            for (i, cap) in caps.iter().enumerate() {
                prop_assert!(t.site_used(i) <= *cap);
            }
        }
    }

    #[test]
    fn fair_targets_respect_capacity_and_demand(
        desired in prop::collection::vec(0u32..40, 1..12),
        capacity in 0u32..200,
        first in 0usize..12,
    ) {
        let got = fair_targets(&desired, capacity, first % desired.len());
        let want: u32 = desired.iter().sum();
        prop_assert_eq!(got.iter().sum::<u32>(), want.min(capacity));
        for (g, d) in got.iter().zip(&desired) {
            prop_assert!(g <= d);
        }
        // Max-min fairness: a class cut short gets at least every other grant minus one.
        let top = *got.iter().max().unwrap();
        for (g, d) in got.iter().zip(&desired) {
            if g < d {
                prop_assert!(g + 1 >= top);
            }
        }
    }

    #[test]
    fn processor_sharing_conserves_work(
        jobs in prop::collection::vec((0.0f64..5.0, 0.01f64..2.0), 1..40),
        cores in 1u32..5,
    ) {
        let mut arrivals = jobs.clone();
        arrivals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut ps: ProcessorShare<usize> = ProcessorShare::new(cores);
        let total: f64 = arrivals.iter().map(|j| j.1).sum();
        let mut done = 0usize;
        let mut next = 0usize;
        let mut last = 0.0f64;
        let mut busy_time = 0.0;
        while done < arrivals.len() {
            let due = ps.next_completion();
            let arrive = arrivals.get(next).map(|j| j.0);
            let now = match (due, arrive) {
                (Some(d), Some(a)) if d <= a => d,
                (_, Some(a)) => a,
                (Some(d), None) => d,
                (None, None) => unreachable!(),
            };
            prop_assert!(now >= last - 1e-12);
            busy_time += (now - last) * ps.rate() * ps.len() as f64;
            last = now;
            if Some(now) == arrive && (due.is_none() || due.unwrap() > now) {
                ps.insert(now, next as u64, arrivals[next].1, next);
                next += 1;
            } else {
                for (key, idx) in ps.pop_due(now) {
                    prop_assert_eq!(key as usize, idx);
                    done += 1;
                }
            }
        }
        prop_assert!((ps.delivered() - total).abs() <= 1e-9 * total.max(1.0));
        prop_assert!((busy_time - total).abs() <= 1e-6 * total.max(1.0));
    }
}
