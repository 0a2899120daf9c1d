mod common;

use common::little_holds;
use threshold_lab::fixedpoint::{solve, SolverConfig, StationaryDistribution};
use threshold_lab::metrics::{
    energy_saving, optimal_threshold, queue_lengths, sojourn_little, sojourn_paper, Criterion,
    PerformanceReport, FLAG_SIMULATED, FLAG_VERBATIM,
};
use threshold_lab::sim::{run_ensemble, SimConfig};
use threshold_lab::{Error, ModelParams};

fn params(lambda: f64, d: usize, m: usize) -> ModelParams {
    ModelParams::new(lambda, 1.0, d, m).unwrap()
}

fn dist(lambda: f64, d: usize, m: usize) -> StationaryDistribution {
    let config = SolverConfig {
        k_max: 20_000,
        ..SolverConfig::default()
    };
    solve(&params(lambda, d, m), &config).unwrap()
}

fn lambda_grid() -> Vec<f64> {
    (1..=11).map(|i| 0.09 * i as f64).collect()
}

#[test]
fn stationary_measures_agree_with_a_large_simulation() {
    let p = params(0.39, 2, 2);
    let report = PerformanceReport::from_distribution(&dist(0.39, 2, 2));
    let config = SimConfig {
        n_replications: 4,
        ..SimConfig::defaults(&p, 500, 500)
    };
    let sim = run_ensemble(&p, &config).unwrap();
    assert!(
        sim.eq_mean.contains(report.eq),
        "E(Q) {} vs {:?}",
        report.eq,
        sim.eq_mean
    );
    assert!(
        sim.es_mean.contains(report.es_little),
        "E(S) {} vs {:?}",
        report.es_little,
        sim.es_mean
    );
    assert!(sim.dormant_fraction.contains(report.energy_saving));
    assert!(little_holds(&sim).0);

    let measured = PerformanceReport::from_simulation(&sim);
    assert_eq!(measured.flags, vec![FLAG_SIMULATED.to_string()]);
    assert!((measured.eq - measured.eq_w - measured.eq_d).abs() < 1e-9);
    // the published sojourn value is reported next to the measurement, not checked against it
    println!(
        "published E(S) {:.4}, simulated {:.4} +- {:.4}, relative gap {:.2}%",
        report.es_paper,
        sim.es_mean.mean,
        sim.es_mean.half_width,
        100.0 * (report.es_paper - sim.es_mean.mean) / sim.es_mean.mean
    );
}

#[test]
fn report_fields_are_consistent() {
    for (lambda, d, m) in [(0.2, 1, 1), (0.39, 2, 2), (0.8, 3, 5)] {
        let s = dist(lambda, d, m);
        let r = PerformanceReport::from_distribution(&s);
        assert_eq!(r.eq, r.eq_w + r.eq_d);
        assert!((r.es_little * lambda - r.eq).abs() <= 1e-14 * r.eq);
        assert!((r.energy_saving - (1.0 - lambda)).abs() < 1e-10);
        assert!(r.energy_saving > 0.0 && r.energy_saving < 1.0);
        assert!([r.eq_w, r.eq_d, r.es_w, r.es_v, r.es_paper]
            .iter()
            .all(|&x| x >= 0.0));
        assert_eq!(r.flags, vec![FLAG_VERBATIM.to_string()]);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["flags"][0], FLAG_VERBATIM);
    }
}

#[test]
fn classical_reductions() {
    let s = dist(0.5, 1, 2);
    assert!((queue_lengths(&s).2 - 1.5).abs() < 1e-9);
    assert!((sojourn_little(&s) - 3.0).abs() < 1e-8);
    for lambda in [0.2, 0.5, 0.8] {
        let s = dist(lambda, 1, 1);
        assert_eq!(queue_lengths(&s).1, 0.0);
        assert!((sojourn_little(&s) - 1.0 / (1.0 - lambda)).abs() < 1e-8);
    }
    assert!((energy_saving(&dist(0.39, 2, 2)) - 0.61).abs() < 1e-12);
    assert!(energy_saving(&dist(0.9999, 2, 2)) < 1e-3);
}

#[test]
fn published_sojourn_has_an_interior_minimum_in_load() {
    for d in [1, 2, 3] {
        let values: Vec<f64> = lambda_grid()
            .iter()
            .map(|&l| sojourn_paper(&dist(l, d, 2)).2)
            .collect();
        let argmin = (0..values.len())
            .min_by(|&a, &b| values[a].total_cmp(&values[b]))
            .unwrap();
        assert!(argmin > 0 && argmin + 1 < values.len(), "d={d}: {values:?}");
    }
}

#[test]
fn mean_queue_length_grows_with_load_and_threshold() {
    for d in [1, 2, 3] {
        for m in [2, 3, 5] {
            let eq: Vec<f64> = lambda_grid()
                .iter()
                .map(|&l| queue_lengths(&dist(l, d, m)).2)
                .collect();
            assert!(eq.windows(2).all(|w| w[1] >= w[0]), "d={d} m={m}");
        }
        for &lambda in &lambda_grid() {
            let eq: Vec<f64> = (1..=6)
                .map(|m| queue_lengths(&dist(lambda, d, m)).2)
                .collect();
            assert!(eq.windows(2).all(|w| w[1] >= w[0]), "d={d} lambda={lambda}");
        }
    }
}

#[test]
fn more_choices_shorten_queues_under_heavy_load() {
    for m in [2, 3, 5] {
        for lambda in [0.81, 0.9, 0.99] {
            let eq: Vec<f64> = (1..=3)
                .map(|d| queue_lengths(&dist(lambda, d, m)).2)
                .collect();
            assert!(
                eq.windows(2).all(|w| w[1] <= w[0]),
                "m={m} lambda={lambda}: {eq:?}"
            );
        }
    }
}

/// Under light load extra choices spread tasks over empty dormant servers,
/// where they sit below the threshold instead of filling one server up to
/// wake it. The mean queue then grows with `d`.
#[test]
fn more_choices_lengthen_queues_under_light_load() {
    for m in [2, 3, 5] {
        let eq: Vec<f64> = (1..=3)
            .map(|d| queue_lengths(&dist(0.09, d, m)).2)
            .collect();
        assert!(eq.windows(2).all(|w| w[1] > w[0]), "m={m}: {eq:?}");
    }
}

#[test]
fn threshold_grows_with_the_bound() {
    let p = params(0.5, 2, 2);
    let config = SolverConfig::default();
    let mut previous = 0;
    for bound in [2.0, 3.0, 4.0, 5.0, 6.0, 8.0] {
        let choice = optimal_threshold(&p, bound, Criterion::Eq, 40, &config).unwrap();
        assert!(choice.m >= previous);
        assert!(choice.value <= bound);
        previous = choice.m;
    }
    assert!(matches!(
        optimal_threshold(&p, 0.5, Criterion::Eq, 40, &config),
        Err(Error::BoundInfeasible { .. })
    ));
    let mut previous = 0;
    for bound in [4.0, 6.0, 10.0, 14.0] {
        let choice = optimal_threshold(&p, bound, Criterion::Es, 40, &config).unwrap();
        assert!(choice.m >= previous);
        previous = choice.m;
    }
}
