mod common;

use common::{gates, quadrature_cdf, rates, reference_rates};
use twoscale::data::dataset_from_draws;
use twoscale::inference::{
    fit, initial_guess, log_hidden_prior, log_likelihood, map_estimate,
    max_marginal_log_likelihood, run_mcmc, ChainConfig, PoolDataset, RateMode,
};
use twoscale::simulate::{simulate_distributional, SimConfig, SimMode};
use twoscale::stats::{binomial_log_pmf, mean};
use twoscale::two_scale::pool_prob;
use twoscale::{DiffusionRates, GateCount, PoolAngle, SeriesConfig};

fn synthetic(r: DiffusionRates, gs: &[u64], seed: u64) -> PoolDataset {
    let cfg = SimConfig::new(r, gates(gs), 8192, 1, seed, SimMode::Distributional);
    dataset_from_draws(&simulate_distributional(&cfg).unwrap()).unwrap()
}

#[test]
fn likelihood_is_additive() {
    let data = synthetic(reference_rates(), &[4, 40, 400, 1200], 3);
    let r = reference_rates();
    let th: Vec<PoolAngle> = [0.1, 0.4, 0.9, 1.6]
        .iter()
        .map(|&t| PoolAngle::new(t).unwrap())
        .collect();
    let total = log_likelihood(&data, &r, &th).unwrap();
    let by_hand: f64 = data
        .records
        .iter()
        .zip(&th)
        .map(|(rec, t)| {
            binomial_log_pmf(rec.zeros, rec.shots, pool_prob(*t, &r, rec.gates).value())
        })
        .sum();
    assert!((total - by_hand).abs() < 1e-9);
    let single = PoolDataset::new(vec![data.records[2].clone()]).unwrap();
    let part = log_likelihood(&single, &r, &th[2..3]).unwrap();
    assert!(
        (part
            - binomial_log_pmf(
                data.records[2].zeros,
                8192,
                pool_prob(th[2], &r, GateCount(400)).value()
            ))
        .abs()
            < 1e-12
    );
    assert!(log_hidden_prior(&th, &r, &data).unwrap().is_finite());
}

#[test]
fn hidden_angle_posterior_matches_quadrature() {
    let r = reference_rates();
    let data = synthetic(r, &[700], 17);
    let cfg = ChainConfig {
        total_iterations: 200_000,
        burn_in: 5_000,
        thin: 10,
        seed: 3,
        mode: RateMode::Fixed(r),
        ..ChainConfig::default()
    };
    let chain = run_mcmc(&data, &cfg).unwrap();
    let cdf = quadrature_cdf(&data.records[0], &r);
    let xs: Vec<f64> = chain
        .samples
        .iter()
        .map(|s| s.hidden_thetas[0].radians())
        .collect();
    let d = twoscale::stats::ks_statistic(&xs, cdf);
    assert!(d < 0.03, "sup distance {d}");
    assert!(chain.samples.iter().all(|s| s.rates == r));
}

/// Batch-means estimate of the mean and its standard error.
fn batch_mean(xs: &[f64]) -> (f64, f64) {
    let b = 25;
    let len = xs.len() / b;
    let means: Vec<f64> = (0..b).map(|i| mean(&xs[i * len..(i + 1) * len])).collect();
    let m = mean(&means);
    let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (m, (v / b as f64).sqrt())
}

#[test]
fn stationary_means_do_not_depend_on_proposal_scale() {
    let r = rates(0.02, 6e-4, 8e-4);
    let data = synthetic(r, &gate_span(20), 5);
    let run = |scale: f64, theta_scale: f64, seed: u64| {
        let cfg = ChainConfig {
            total_iterations: 120_000,
            burn_in: 20_000,
            thin: 10,
            rate_scale: scale,
            theta_scale,
            seed,
            adapt: false,
            initial: Some(r),
            ..ChainConfig::default()
        };
        run_mcmc(&data, &cfg).unwrap()
    };
    let a = run(0.03, 0.05, 1);
    let b = run(0.12, 0.2, 2);
    for (name, f) in [
        (
            "d_ini",
            (|r: &DiffusionRates| r.d_ini) as fn(&DiffusionRates) -> f64,
        ),
        ("d_n", |r| r.d_n),
        ("d_q", |r| r.d_q),
    ] {
        let xa: Vec<f64> = a.samples.iter().map(|s| f(&s.rates)).collect();
        let xb: Vec<f64> = b.samples.iter().map(|s| f(&s.rates)).collect();
        let (ma, sa) = batch_mean(&xa);
        let (mb, sb) = batch_mean(&xb);
        let z = (ma - mb).abs() / (sa * sa + sb * sb).sqrt();
        assert!(z < 4.0, "{name}: {ma} ± {sa} vs {mb} ± {sb}");
    }
}

fn gate_span(m: usize) -> Vec<u64> {
    (0..m)
        .map(|i| 4 * (1 + (i as f64 * 499.0 / (m - 1) as f64).round() as u64))
        .collect()
}

#[test]
fn no_spurious_pool_effect_without_pool_noise() {
    let data = synthetic(rates(0.0218, 8e-4, 0.0), &gate_span(30), 23);
    let cfg = ChainConfig {
        total_iterations: 20_000,
        burn_in: 10_000,
        seed: 4,
        ..ChainConfig::default()
    };
    let f = fit(&data, &cfg).unwrap();
    let rep = &f.report;
    assert!(
        rep.log_likelihood_ratio >= 0.0,
        "nested models: {}",
        rep.log_likelihood_ratio
    );
    assert!(
        rep.log_likelihood_ratio < 5.0,
        "ratio {}",
        rep.log_likelihood_ratio
    );
    assert_eq!(
        rep.log_likelihood_ratio,
        rep.max_log_lik_two_level - rep.max_log_lik_single_level
    );
}

#[test]
fn clear_pool_effect_is_detected() {
    let truth = rates(0.0218, 5e-4, 1e-3);
    let data = synthetic(truth, &gate_span(120), 29);
    let cfg = ChainConfig {
        total_iterations: 30_000,
        burn_in: 15_000,
        seed: 8,
        ..ChainConfig::default()
    };
    let f = fit(&data, &cfg).unwrap();
    let rep = &f.report;
    assert!(
        rep.log_likelihood_ratio > 100.0,
        "ratio {}",
        rep.log_likelihood_ratio
    );
    let low: Vec<f64> = f
        .chain
        .samples
        .iter()
        .map(|s| s.rates.d_q)
        .filter(|&d| d <= 0.5 * truth.d_q)
        .collect();
    assert!(
        low.is_empty(),
        "{} of {} samples below half, e.g. {:?}; posterior {:?}",
        low.len(),
        f.chain.samples.len(),
        &low[..low.len().min(5)],
        rep.posterior.d_q
    );
    assert!(
        rep.map_log_post
            >= f.chain
                .samples
                .iter()
                .map(|s| s.log_post)
                .fold(f64::NEG_INFINITY, f64::max)
    );
    let (map, thetas, _) =
        map_estimate(&data, &f.chain, RateMode::Full, &SeriesConfig::default()).unwrap();
    assert_eq!(map, rep.map);
    assert_eq!(thetas.len(), data.len());
}

#[test]
fn chains_are_deterministic() {
    let data = synthetic(reference_rates(), &[10, 200, 800, 1600], 31);
    let cfg = ChainConfig {
        total_iterations: 3_000,
        burn_in: 1_000,
        thin: 5,
        seed: 12,
        ..ChainConfig::default()
    };
    let a = run_mcmc(&data, &cfg).unwrap();
    assert_eq!(a, run_mcmc(&data, &cfg).unwrap());
    assert_eq!(a.samples.len(), cfg.sample_count());
    let other = run_mcmc(&data, &ChainConfig { seed: 13, ..cfg }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn two_level_maximum_dominates_single_level() {
    let series = SeriesConfig::default();
    for (i, truth) in [
        rates(0.01, 1e-3, 0.0),
        rates(0.03, 2e-4, 6e-4),
        reference_rates(),
    ]
    .into_iter()
    .enumerate()
    {
        let data = synthetic(truth, &gate_span(12), 40 + i as u64);
        let start = initial_guess(&data, RateMode::Full);
        let (_, single) = max_marginal_log_likelihood(&data, &[start], true, &series).unwrap();
        let (_, two) = max_marginal_log_likelihood(&data, &[start], false, &series).unwrap();
        assert!(two >= single, "{two} < {single}");
    }
}
