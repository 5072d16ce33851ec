mod common;

use std::f64::consts::PI;

use common::{assert_close, rates, reference_rates, simpson, tau};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twoscale::kernel::{moments, KernelSeries, ThetaSampler};
use twoscale::stats::{ks_pvalue, ks_statistic, mean};
use twoscale::two_scale::{
    band_curve, bounds, contracted_overdispersion_variance, pool_mean, pool_prob, PoolDistribution,
};
use twoscale::{GateCount, PoolAngle, SeriesConfig};

fn cfg() -> SeriesConfig {
    SeriesConfig::default()
}

#[test]
fn frozen_two_scale_values() {
    let r = reference_rates();
    let (lo, hi) = bounds(&r, GateCount(0));
    assert_close(hi.value(), 0.97866840781128051, 1e-16, "upper(0)");
    assert_close(lo.value(), 1.0 - 0.97866840781128051, 1e-16, "lower(0)");
    let d = PoolDistribution::new(&r, GateCount(500), &cfg()).unwrap();
    assert_close(d.reduced_length(), 0.58202609237277943, 1e-15, "R(500)");
    assert_close(
        d.density(0.6).unwrap(),
        1.2865867101474645,
        1e-12,
        "pool pdf",
    );
    assert_close(
        pool_mean(&r, GateCount(500)).value(),
        0.71043737405338302,
        1e-15,
        "pool mean",
    );
}

#[test]
fn sampler_matches_analytic_cdf() {
    for (t, seed) in [(2e-3, 1u64), (0.05, 2), (0.7, 3), (10.0, 4)] {
        let series = KernelSeries::new(tau(t), &cfg()).unwrap();
        let sampler = ThetaSampler::from_series(&series, 4096).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..20_000)
            .map(|_| sampler.sample(&mut rng).radians())
            .collect();
        let d = ks_statistic(&xs, |th| series.theta_cdf(th));
        let p = ks_pvalue(d, xs.len());
        assert!(p > 0.01, "τ={t}: KS D={d}, p={p}");
        let mc = mean(&xs.iter().map(|th| th.cos()).collect::<Vec<_>>());
        let se = (moments(tau(t)).variance * 4.0 / xs.len() as f64)
            .sqrt()
            .max(1e-6);
        assert!(
            (mc - (-2.0 * t).exp()).abs() < 4.0 * se,
            "τ={t}: E cos θ = {mc}"
        );
    }
}

#[test]
fn large_exposure_sampler_is_sine() {
    let sampler = ThetaSampler::new(tau(15.0), &cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs: Vec<f64> = (0..20_000)
        .map(|_| sampler.sample(&mut rng).radians())
        .collect();
    let d = ks_statistic(&xs, |th| 0.5 * (1.0 - th.cos()));
    assert!(ks_pvalue(d, xs.len()) > 0.01);
}

#[test]
fn pool_density_normalizes_and_reproduces_moments() {
    let r = reference_rates();
    for g in [4u64, 50, 300, 1500, 6000] {
        let g = GateCount(g);
        let d = PoolDistribution::new(&r, g, &cfg()).unwrap();
        let (lo, hi) = bounds(&r, g);
        let (a, b) = (lo.value(), hi.value());
        // Substitute p = 1/2 + R cos θ / 2 to integrate smoothly in θ.
        let rl = d.reduced_length();
        let lim = (14.0 * (r.d_q * g.as_f64()).sqrt()).min(PI);
        let f = |th: f64, k: i32| {
            let p = 0.5 + 0.5 * rl * th.cos();
            d.density(p).unwrap() * 0.5 * rl * th.sin() * p.powi(k)
        };
        let n0 = simpson(|th| f(th, 0), 0.0, lim, 20_000);
        let n1 = simpson(|th| f(th, 1), 0.0, lim, 20_000);
        let n2 = simpson(|th| f(th, 2), 0.0, lim, 20_000);
        assert_close(n0, 1.0, 1e-8, "∫pool pdf");
        assert_close(n1, pool_mean(&r, g).value(), 1e-8, "pool mean");
        assert_close(
            n2 - n1 * n1,
            contracted_overdispersion_variance(&r, g),
            1e-8,
            "pool variance",
        );
        assert_eq!(d.density(a - 1e-9).unwrap(), 0.0);
        assert_eq!(d.density(b + 1e-9).unwrap(), 0.0);
    }
}

#[test]
fn band_without_pool_noise_is_mirrored() {
    let r = rates(0.01, 1e-3, 0.0);
    let gs: Vec<GateCount> = (0..=3000).step_by(100).map(GateCount).collect();
    let band = band_curve(&r, &gs, &[0.1, 0.5, 0.9], &cfg()).unwrap();
    for p in &band.points {
        assert_close(p.lower.value() + p.upper.value(), 1.0, 1e-15, "mirror");
        for (_, q) in &p.percentiles {
            assert_eq!(q.value(), p.upper.value());
        }
    }
    let last = band.points.last().unwrap();
    assert!((last.upper.value() - 0.5).abs() < 0.01);
}

#[test]
fn band_percentiles_ordered_within_bounds() {
    let r = reference_rates();
    let gs: Vec<GateCount> = [1u64, 10, 100, 1000, 5000].map(GateCount).to_vec();
    let band = band_curve(&r, &gs, &[0.05, 0.5, 0.95], &cfg()).unwrap();
    for p in &band.points {
        let qs: Vec<f64> = p.percentiles.iter().map(|(_, q)| q.value()).collect();
        assert!(qs.windows(2).all(|w| w[0] <= w[1]));
        assert!(qs[0] >= p.lower.value() && qs[2] <= p.upper.value());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pool_prob_within_bounds(
        d_ini in 0.0f64..0.1, d_n in 0.0f64..5e-3, d_q in 0.0f64..5e-3,
        g in 0u64..20_000, th in 0.0f64..=PI,
    ) {
        let r = rates(d_ini, d_n, d_q);
        let g = GateCount(g);
        let (lo, hi) = bounds(&r, g);
        let p = pool_prob(PoolAngle::new(th).unwrap(), &r, g).value();
        prop_assert!(lo.value() <= p && p <= hi.value());
        prop_assert!(lo.value() <= 0.5 && hi.value() >= 0.5);
        let m = pool_mean(&r, g).value();
        prop_assert!(lo.value() <= m && m <= hi.value());
    }

    #[test]
    fn bounds_contract_with_gates(d_ini in 0.0f64..0.1, d_n in 1e-6f64..5e-3, g in 0u64..10_000) {
        let r = rates(d_ini, d_n, 0.0);
        let (_, a) = bounds(&r, GateCount(g));
        let (_, b) = bounds(&r, GateCount(g + 1));
        prop_assert!(b.value() <= a.value());
    }
}
