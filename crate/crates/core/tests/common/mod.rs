#![allow(dead_code)]

use std::f64::consts::PI;

use twoscale::inference::ShotRecord;
use twoscale::kernel::KernelSeries;
use twoscale::stats::binomial_log_pmf;
use twoscale::two_scale::{pool_exposure, pool_prob};
use twoscale::{DiffusionExposure, DiffusionRates, GateCount, PoolAngle, SeriesConfig};

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + h * i as f64);
    }
    s * h / 3.0
}

/// Simpson on `[0, 1]` with a separate refined panel on `[1 − w, 1]`, for
/// probability densities that spike at `p = 1` when the exposure is small.
pub fn simpson_unit<F: Fn(f64) -> f64>(f: F, w: f64, n: usize) -> f64 {
    let cut = (1.0 - w).max(0.0);
    let head = if cut > 0.0 {
        simpson(&f, 0.0, cut, n)
    } else {
        0.0
    };
    head + simpson(&f, cut, 1.0, n)
}

pub fn tau(x: f64) -> DiffusionExposure {
    DiffusionExposure::new(x).unwrap()
}

pub fn rates(d_ini: f64, d_n: f64, d_q: f64) -> DiffusionRates {
    DiffusionRates::new(d_ini, d_n, d_q).unwrap()
}

pub fn gates(gs: &[u64]) -> Vec<GateCount> {
    gs.iter().map(|&g| GateCount(g)).collect()
}

pub fn reference_rates() -> DiffusionRates {
    rates(0.0218, 4.9764e-4, 3.2418e-4)
}

pub fn assert_close(got: f64, want: f64, tol: f64, what: &str) {
    assert!(
        (got - want).abs() <= tol,
        "{what}: got {got:.17e}, want {want:.17e} (tol {tol:e})"
    );
}

/// Posterior CDF of θ for one record with the rates fixed, by quadrature.
pub fn quadrature_cdf(rec: &ShotRecord, r: &DiffusionRates) -> impl Fn(f64) -> f64 {
    let series = KernelSeries::new(pool_exposure(r, rec.gates), &SeriesConfig::default()).unwrap();
    let r = *r;
    let rec = rec.clone();
    let log_f = move |th: f64| {
        let p = pool_prob(PoolAngle::new(th).unwrap(), &r, rec.gates).value();
        binomial_log_pmf(rec.zeros, rec.shots, p) + series.theta_density(th).max(1e-300).ln()
    };
    let n = 4000;
    let grid: Vec<f64> = (0..=n).map(|i| PI * i as f64 / n as f64).collect();
    let peak = grid
        .iter()
        .map(|&t| log_f(t))
        .fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = grid.iter().map(|&t| (log_f(t) - peak).exp()).collect();
    let mut cum = vec![0.0; n + 1];
    for i in 1..=n {
        cum[i] = cum[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * (grid[i] - grid[i - 1]);
    }
    let total = cum[n];
    move |th: f64| {
        let x = (th / PI * n as f64).clamp(0.0, n as f64 - 1e-9);
        let i = x.floor() as usize;
        let t = x - i as f64;
        (cum[i] + t * (cum[i + 1] - cum[i])) / total
    }
}
