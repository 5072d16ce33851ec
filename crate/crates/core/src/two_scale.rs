//! Pool-level random walk superimposed on the Binomial-level walk.
//!
//! Individual shots diffuse with rate `d_n` (plus a one-time SPAM exposure
//! `d_ini`), which shrinks the mean Bloch vector to length
//! `R = e^{−2(d_ini + d_n·g)}`. The shared center of mass of one Binomial
//! experiment performs its own walk with rate `d_q`, giving
//! `P̄_q = 1/2 + R·cos(θ_q)/2` with `θ_q ~ p(θ; d_q·g)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::{Colatitude, Probability};
use crate::error::{Error, Result};
use crate::kernel::{
    self, clamp_density, DiffusionExposure, KernelSeries, SeriesConfig, ThetaSampler,
    DEFAULT_CDF_GRID,
};

/// Reduced lengths or pool exposures below this are treated as point masses.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// The three model parameters, in rad² (`d_ini`) and rad² per gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionRates {
    pub d_ini: f64,
    pub d_n: f64,
    pub d_q: f64,
}

impl DiffusionRates {
    pub fn new(d_ini: f64, d_n: f64, d_q: f64) -> Result<Self> {
        for (name, v) in [("d_ini", d_ini), ("d_n", d_n), ("d_q", d_q)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!(
                    "{name} = {v} must be finite and ≥ 0"
                )));
            }
        }
        Ok(DiffusionRates { d_ini, d_n, d_q })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.d_ini, self.d_n, self.d_q]
    }
}

/// Number of gate applications, the model's time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateCount(pub u64);

impl GateCount {
    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }
}

/// Colatitude of the pool-level center of mass of one Binomial experiment.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoolAngle(pub Colatitude);

impl PoolAngle {
    pub fn new(theta: f64) -> Result<Self> {
        Colatitude::new(theta).map(PoolAngle)
    }

    pub fn radians(self) -> f64 {
        self.0.radians()
    }
}

/// SPAM exposure once, then `g` unit steps: `d_ini + d_n·g`.
pub fn binomial_exposure(rates: &DiffusionRates, g: GateCount) -> DiffusionExposure {
    DiffusionExposure::new(rates.d_ini + rates.d_n * g.as_f64()).expect("non-negative rates")
}

/// Pool-level exposure `d_q·g`; the SPAM step does not act on the pool level.
pub fn pool_exposure(rates: &DiffusionRates, g: GateCount) -> DiffusionExposure {
    DiffusionExposure::new(rates.d_q * g.as_f64()).expect("non-negative rates")
}

/// `R = e^{−2(d_ini + d_n·g)}`.
pub fn reduced_length(rates: &DiffusionRates, g: GateCount) -> f64 {
    (-2.0 * binomial_exposure(rates, g).value()).exp()
}

/// `(P̄_min, P̄_max)`: the Binomial probabilities at `θ_q = π` and `θ_q = 0`.
pub fn bounds(rates: &DiffusionRates, g: GateCount) -> (Probability, Probability) {
    let upper = kernel::mean_prob(binomial_exposure(rates, g));
    let lower = Probability::from_unit(1.0 - upper.value());
    (lower, upper)
}

/// `P̄_q = 1/2 + R·cos(θ_q)/2`, guaranteed to lie within [`bounds`].
pub fn pool_prob(theta_q: PoolAngle, rates: &DiffusionRates, g: GateCount) -> Probability {
    let r = reduced_length(rates, g);
    let (lower, upper) = bounds(rates, g);
    let p = 0.5 + 0.5 * r * theta_q.radians().cos();
    Probability::from_unit(p.clamp(lower.value(), upper.value()))
}

/// Across-pool mean `P̌`: the single-level mean at exposure `d_ini + (d_n + d_q)·g`.
pub fn pool_mean(rates: &DiffusionRates, g: GateCount) -> Probability {
    let tau = rates.d_ini + (rates.d_n + rates.d_q) * g.as_f64();
    kernel::mean_prob(DiffusionExposure::new(tau).expect("non-negative rates"))
}

/// Variance of `(1 + cos θ_q)/2` under `θ_q ~ p(θ; d_q·g)`, before contraction by `R`.
pub fn overdispersion_variance(rates: &DiffusionRates, g: GateCount) -> f64 {
    kernel::moments(pool_exposure(rates, g)).variance
}

/// Variance of [`pool_prob`] across pools: `R² ·` [`overdispersion_variance`].
pub fn contracted_overdispersion_variance(rates: &DiffusionRates, g: GateCount) -> f64 {
    let r = reduced_length(rates, g);
    r * r * overdispersion_variance(rates, g)
}

/// Density of `P̄_q` at one gate count, with its series precomputed.
#[derive(Debug, Clone)]
pub struct PoolDistribution {
    rates: DiffusionRates,
    gates: GateCount,
    reduced_length: f64,
    series: KernelSeries,
}

impl PoolDistribution {
    /// Errors with [`Error::Degenerate`] when the distribution is a point mass:
    /// zero pool exposure (at the upper bound) or vanishing `R` (at 1/2).
    pub fn new(rates: &DiffusionRates, g: GateCount, cfg: &SeriesConfig) -> Result<Self> {
        let r = reduced_length(rates, g);
        if r < DEGENERACY_THRESHOLD {
            return Err(Error::Degenerate {
                at: 0.5,
                reason: format!("reduced length {r:e} has collapsed"),
            });
        }
        let tau_q = pool_exposure(rates, g);
        if tau_q.value() < DEGENERACY_THRESHOLD {
            return Err(Error::Degenerate {
                at: bounds(rates, g).1.value(),
                reason: "zero pool exposure: all pools sit at the upper bound".into(),
            });
        }
        Ok(PoolDistribution {
            rates: *rates,
            gates: g,
            reduced_length: r,
            series: KernelSeries::new(tau_q, cfg)?,
        })
    }

    pub fn reduced_length(&self) -> f64 {
        self.reduced_length
    }

    pub fn series(&self) -> &KernelSeries {
        &self.series
    }

    /// Raw density of `P̄_q`; zero outside the closed bounds.
    pub fn density(&self, p_bar: f64) -> Result<f64> {
        let (lower, upper) = bounds(&self.rates, self.gates);
        if p_bar < lower.value() || p_bar > upper.value() {
            return Ok(0.0);
        }
        let r = self.reduced_length;
        // In-bounds arguments can overshoot ±1 by rounding of order eps/R.
        let x = ((2.0 * p_bar - 1.0) / r).clamp(-1.0, 1.0);
        Ok(self.series.legendre_sum(x) / r)
    }

    /// Quantile of `P̄_q` at `level`, by inverting the colatitude CDF
    /// (`P̄_q` decreases in `θ_q`).
    pub fn quantile_with(&self, sampler: &ThetaSampler, level: f64) -> Probability {
        let theta = sampler.quantile(1.0 - level);
        pool_prob(
            PoolAngle(Colatitude::new(theta.clamp(0.0, std::f64::consts::PI)).expect("clamped")),
            &self.rates,
            self.gates,
        )
    }
}

/// Density of `P̄_q` (raw series value).
pub fn pool_pdf(
    p_bar: Probability,
    rates: &DiffusionRates,
    g: GateCount,
    cfg: &SeriesConfig,
) -> Result<f64> {
    PoolDistribution::new(rates, g, cfg)?.density(p_bar.value())
}

/// One gate count of a [`BandCurve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub gates: GateCount,
    pub lower: Probability,
    pub upper: Probability,
    pub pool_mean: Probability,
    /// `(level, P̄_q quantile)` in the order of the requested levels.
    pub percentiles: Vec<(f64, Probability)>,
}

/// Per-gate-count bounds, across-pool mean and percentile band of `P̄_q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCurve {
    pub rates: DiffusionRates,
    pub levels: Vec<f64>,
    pub points: Vec<BandPoint>,
}

impl BandCurve {
    /// Width between the two given percentile levels at every gate count.
    pub fn width(&self, low_level: f64, high_level: f64) -> Option<Vec<f64>> {
        let lo = self.levels.iter().position(|&l| l == low_level)?;
        let hi = self.levels.iter().position(|&l| l == high_level)?;
        Some(
            self.points
                .iter()
                .map(|p| p.percentiles[hi].1.value() - p.percentiles[lo].1.value())
                .collect(),
        )
    }
}

/// Evaluates bounds, mean and percentiles of `P̄_q` at each gate count.
///
/// Percentiles come from numeric inversion of the tabulated colatitude CDF.
/// Where the series cannot converge (pool exposure below ~5e-7) the
/// small-exposure limit `θ² ~ 4τ·Exp(1)` gives the quantiles in closed form.
pub fn band_curve(
    rates: &DiffusionRates,
    gates: &[GateCount],
    levels: &[f64],
    cfg: &SeriesConfig,
) -> Result<BandCurve> {
    cfg.validate()?;
    if let Some(&bad) = levels.iter().find(|&&l| !(l > 0.0 && l < 1.0)) {
        return Err(Error::Domain(format!(
            "percentile level {bad} outside (0, 1)"
        )));
    }
    let points = gates
        .par_iter()
        .map(|&g| band_point(rates, g, levels, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(BandCurve {
        rates: *rates,
        levels: levels.to_vec(),
        points,
    })
}

fn band_point(
    rates: &DiffusionRates,
    g: GateCount,
    levels: &[f64],
    cfg: &SeriesConfig,
) -> Result<BandPoint> {
    let (lower, upper) = bounds(rates, g);
    let mean = pool_mean(rates, g);
    let percentiles = match PoolDistribution::new(rates, g, cfg) {
        Ok(dist) => {
            let sampler = ThetaSampler::from_series(dist.series(), DEFAULT_CDF_GRID)?;
            levels
                .iter()
                .map(|&l| (l, dist.quantile_with(&sampler, l)))
                .collect()
        }
        Err(Error::Degenerate { at, .. }) => levels
            .iter()
            .map(|&l| (l, Probability::from_unit(at)))
            .collect(),
        Err(Error::Convergence(_)) => {
            let tau = pool_exposure(rates, g).value();
            levels
                .iter()
                .map(|&l| {
                    // P̄ level l is the θ level 1 − l: θ² = −4τ·ln(l).
                    let theta = (-4.0 * tau * l.ln()).sqrt().min(std::f64::consts::PI);
                    (
                        l,
                        pool_prob(PoolAngle::new(theta).expect("in range"), rates, g),
                    )
                })
                .collect()
        }
        Err(e) => return Err(e),
    };
    Ok(BandPoint {
        gates: g,
        lower,
        upper,
        pool_mean: mean,
        percentiles,
    })
}

/// Pool density evaluated with the tiny-negative clamp applied.
pub fn pool_pdf_clamped(
    p_bar: Probability,
    rates: &DiffusionRates,
    g: GateCount,
    cfg: &SeriesConfig,
) -> Result<f64> {
    clamp_density(pool_pdf(p_bar, rates, g, cfg)?)
}
