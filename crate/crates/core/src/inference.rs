//! Bayesian fitting of `(d_ini, d_n, d_q)` with one hidden pool angle per record.
//!
//! The posterior is explored by Metropolis-Hastings with a Gibbs split:
//! rate moves on the log-rates alternate with independent random-walk updates
//! of each `θ_q`. Three rate moves are used per iteration:
//!
//! - a plain block random walk with all `θ_q` held fixed,
//! - a block random walk in which every `θ_q` is moved so that its Binomial
//!   probability `P̄_q` is unchanged (the move follows the likelihood ridge),
//! - a joint rescaling of `d_q` and all `θ_q` by `√(d_q'/d_q)`.
//!
//! The prior on the rates is flat on the positive reals; acceptance ratios
//! carry the log-rate Jacobian and, for the deterministic `θ` maps, their
//! Jacobians as well.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::kernel::{
    log_theta_pdf_asymptotic, DiffusionExposure, KernelSeries, SeriesConfig, SMALL_EXPOSURE,
};
use crate::rng::{domain, stream};
use crate::stats::{mean, quantile_sorted, variance, CompensatedSum};
use crate::two_scale::{pool_prob, DiffusionRates, GateCount, PoolAngle};

/// Iterations between checks for a stuck sampler.
pub const ACCEPTANCE_WINDOW: u64 = 10_000;
/// Burn-in iterations between scale adjustments.
const ADAPT_BATCH: u64 = 100;
const TARGET_RATE_ACCEPT: f64 = 0.3;
const TARGET_THETA_ACCEPT: f64 = 0.4;
/// Intervals of the θ quadrature used by [`marginal_log_likelihood`].
pub const MARGINAL_GRID: usize = 2048;
/// Proposals with any rate at or above this are rejected outright.
const MAX_RATE: f64 = 1e3;
/// Records needed by [`fit_report`].
pub const MIN_RECORDS: usize = 3;

/// One Binomial experiment: `zeros` of `shots` readouts gave `|0⟩` after `gates` gates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub gates: GateCount,
    pub shots: u64,
    pub zeros: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl ShotRecord {
    pub fn new(
        gates: GateCount,
        shots: u64,
        zeros: u64,
        timestamp: Option<String>,
    ) -> Result<Self> {
        if shots == 0 {
            return Err(Error::Invalid("shots must be ≥ 1".into()));
        }
        if zeros > shots {
            return Err(Error::Invalid(format!("zeros > shots ({zeros} > {shots})")));
        }
        Ok(ShotRecord {
            gates,
            shots,
            zeros,
            timestamp,
        })
    }

    pub fn frequency(&self) -> f64 {
        self.zeros as f64 / self.shots as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PoolDataset {
    pub records: Vec<ShotRecord>,
}

impl PoolDataset {
    pub fn new(records: Vec<ShotRecord>) -> Result<Self> {
        for r in &records {
            ShotRecord::new(r.gates, r.shots, r.zeros, None)?;
        }
        Ok(PoolDataset { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Which rates the chain moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "rates", rename_all = "snake_case")]
pub enum RateMode {
    /// All three rates and all hidden angles.
    #[default]
    Full,
    /// `d_q = 0` and every `θ_q = 0`; only `d_ini` and `d_n` move.
    SingleLevel,
    /// Rates held at the given values; only the hidden angles move.
    Fixed(DiffusionRates),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Iterations after burn-in.
    pub total_iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    /// Initial standard deviation of the log-rate random walk.
    pub rate_scale: f64,
    /// Initial standard deviation of the `θ_q` random walk (rad).
    pub theta_scale: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: RateMode,
    /// Tune proposal scales during burn-in. Scales are frozen afterwards.
    #[serde(default = "default_true")]
    pub adapt: bool,
    /// Starting rates; a regression on the data is used when absent.
    #[serde(default)]
    pub initial: Option<DiffusionRates>,
    #[serde(default)]
    pub series: SeriesConfig,
}

fn default_true() -> bool {
    true
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            total_iterations: 1_000_000,
            burn_in: 100_000,
            thin: 20,
            rate_scale: 0.05,
            theta_scale: 0.1,
            seed: 0,
            mode: RateMode::Full,
            adapt: true,
            initial: None,
            series: SeriesConfig::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Invalid("thin must be ≥ 1".into()));
        }
        if !(self.rate_scale > 0.0 && self.rate_scale.is_finite())
            || !(self.theta_scale > 0.0 && self.theta_scale.is_finite())
        {
            return Err(Error::Invalid("proposal scales must be positive".into()));
        }
        self.series.validate()
    }

    /// Number of stored samples, `total_iterations / thin`.
    pub fn sample_count(&self) -> usize {
        (self.total_iterations / self.thin.max(1)) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub rates: DiffusionRates,
    pub hidden_thetas: Vec<PoolAngle>,
    pub log_lik: f64,
    pub log_post: f64,
}

/// Post burn-in acceptance fractions per move type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Acceptance {
    pub rate_block: f64,
    pub ridge: f64,
    pub pool_scale: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub samples: Vec<PosteriorSample>,
    pub acceptance: Acceptance,
}

/// Log density of `θ_q` at one pool exposure.
#[derive(Debug, Clone)]
enum Hidden {
    /// Zero exposure: point mass at the north pole.
    Pinned,
    /// Below [`SMALL_EXPOSURE`]: asymptotic form.
    Small(f64),
    Series(KernelSeries),
}

impl Hidden {
    fn new(tau: f64, cfg: &SeriesConfig) -> Result<Self> {
        if tau == 0.0 {
            Ok(Hidden::Pinned)
        } else if tau < SMALL_EXPOSURE {
            Ok(Hidden::Small(tau))
        } else {
            Ok(Hidden::Series(KernelSeries::new(
                DiffusionExposure::new(tau)?,
                cfg,
            )?))
        }
    }

    /// Upper end of the θ range holding all but a negligible part of the mass.
    fn support(&self) -> f64 {
        match self {
            Hidden::Pinned => 0.0,
            Hidden::Small(t) => (14.0 * t.sqrt()).min(PI),
            Hidden::Series(s) => (14.0 * s.exposure().value().sqrt()).min(PI),
        }
    }

    fn log_density(&self, theta: f64) -> f64 {
        match self {
            Hidden::Pinned => {
                if theta == 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Hidden::Small(t) => log_theta_pdf_asymptotic(theta, *t),
            Hidden::Series(s) => {
                let tau = s.exposure().value();
                if tau < 0.05 && theta > 10.0 * tau.sqrt() {
                    return log_theta_pdf_asymptotic(theta, tau);
                }
                let d = s.theta_density(theta);
                if d > 0.0 {
                    d.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

/// Per-record constants.
#[derive(Debug, Clone, Copy)]
struct Rec {
    g: f64,
    n: u64,
    z: u64,
    ln_choose: f64,
    pinned: bool,
}

impl Rec {
    #[inline]
    fn log_lik(&self, p: f64) -> f64 {
        let mut out = self.ln_choose;
        if self.z > 0 {
            if p <= 0.0 {
                return f64::NEG_INFINITY;
            }
            out += self.z as f64 * p.ln();
        }
        if self.n > self.z {
            if p >= 1.0 {
                return f64::NEG_INFINITY;
            }
            out += (self.n - self.z) as f64 * (-p).ln_1p();
        }
        out
    }
}

#[inline]
fn reduced(rates: &DiffusionRates, g: f64) -> f64 {
    (-2.0 * (rates.d_ini + rates.d_n * g)).exp()
}

#[inline]
fn prob(r: f64, theta: f64) -> f64 {
    (0.5 + 0.5 * r * theta.cos()).clamp(0.0, 1.0)
}

struct Model {
    recs: Vec<Rec>,
    series: SeriesConfig,
}

impl Model {
    fn new(data: &PoolDataset, series: SeriesConfig) -> Self {
        let recs = data
            .records
            .iter()
            .map(|r| Rec {
                g: r.gates.as_f64(),
                n: r.shots,
                z: r.zeros,
                ln_choose: ln_binomial(r.shots, r.zeros),
                pinned: r.gates.0 == 0,
            })
            .collect();
        Model { recs, series }
    }

    fn hidden(&self, rates: &DiffusionRates) -> Result<Vec<Hidden>> {
        self.recs
            .iter()
            .map(|r| Hidden::new(rates.d_q * r.g, &self.series))
            .collect()
    }

    fn reduced(&self, rates: &DiffusionRates) -> Vec<f64> {
        self.recs.iter().map(|r| reduced(rates, r.g)).collect()
    }

    /// Marginal likelihood of one record: `∫ Binom(z; n, P̄(θ)) p(θ) dθ`.
    fn record_marginal(&self, rec: &Rec, r: f64, hidden: &Hidden) -> f64 {
        if matches!(hidden, Hidden::Pinned) {
            return rec.log_lik(prob(r, 0.0));
        }
        let hi = hidden.support();
        let n = MARGINAL_GRID;
        let h = hi / n as f64;
        let mut terms = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let th = h * i as f64;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let v = rec.log_lik(prob(r, th)) + hidden.log_density(th);
            if v > f64::NEG_INFINITY {
                terms.push(v + f64::ln(w * h / 3.0));
            }
        }
        log_sum_exp(&terms)
    }

    fn marginal(&self, rates: &DiffusionRates) -> Result<f64> {
        let hidden = self.hidden(rates)?;
        let mut acc = CompensatedSum::new();
        for (rec, hd) in self.recs.iter().zip(&hidden) {
            acc.add(self.record_marginal(rec, reduced(rates, rec.g), hd));
        }
        Ok(acc.value())
    }

    /// `max_θ [log Binom + log p(θ)]` for one record.
    fn best_theta(&self, rec: &Rec, r: f64, hidden: &Hidden) -> (f64, f64) {
        let f = |th: f64| rec.log_lik(prob(r, th)) + hidden.log_density(th);
        if matches!(hidden, Hidden::Pinned) {
            return (0.0, f(0.0));
        }
        let hi = hidden.support();
        let n = 256;
        let step = hi / n as f64;
        let (mut bi, mut bv) = (1, f64::NEG_INFINITY);
        for i in 1..=n {
            let v = f(step * i as f64);
            if v > bv {
                bi = i;
                bv = v;
            }
        }
        let (mut a, mut b) = (step * (bi - 1) as f64, (step * (bi + 1) as f64).min(hi));
        let gr = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - gr * (b - a);
        let mut d = a + gr * (b - a);
        let (mut fc, mut fd) = (f(c), f(d));
        for _ in 0..60 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - gr * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + gr * (b - a);
                fd = f(d);
            }
        }
        let th = 0.5 * (a + b);
        let v = f(th);
        if v >= bv {
            (th, v)
        } else {
            (step * bi as f64, bv)
        }
    }

    /// Profile log posterior: hidden angles maximized record by record.
    fn profile_log_post(&self, rates: &DiffusionRates) -> Result<(f64, Vec<f64>)> {
        let hidden = self.hidden(rates)?;
        let mut acc = CompensatedSum::new();
        let mut thetas = Vec::with_capacity(self.recs.len());
        for (rec, hd) in self.recs.iter().zip(&hidden) {
            let (th, v) = self.best_theta(rec, reduced(rates, rec.g), hd);
            acc.add(v);
            thetas.push(th);
        }
        Ok((acc.value(), thetas))
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut s = CompensatedSum::new();
    for &x in xs {
        s.add((x - m).exp());
    }
    m + s.value().ln()
}

fn check_lengths(data: &PoolDataset, thetas: &[PoolAngle]) -> Result<()> {
    if thetas.len() != data.len() {
        return Err(Error::LengthMismatch {
            expected: data.len(),
            got: thetas.len(),
        });
    }
    Ok(())
}

/// `Σ_q ln Binom(zeros_q; n_q, P̄_q(θ_q))`.
pub fn log_likelihood(
    data: &PoolDataset,
    rates: &DiffusionRates,
    thetas: &[PoolAngle],
) -> Result<f64> {
    check_lengths(data, thetas)?;
    let mut acc = CompensatedSum::new();
    for (r, th) in data.records.iter().zip(thetas) {
        let p = pool_prob(*th, rates, r.gates).value();
        acc.add(crate::stats::binomial_log_pmf(r.zeros, r.shots, p));
    }
    Ok(acc.value())
}

/// `Σ_q ln p(θ_q; d_q·g_q)` over records with `g_q ≥ 1`.
///
/// Errors with [`Error::Degenerate`] when such a record has zero pool
/// exposure: its angle is then a point mass at 0 and must be handled as such.
pub fn log_hidden_prior(
    thetas: &[PoolAngle],
    rates: &DiffusionRates,
    data: &PoolDataset,
) -> Result<f64> {
    check_lengths(data, thetas)?;
    let cfg = SeriesConfig::default();
    let mut acc = CompensatedSum::new();
    for (r, th) in data.records.iter().zip(thetas) {
        if r.gates.0 == 0 {
            continue;
        }
        let tau = rates.d_q * r.gates.as_f64();
        if tau == 0.0 {
            return Err(Error::Degenerate {
                at: 0.0,
                reason: format!(
                    "pool exposure is zero at g = {}; treat θ_q as a point mass at 0",
                    r.gates.0
                ),
            });
        }
        acc.add(Hidden::new(tau, &cfg)?.log_density(th.radians()));
    }
    Ok(acc.value())
}

/// Log of the unnormalized posterior: likelihood plus hidden prior.
pub fn log_posterior(
    data: &PoolDataset,
    rates: &DiffusionRates,
    thetas: &[PoolAngle],
) -> Result<f64> {
    let ll = log_likelihood(data, rates, thetas)?;
    let pinned = rates.d_q == 0.0;
    if pinned {
        let ok = data
            .records
            .iter()
            .zip(thetas)
            .all(|(_, th)| th.radians() == 0.0);
        return Ok(if ok { ll } else { f64::NEG_INFINITY });
    }
    Ok(ll + log_hidden_prior(thetas, rates, data)?)
}

/// Likelihood with each `θ_q` integrated out against `p(θ; d_q·g_q)`.
///
/// With `d_q = 0` this is the single-level likelihood.
pub fn marginal_log_likelihood(
    data: &PoolDataset,
    rates: &DiffusionRates,
    series: &SeriesConfig,
) -> Result<f64> {
    Model::new(data, *series).marginal(rates)
}

/// Starting rates from the decay of `2F − 1`: `−½ ln(2F−1) ≈ d_ini + (d_n + d_q)·g`.
pub fn initial_guess(data: &PoolDataset, mode: RateMode) -> DiffusionRates {
    let pts: Vec<(f64, f64)> = data
        .records
        .iter()
        .filter_map(|r| {
            let c = 2.0 * r.frequency() - 1.0;
            (c > 0.05).then(|| (r.gates.as_f64(), -0.5 * c.ln()))
        })
        .collect();
    let (intercept, slope) = if pts.len() >= 2 {
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx > 0.0 {
            let s = sxy / sxx;
            (my - s * mx, s)
        } else {
            (my, 1e-4)
        }
    } else {
        (1e-2, 1e-4)
    };
    let slope = slope.max(1e-7);
    let d_ini = intercept.max(1e-5);
    match mode {
        RateMode::Full => DiffusionRates {
            d_ini,
            d_n: 0.5 * slope,
            d_q: 0.5 * slope,
        },
        RateMode::SingleLevel => DiffusionRates {
            d_ini,
            d_n: slope,
            d_q: 0.0,
        },
        RateMode::Fixed(r) => r,
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counter {
    tried: u64,
    accepted: u64,
}

impl Counter {
    fn record(&mut self, ok: bool) {
        self.tried += 1;
        self.accepted += ok as u64;
    }

    fn fraction(&self) -> f64 {
        if self.tried == 0 {
            0.0
        } else {
            self.accepted as f64 / self.tried as f64
        }
    }
}

fn with_rate(rates: &DiffusionRates, i: usize, v: f64) -> DiffusionRates {
    let mut a = rates.as_array();
    a[i] = v;
    DiffusionRates {
        d_ini: a[0],
        d_n: a[1],
        d_q: a[2],
    }
}

fn from_array(a: [f64; 3]) -> DiffusionRates {
    DiffusionRates {
        d_ini: a[0],
        d_n: a[1],
        d_q: a[2],
    }
}

#[inline]
fn reflect(mut th: f64) -> f64 {
    loop {
        if th < 0.0 {
            th = -th;
        } else if th > PI {
            th = 2.0 * PI - th;
        } else {
            return th;
        }
    }
}

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

struct State {
    rates: DiffusionRates,
    u: Vec<f64>,
    thetas: Vec<f64>,
    hidden: Vec<Hidden>,
    r: Vec<f64>,
    ll: Vec<f64>,
    lp: Vec<f64>,
}

impl State {
    fn log_lik(&self) -> f64 {
        let mut s = CompensatedSum::new();
        self.ll.iter().for_each(|&x| s.add(x));
        s.value()
    }

    fn log_post(&self) -> f64 {
        let mut s = CompensatedSum::new();
        self.ll.iter().chain(&self.lp).for_each(|&x| s.add(x));
        s.value()
    }

    /// Log target on the (log-rate, θ) scale: posterior plus `Σ u`.
    fn target(&self) -> f64 {
        self.log_post() + self.u.iter().sum::<f64>()
    }
}

struct Sampler<'a> {
    model: &'a Model,
    free: Vec<usize>,
    full: bool,
}

impl Sampler<'_> {
    fn build(&self, rates: DiffusionRates, u: Vec<f64>, thetas: Vec<f64>) -> Result<Option<State>> {
        if !rates
            .as_array()
            .iter()
            .all(|&x| x.is_finite() && x < MAX_RATE)
        {
            return Ok(None);
        }
        let hidden = self.model.hidden(&rates)?;
        let r = self.model.reduced(&rates);
        let mut ll = Vec::with_capacity(thetas.len());
        let mut lp = Vec::with_capacity(thetas.len());
        for (q, rec) in self.model.recs.iter().enumerate() {
            ll.push(rec.log_lik(prob(r[q], thetas[q])));
            lp.push(if self.full {
                hidden[q].log_density(thetas[q])
            } else {
                0.0
            });
        }
        Ok(Some(State {
            rates,
            u,
            thetas,
            hidden,
            r,
            ll,
            lp,
        }))
    }

    fn rates_from_u(&self, base: &DiffusionRates, u: &[f64]) -> DiffusionRates {
        let mut a = base.as_array();
        for (k, &i) in self.free.iter().enumerate() {
            a[i] = u[k].exp();
        }
        from_array(a)
    }

    fn propose_u(
        &self,
        rng: &mut ChaCha8Rng,
        u: &[f64],
        chol: &[Vec<f64>],
        scale: f64,
    ) -> Vec<f64> {
        let d = u.len();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..d)
            .map(|i| u[i] + scale * (0..=i).map(|j| chol[i][j] * z[j]).sum::<f64>())
            .collect()
    }

    /// Metropolis step towards `cand`; `log_j` is the log Jacobian of the map.
    fn try_move(rng: &mut ChaCha8Rng, st: &mut State, cand: Option<State>, log_j: f64) -> bool {
        let Some(cand) = cand else { return false };
        let ok = Self::accept(rng, cand.target() - st.target() + log_j);
        if ok {
            *st = cand;
        }
        ok
    }

    fn accept(rng: &mut ChaCha8Rng, log_alpha: f64) -> bool {
        if log_alpha.is_nan() {
            return false;
        }
        log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha
    }
}

/// Runs the Metropolis-within-Gibbs chain and returns
/// `total_iterations / thin` post burn-in samples.
pub fn run_mcmc(data: &PoolDataset, cfg: &ChainConfig) -> Result<Chain> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("dataset has no records".into()));
    }
    let model = Model::new(data, cfg.series);
    let (free, full, tag) = match cfg.mode {
        RateMode::Full => (vec![0, 1, 2], true, 0),
        RateMode::SingleLevel => (vec![0, 1], false, 1),
        RateMode::Fixed(r) => (Vec::new(), r.d_q > 0.0, 2),
    };
    let sampler = Sampler {
        model: &model,
        free: free.clone(),
        full,
    };
    let mut rng = stream(cfg.seed, &[domain::MCMC, tag]);

    let mut rates = match cfg.mode {
        RateMode::Fixed(r) => r,
        mode => cfg.initial.unwrap_or_else(|| initial_guess(data, mode)),
    };
    if cfg.mode == RateMode::SingleLevel {
        rates.d_q = 0.0;
    }
    for &i in &free {
        if !(rates.as_array()[i] > 0.0) {
            rates = with_rate(&rates, i, 1e-8);
        }
    }
    let u: Vec<f64> = free.iter().map(|&i| rates.as_array()[i].ln()).collect();

    let hidden0 = model.hidden(&rates)?;
    let thetas: Vec<f64> = model
        .recs
        .iter()
        .zip(&hidden0)
        .map(|(rec, hd)| {
            if !full || rec.pinned {
                return 0.0;
            }
            let r = reduced(&rates, rec.g);
            let c = ((2.0 * rec.z as f64 / rec.n as f64 - 1.0) / r).clamp(-1.0, 1.0);
            let th = c.acos();
            if hd.log_density(th).is_finite() && rec.log_lik(prob(r, th)).is_finite() {
                th
            } else {
                model.best_theta(rec, r, hd).0
            }
        })
        .collect();
    let mut st = sampler
        .build(rates, u, thetas)?
        .ok_or_else(|| Error::Invalid("starting rates out of range".into()))?;
    if !st.target().is_finite() {
        return Err(Error::Invalid(
            "starting point has zero posterior density".into(),
        ));
    }

    let d = free.len();
    let m = model.recs.len();
    let mut chol: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut s_block = cfg.rate_scale;
    let mut s_ridge = cfg.rate_scale;
    let mut s_pool = cfg.rate_scale;
    let mut s_theta = vec![cfg.theta_scale; m];
    let active: Vec<usize> = (0..m).filter(|&q| full && !model.recs[q].pinned).collect();

    let (mut c_block, mut c_ridge, mut c_pool) =
        (Counter::default(), Counter::default(), Counter::default());
    let mut c_theta = vec![Counter::default(); m];
    let (mut w_block, mut w_theta) = (Counter::default(), Counter::default());
    let mut post = [Counter::default(); 4];
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut samples = Vec::with_capacity(cfg.sample_count());
    let total = cfg.burn_in + cfg.total_iterations;

    for it in 0..total {
        let burning = it < cfg.burn_in;

        if d > 0 {
            // Plain block move.
            let u2 = sampler.propose_u(&mut rng, &st.u, &chol, s_block);
            let r2 = sampler.rates_from_u(&st.rates, &u2);
            let cand = sampler.build(r2, u2, st.thetas.clone())?;
            let ok = Sampler::try_move(&mut rng, &mut st, cand, 0.0);
            c_block.record(ok);
            w_block.record(ok);
            if !burning {
                post[0].record(ok);
            }
        }

        if full && d > 0 && !active.is_empty() {
            // Ridge move: keep every P̄_q fixed.
            let u2 = sampler.propose_u(&mut rng, &st.u, &chol, s_ridge);
            let r2 = sampler.rates_from_u(&st.rates, &u2);
            let rr = model.reduced(&r2);
            let mut th2 = st.thetas.clone();
            let mut log_j = 0.0;
            let mut feasible = true;
            for &q in &active {
                let c = st.r[q] * st.thetas[q].cos() / rr[q];
                if !(c.abs() < 1.0) {
                    feasible = false;
                    break;
                }
                let t = c.acos();
                let (s0, s1) = (st.thetas[q].sin(), t.sin());
                if !(s0 > 0.0 && s1 > 0.0) {
                    feasible = false;
                    break;
                }
                log_j += (st.r[q] * s0).ln() - (rr[q] * s1).ln();
                th2[q] = t;
            }
            let ok = if feasible {
                let cand = sampler.build(r2, u2, th2)?;
                Sampler::try_move(&mut rng, &mut st, cand, log_j)
            } else {
                false
            };
            c_ridge.record(ok);
            if !burning {
                post[1].record(ok);
            }

            // Pool-scale move: d_q and all θ_q together.
            let k_idx = d - 1;
            let step = s_pool * rng.sample::<f64, _>(StandardNormal);
            let mut u2 = st.u.clone();
            u2[k_idx] += step;
            let factor = (0.5 * step).exp();
            let mut th2 = st.thetas.clone();
            let mut feasible = true;
            for &q in &active {
                th2[q] *= factor;
                if th2[q] > PI {
                    feasible = false;
                    break;
                }
            }
            let ok = if feasible {
                let r2 = sampler.rates_from_u(&st.rates, &u2);
                let cand = sampler.build(r2, u2, th2)?;
                let log_j = 0.5 * step * active.len() as f64;
                Sampler::try_move(&mut rng, &mut st, cand, log_j)
            } else {
                false
            };
            c_pool.record(ok);
            if !burning {
                post[2].record(ok);
            }
        }

        for &q in &active {
            let th = reflect(st.thetas[q] + s_theta[q] * rng.sample::<f64, _>(StandardNormal));
            let rec = &model.recs[q];
            let ll = rec.log_lik(prob(st.r[q], th));
            let lp = st.hidden[q].log_density(th);
            let ok = Sampler::accept(&mut rng, ll + lp - st.ll[q] - st.lp[q]);
            if ok {
                st.thetas[q] = th;
                st.ll[q] = ll;
                st.lp[q] = lp;
            }
            c_theta[q].record(ok);
            w_theta.record(ok);
            if !burning {
                post[3].record(ok);
            }
        }

        if burning && cfg.adapt {
            if d > 1 && it >= cfg.burn_in / 4 && it < cfg.burn_in / 2 {
                history.push(st.u.clone());
            }
            if d > 1 && it + 1 == cfg.burn_in / 2 && history.len() >= 50 * d {
                let cols: Vec<Vec<f64>> = (0..d)
                    .map(|i| history.iter().map(|h| h[i]).collect())
                    .collect();
                let means: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
                let nh = history.len() as f64;
                let cov: Vec<Vec<f64>> = (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| {
                                let s: f64 = history
                                    .iter()
                                    .map(|h| (h[i] - means[i]) * (h[j] - means[j]))
                                    .sum();
                                s / (nh - 1.0) + if i == j { 1e-12 } else { 0.0 }
                            })
                            .collect()
                    })
                    .collect();
                if let Some(l) = cholesky(&cov) {
                    chol = l;
                    let s = 2.38 / (d as f64).sqrt();
                    s_block = s;
                    s_ridge = s;
                }
                history.clear();
            }
            if (it + 1) % ADAPT_BATCH == 0 {
                let batch = ((it + 1) / ADAPT_BATCH) as f64;
                let gain = (1.0 / batch.sqrt()).max(0.05);
                let tune = |s: &mut f64, c: &mut Counter, target: f64| {
                    if c.tried > 0 {
                        *s = (*s * ((c.fraction() - target) * gain * 2.0).exp()).clamp(1e-6, 10.0);
                    }
                    *c = Counter::default();
                };
                tune(&mut s_block, &mut c_block, TARGET_RATE_ACCEPT);
                tune(&mut s_ridge, &mut c_ridge, TARGET_RATE_ACCEPT);
                tune(&mut s_pool, &mut c_pool, TARGET_RATE_ACCEPT);
                for q in 0..m {
                    let mut s = s_theta[q];
                    tune(&mut s, &mut c_theta[q], TARGET_THETA_ACCEPT);
                    s_theta[q] = s.min(PI);
                }
            }
        }

        if (it + 1) % ACCEPTANCE_WINDOW == 0 {
            for (name, c) in [("rate", &w_block), ("hidden-angle", &w_theta)] {
                if c.tried > 0 && c.accepted == 0 {
                    return Err(Error::Adaptation(format!(
                        "no {name} proposal accepted in iterations {}..{}",
                        it + 1 - ACCEPTANCE_WINDOW,
                        it + 1
                    )));
                }
            }
            w_block = Counter::default();
            w_theta = Counter::default();
        }

        if !burning && (it - cfg.burn_in + 1).is_multiple_of(cfg.thin) {
            samples.push(PosteriorSample {
                rates: st.rates,
                hidden_thetas: st
                    .thetas
                    .iter()
                    .map(|&t| PoolAngle::new(t).expect("θ kept in [0, π]"))
                    .collect(),
                log_lik: st.log_lik(),
                log_post: st.log_post(),
            });
        }
    }

    Ok(Chain {
        samples,
        acceptance: Acceptance {
            rate_block: post[0].fraction(),
            ridge: post[1].fraction(),
            pool_scale: post[2].fraction(),
            theta: post[3].fraction(),
        },
    })
}

/// Coordinate ascent of `f` over the listed rate coordinates, in log space.
/// Coordinates at zero are first probed at `10^{-2} … 10^{-9}`.
fn coordinate_ascent<F: Fn(&DiffusionRates) -> f64>(
    f: F,
    start: DiffusionRates,
    start_val: f64,
    free: &[usize],
) -> (DiffusionRates, f64) {
    let mut best = start;
    let mut bv = start_val;
    for _sweep in 0..60 {
        let before = bv;
        for &i in free {
            if best.as_array()[i] == 0.0 {
                for j in 2..=9 {
                    let cand = with_rate(&best, i, 10f64.powi(-j));
                    let v = f(&cand);
                    if v > bv {
                        best = cand;
                        bv = v;
                    }
                }
                if best.as_array()[i] == 0.0 {
                    continue;
                }
            }
            let mut h: f64 = 0.5;
            while h > 1e-5 {
                let x = best.as_array()[i];
                let up = with_rate(&best, i, x * h.exp());
                let dn = with_rate(&best, i, x * (-h).exp());
                let (vu, vd) = (f(&up), f(&dn));
                if vu > bv && vu >= vd {
                    best = up;
                    bv = vu;
                } else if vd > bv {
                    best = dn;
                    bv = vd;
                } else {
                    h *= 0.5;
                }
            }
        }
        if bv - before < 1e-9 {
            break;
        }
    }
    (best, bv)
}

/// Highest-log-posterior sample, refined by coordinate ascent on the rates with
/// each hidden angle re-optimized. Returns rates, angles and log posterior.
pub fn map_estimate(
    data: &PoolDataset,
    chain: &Chain,
    mode: RateMode,
    series: &SeriesConfig,
) -> Result<(DiffusionRates, Vec<PoolAngle>, f64)> {
    let best = chain
        .samples
        .iter()
        .max_by(|a, b| a.log_post.total_cmp(&b.log_post))
        .ok_or_else(|| Error::Invalid("chain has no samples".into()))?;
    let model = Model::new(data, *series);
    let free: Vec<usize> = match mode {
        RateMode::Full => vec![0, 1, 2],
        RateMode::SingleLevel => vec![0, 1],
        RateMode::Fixed(_) => vec![],
    };
    if mode == RateMode::SingleLevel {
        let f = |r: &DiffusionRates| {
            model
                .recs
                .iter()
                .map(|rec| rec.log_lik(prob(reduced(r, rec.g), 0.0)))
                .sum::<f64>()
        };
        let (r, v) = coordinate_ascent(f, best.rates, f(&best.rates), &free);
        return Ok((r, vec![PoolAngle(crate::Colatitude::NORTH); data.len()], v));
    }
    let f = |r: &DiffusionRates| {
        model
            .profile_log_post(r)
            .map(|x| x.0)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let start_val = f(&best.rates);
    let (rates, v) = coordinate_ascent(f, best.rates, start_val, &free);
    if v < best.log_post {
        return Ok((best.rates, best.hidden_thetas.clone(), best.log_post));
    }
    let (_, thetas) = model.profile_log_post(&rates)?;
    let thetas = thetas
        .into_iter()
        .map(PoolAngle::new)
        .collect::<Result<Vec<_>>>()?;
    Ok((rates, thetas, v))
}

/// Maximum of the marginal log-likelihood, started from the best of `starts`.
pub fn max_marginal_log_likelihood(
    data: &PoolDataset,
    starts: &[DiffusionRates],
    single_level: bool,
    series: &SeriesConfig,
) -> Result<(DiffusionRates, f64)> {
    let model = Model::new(data, *series);
    let f = |r: &DiffusionRates| model.marginal(r).unwrap_or(f64::NEG_INFINITY);
    let mut best: Option<(DiffusionRates, f64)> = None;
    for s in starts {
        let mut s = *s;
        if single_level {
            s.d_q = 0.0;
        }
        let v = f(&s);
        if best.is_none_or(|b| v > b.1) {
            best = Some((s, v));
        }
    }
    let (start, v0) = best.ok_or_else(|| Error::Invalid("no starting points".into()))?;
    let free: &[usize] = if single_level { &[0, 1] } else { &[0, 1, 2] };
    Ok(coordinate_ascent(f, start, v0, free))
}

/// Posterior mean, standard deviation and central percentiles of one rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub mean: f64,
    pub sd: f64,
    pub p2_5: f64,
    pub p50: f64,
    pub p97_5: f64,
}

impl RateSummary {
    pub fn of(xs: &[f64]) -> Self {
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        RateSummary {
            mean: mean(&s),
            sd: if s.len() > 1 {
                variance(&s).sqrt()
            } else {
                0.0
            },
            p2_5: quantile_sorted(&s, 0.025),
            p50: quantile_sorted(&s, 0.5),
            p97_5: quantile_sorted(&s, 0.975),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub samples: usize,
    pub d_ini: RateSummary,
    pub d_n: RateSummary,
    pub d_q: RateSummary,
}

pub fn summarize(samples: &[PosteriorSample]) -> Result<PosteriorSummary> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to summarize".into()));
    }
    let col =
        |f: fn(&DiffusionRates) -> f64| samples.iter().map(|s| f(&s.rates)).collect::<Vec<_>>();
    Ok(PosteriorSummary {
        samples: samples.len(),
        d_ini: RateSummary::of(&col(|r| r.d_ini)),
        d_n: RateSummary::of(&col(|r| r.d_n)),
        d_q: RateSummary::of(&col(|r| r.d_q)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub records: usize,
    pub seed: u64,
    pub posterior: PosteriorSummary,
    pub single_level_posterior: PosteriorSummary,
    pub map: DiffusionRates,
    pub map_log_post: f64,
    /// Maximized likelihood with the hidden angles integrated out.
    pub max_log_lik_two_level: f64,
    pub max_log_lik_single_level: f64,
    /// `max_log_lik_two_level − max_log_lik_single_level`.
    pub log_likelihood_ratio: f64,
    pub max_rates_two_level: DiffusionRates,
    pub max_rates_single_level: DiffusionRates,
    pub acceptance: Acceptance,
}

/// Report plus the chains it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub report: FitReport,
    pub chain: Chain,
    pub single_level_chain: Chain,
}

/// Fits the two-level and the single-level model and compares them.
pub fn fit(data: &PoolDataset, cfg: &ChainConfig) -> Result<Fit> {
    if data.len() < MIN_RECORDS {
        return Err(Error::Invalid(format!(
            "need at least {MIN_RECORDS} records for a proper posterior, got {}",
            data.len()
        )));
    }
    let full_cfg = ChainConfig {
        mode: RateMode::Full,
        ..cfg.clone()
    };
    let single_cfg = ChainConfig {
        mode: RateMode::SingleLevel,
        ..cfg.clone()
    };
    let chain = run_mcmc(data, &full_cfg)?;
    let single_chain = run_mcmc(data, &single_cfg)?;
    let posterior = summarize(&chain.samples)?;
    let single_level_posterior = summarize(&single_chain.samples)?;
    let (map, _, map_log_post) = map_estimate(data, &chain, RateMode::Full, &cfg.series)?;

    let spread = |samples: &[PosteriorSample]| -> Vec<DiffusionRates> {
        let k = samples.len().div_ceil(100).max(1);
        samples.iter().step_by(k).map(|s| s.rates).collect()
    };
    let mut single_starts = spread(&single_chain.samples);
    single_starts.push(DiffusionRates {
        d_ini: single_level_posterior.d_ini.mean,
        d_n: single_level_posterior.d_n.mean,
        d_q: 0.0,
    });
    let (single_rates, single_max) =
        max_marginal_log_likelihood(data, &single_starts, true, &cfg.series)?;

    let mut starts = spread(&chain.samples);
    starts.push(map);
    starts.push(DiffusionRates {
        d_ini: posterior.d_ini.mean,
        d_n: posterior.d_n.mean,
        d_q: posterior.d_q.mean,
    });
    // The single-level optimum is a point of the two-level model.
    starts.push(single_rates);
    let (two_rates, two_max) = max_marginal_log_likelihood(data, &starts, false, &cfg.series)?;

    let report = FitReport {
        records: data.len(),
        seed: cfg.seed,
        posterior,
        single_level_posterior,
        map,
        map_log_post,
        max_log_lik_two_level: two_max,
        max_log_lik_single_level: single_max,
        log_likelihood_ratio: two_max - single_max,
        max_rates_two_level: two_rates,
        max_rates_single_level: single_rates,
        acceptance: chain.acceptance,
    };
    Ok(Fit {
        report,
        chain,
        single_level_chain: single_chain,
    })
}

pub fn fit_report(data: &PoolDataset, cfg: &ChainConfig) -> Result<FitReport> {
    fit(data, cfg).map(|f| f.report)
}
