//! Monte Carlo forward models.
//!
//! - [`simulate_stepwise`] moves explicit unit-vector walkers gate by gate:
//!   every walker gets its own isotropic rotation and all walkers of a pool
//!   share one common rotation per gate. It is the brute-force reference for
//!   the analytic two-scale construction.
//! - [`simulate_distributional`] draws `θ_q` from the pool-level kernel and
//!   the zero count from `Binomial(n, P̄_q)` directly.
//! - [`resample_runs`] is the stepwise walk with an additional deterministic
//!   over-rotation on a fixed fraction of walkers.

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::{Colatitude, Probability};
use crate::error::{Error, Result};
use crate::kernel::{
    DiffusionExposure, KernelSeries, SeriesConfig, ThetaSampler, DEFAULT_CDF_GRID,
};
use crate::rng::{domain, stream};
use crate::two_scale::{pool_exposure, pool_prob, DiffusionRates, GateCount, PoolAngle};

/// Per-step rates above this make the single-rotation-per-gate scheme inaccurate.
pub const STEP_RATE_LIMIT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Stepwise,
    Distributional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub rates: DiffusionRates,
    pub gates: Vec<GateCount>,
    pub n_shots: u64,
    pub m_pools: usize,
    pub seed: u64,
    pub mode: SimMode,
    #[serde(default)]
    pub series: SeriesConfig,
}

impl SimConfig {
    pub fn new(
        rates: DiffusionRates,
        gates: Vec<GateCount>,
        n_shots: u64,
        m_pools: usize,
        seed: u64,
        mode: SimMode,
    ) -> Self {
        SimConfig {
            rates,
            gates,
            n_shots,
            m_pools,
            seed,
            mode,
            series: SeriesConfig::default(),
        }
    }

    fn validate(&self, expected: SimMode) -> Result<()> {
        if self.mode != expected {
            return Err(Error::Invalid(format!(
                "configuration is for {:?} mode, not {:?}",
                self.mode, expected
            )));
        }
        if self.n_shots == 0 || self.m_pools == 0 {
            return Err(Error::Invalid("n_shots and m_pools must be ≥ 1".into()));
        }
        if self.gates.is_empty() {
            return Err(Error::Invalid("no gate counts requested".into()));
        }
        Ok(())
    }
}

/// Systematic over-rotation about the Bloch-frame x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherentErrorConfig {
    pub affected_fraction: f64,
    /// Signed rotation per gate in radians.
    pub over_rotation: f64,
}

impl CoherentErrorConfig {
    pub fn new(affected_fraction: f64, over_rotation: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&affected_fraction) {
            return Err(Error::Domain(format!(
                "affected fraction {affected_fraction} outside [0, 1]"
            )));
        }
        if !over_rotation.is_finite() {
            return Err(Error::Domain("over-rotation must be finite".into()));
        }
        Ok(CoherentErrorConfig {
            affected_fraction,
            over_rotation,
        })
    }
}

/// One simulated Binomial experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyDraw {
    pub pool: usize,
    pub gate_count: GateCount,
    pub shots: u64,
    pub zeros: u64,
    /// `zeros / shots`.
    pub observed_freq: Probability,
    /// Binomial-level probability `P̄_q` implied by the pool angle
    /// (without any coherent over-rotation).
    pub true_pool_prob: Probability,
    /// Colatitude of the pool's shared rotation applied to the north pole.
    pub pool_angle: PoolAngle,
}

/// Frequencies of one pool across the requested gate counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrajectory {
    pub pool: usize,
    pub draws: Vec<FrequencyDraw>,
}

/// Draws `θ_q`, `P̄_q` and the zero count per pool and gate count.
/// Output is ordered by pool, then by the order of `cfg.gates`.
pub fn simulate_distributional(cfg: &SimConfig) -> Result<Vec<FrequencyDraw>> {
    cfg.validate(SimMode::Distributional)?;
    let rates = cfg.rates;
    // One sampler per gate count; `None` means θ_q is pinned to the north pole.
    let samplers: Vec<Option<ThetaSampler>> = cfg
        .gates
        .par_iter()
        .map(|&g| {
            let tau = pool_exposure(&rates, g);
            if tau.value() == 0.0 {
                Ok(None)
            } else {
                let series = KernelSeries::new(tau, &cfg.series)?;
                ThetaSampler::from_series(&series, DEFAULT_CDF_GRID).map(Some)
            }
        })
        .collect::<Result<_>>()?;

    let per_pool: Vec<Vec<FrequencyDraw>> = (0..cfg.m_pools)
        .into_par_iter()
        .map(|q| {
            cfg.gates
                .iter()
                .zip(&samplers)
                .enumerate()
                .map(|(gi, (&g, sampler))| {
                    let mut rng = stream(cfg.seed, &[domain::DISTRIBUTIONAL, gi as u64, q as u64]);
                    let theta = match sampler {
                        Some(s) => s.sample(&mut rng),
                        None => Colatitude::NORTH,
                    };
                    let angle = PoolAngle(theta);
                    let p = pool_prob(angle, &rates, g);
                    let zeros = Binomial::new(cfg.n_shots, p.value())
                        .expect("valid binomial")
                        .sample(&mut rng);
                    FrequencyDraw {
                        pool: q,
                        gate_count: g,
                        shots: cfg.n_shots,
                        zeros,
                        observed_freq: Probability::from_unit(zeros as f64 / cfg.n_shots as f64),
                        true_pool_prob: p,
                        pool_angle: angle,
                    }
                })
                .collect()
        })
        .collect();
    Ok(per_pool.into_iter().flatten().collect())
}

/// Explicit two-scale walk of `n_shots` walkers in each of `m_pools` pools.
/// Output is ordered by pool, then by the order of `cfg.gates`.
pub fn simulate_stepwise(cfg: &SimConfig) -> Result<Vec<FrequencyDraw>> {
    cfg.validate(SimMode::Stepwise)?;
    run_walkers(cfg, None)
}

/// Stepwise runs with a coherent over-rotation on a fixed fraction of walkers.
pub fn resample_runs(
    cfg: &SimConfig,
    coherent: &CoherentErrorConfig,
) -> Result<Vec<RunTrajectory>> {
    cfg.validate(SimMode::Stepwise)?;
    let coherent = CoherentErrorConfig::new(coherent.affected_fraction, coherent.over_rotation)?;
    let draws = run_walkers(cfg, Some(coherent))?;
    let k = cfg.gates.len();
    Ok(draws
        .chunks(k)
        .map(|c| RunTrajectory {
            pool: c[0].pool,
            draws: c.to_vec(),
        })
        .collect())
}

/// Exposure after `t` steps when the variance grows like `t^{1+κ}`:
/// `τ = D·Δt·(t/Δt)^{1+κ}`. `κ = 0` is the Markovian `D·t`.
pub fn rescale_time_nonmarkovian(
    tau_rate: f64,
    t: f64,
    dt: f64,
    kappa: f64,
) -> Result<DiffusionExposure> {
    if !(0.0..=2.0).contains(&kappa) {
        return Err(Error::Domain(format!("kappa = {kappa} outside [0, 2]")));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!(
            "reference step {dt} must be positive"
        )));
    }
    if !(t >= 0.0) || !(tau_rate >= 0.0) {
        return Err(Error::Domain("rate and time must be non-negative".into()));
    }
    DiffusionExposure::new(tau_rate * dt * (t / dt).powf(1.0 + kappa))
}

type Vec3 = [f64; 3];
type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation matrix for rotation vector `w` (axis `w/|w|`, angle `|w|`).
fn rotation_matrix(w: Vec3) -> Mat3 {
    let angle = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if angle == 0.0 {
        return IDENTITY;
    }
    let (x, y, z) = (w[0] / angle, w[1] / angle, w[2] / angle);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[inline]
fn apply(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Rodrigues rotation of `v` by rotation vector `w`.
#[inline]
fn rotate(v: Vec3, w: Vec3) -> Vec3 {
    let angle = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if angle == 0.0 {
        return v;
    }
    let k = [w[0] / angle, w[1] / angle, w[2] / angle];
    let (s, c) = angle.sin_cos();
    let kxv = [
        k[1] * v[2] - k[2] * v[1],
        k[2] * v[0] - k[0] * v[2],
        k[0] * v[1] - k[1] * v[0],
    ];
    let kdv = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = v[i] * c + kxv[i] * s + k[i] * kdv * (1.0 - c);
    }
    let norm = (out[0] * out[0] + out[1] * out[1] + out[2] * out[2]).sqrt();
    [out[0] / norm, out[1] / norm, out[2] / norm]
}

/// Isotropic rotation vector with per-axis variance `2·rate`.
///
/// Each point on the sphere then moves by a tangent displacement with mean
/// square `4·rate`, matching the generator `rate·∇²` for which
/// `E[cos θ] = e^{−2·rate·t}`.
#[inline]
fn diffusion_kick<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> Vec3 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    let c: f64 = rng.sample(StandardNormal);
    [sd * a, sd * b, sd * c]
}

fn run_walkers(
    cfg: &SimConfig,
    coherent: Option<CoherentErrorConfig>,
) -> Result<Vec<FrequencyDraw>> {
    let rates = cfg.rates;
    for (name, v) in [
        ("d_ini", rates.d_ini),
        ("d_n", rates.d_n),
        ("d_q", rates.d_q),
    ] {
        if v > STEP_RATE_LIMIT {
            log::warn!(
                "{name} = {v} exceeds {STEP_RATE_LIMIT} rad²/step; one rotation per step is a coarse approximation"
            );
        }
    }
    let g_max = cfg.gates.iter().map(|g| g.0).max().unwrap_or(0) as usize;
    // record[g] lists the output slots that read out after gate g.
    let mut record: Vec<Vec<usize>> = vec![Vec::new(); g_max + 1];
    for (slot, g) in cfg.gates.iter().enumerate() {
        record[g.0 as usize].push(slot);
    }
    let affected = coherent
        .map(|c| (c.affected_fraction * cfg.n_shots as f64).round() as u64)
        .unwrap_or(0);
    let coherent_rot = coherent.map(|c| rotation_matrix([c.over_rotation, 0.0, 0.0]));

    let sd_ini = (2.0 * rates.d_ini).sqrt();
    let sd_n = (2.0 * rates.d_n).sqrt();
    let sd_q = (2.0 * rates.d_q).sqrt();
    let n_slots = cfg.gates.len();

    let per_pool: Vec<Vec<FrequencyDraw>> = (0..cfg.m_pools)
        .into_par_iter()
        .map(|q| {
            // Shared rotations and the pool center trajectory.
            let mut shared_rng = stream(cfg.seed, &[domain::SHARED_ROTATION, q as u64]);
            let mut shared = Vec::with_capacity(g_max);
            let mut center: Vec3 = [0.0, 0.0, 1.0];
            let mut center_z = vec![1.0; g_max + 1];
            for g in 1..=g_max {
                let m = if rates.d_q > 0.0 {
                    rotation_matrix(diffusion_kick(&mut shared_rng, sd_q))
                } else {
                    IDENTITY
                };
                center = apply(&m, center);
                center_z[g] = center[2];
                shared.push(m);
            }

            let mut zeros = vec![0u64; n_slots];
            for w in 0..cfg.n_shots {
                let mut rng = stream(cfg.seed, &[domain::WALKER, q as u64, w]);
                let mut v: Vec3 = [0.0, 0.0, 1.0];
                if rates.d_ini > 0.0 {
                    v = rotate(v, diffusion_kick(&mut rng, sd_ini));
                }
                let is_coherent = w < affected;
                for g in 0..=g_max {
                    if g > 0 {
                        if rates.d_q > 0.0 {
                            v = apply(&shared[g - 1], v);
                        }
                        if rates.d_n > 0.0 {
                            v = rotate(v, diffusion_kick(&mut rng, sd_n));
                        }
                        if is_coherent {
                            v = apply(coherent_rot.as_ref().expect("set with affected > 0"), v);
                        }
                    }
                    for &slot in &record[g] {
                        let p = (0.5 * (1.0 + v[2])).clamp(0.0, 1.0);
                        let u: f64 = rng.random();
                        if u < p {
                            zeros[slot] += 1;
                        }
                    }
                }
            }

            cfg.gates
                .iter()
                .enumerate()
                .map(|(slot, &g)| {
                    let cz = center_z[g.0 as usize].clamp(-1.0, 1.0);
                    let angle = PoolAngle(Colatitude::new(cz.acos()).expect("acos in [0, π]"));
                    FrequencyDraw {
                        pool: q,
                        gate_count: g,
                        shots: cfg.n_shots,
                        zeros: zeros[slot],
                        observed_freq: Probability::from_unit(
                            zeros[slot] as f64 / cfg.n_shots as f64,
                        ),
                        true_pool_prob: pool_prob(angle, &rates, g),
                        pool_angle: angle,
                    }
                })
                .collect()
        })
        .collect();
    Ok(per_pool.into_iter().flatten().collect())
}
