//! Bloch-sphere geometry: colatitude/probability transforms and Legendre
//! polynomials in `cos θ`.
//!
//! The readout probability of the zero state is `P = cos²(θ/2) = (1 + cos θ)/2`,
//! so the north pole (`θ = 0`) reads out zero with certainty and the equator
//! gives a fair coin.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on `[-1, 1]` arguments before they are treated as errors.
pub const CLAMP_SLACK: f64 = 1e-12;

/// Polar angle measured from the north pole, in radians. Always in `[0, π]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Colatitude(f64);

impl Colatitude {
    pub const NORTH: Colatitude = Colatitude(0.0);
    pub const SOUTH: Colatitude = Colatitude(PI);

    /// Rejects values outside `[0, π]` instead of wrapping them.
    pub fn new(theta: f64) -> Result<Self> {
        if (0.0..=PI).contains(&theta) {
            Ok(Colatitude(theta))
        } else {
            Err(Error::Domain(format!("colatitude {theta} outside [0, π]")))
        }
    }

    pub fn radians(self) -> f64 {
        self.0
    }
}

/// Probability of reading out the zero state.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Probability(f64);

impl Probability {
    pub fn new(p: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&p) {
            Ok(Probability(p))
        } else {
            Err(Error::Domain(format!("probability {p} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Internal constructor for values that are in range by construction.
    pub(crate) fn from_unit(p: f64) -> Self {
        debug_assert!((-1e-15..=1.0 + 1e-15).contains(&p), "p = {p}");
        Probability(p.clamp(0.0, 1.0))
    }
}

/// Order of a Legendre polynomial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LegendreOrder(pub usize);

/// `P = 1/2 + cos(θ)/2`, evaluated as `cos²(θ/2)`.
pub fn prob_from_colatitude(theta: Colatitude) -> Probability {
    let c = (0.5 * theta.0).cos();
    Probability::from_unit(c * c)
}

/// `θ = arccos(2P − 1)`, evaluated through half-angle arcsines so that both
/// poles keep full relative precision.
pub fn colatitude_from_prob(p: Probability) -> Colatitude {
    let theta = if p.0 >= 0.5 {
        2.0 * (1.0 - p.0).sqrt().asin()
    } else {
        PI - 2.0 * p.0.sqrt().asin()
    };
    Colatitude(theta.clamp(0.0, PI))
}

/// `dθ/dP = −1/√(P − P²)`, singular at both poles.
pub fn jacobian_dtheta_dp(p: Probability) -> Result<f64> {
    let v = p.0 - p.0 * p.0;
    if v <= 0.0 {
        return Err(Error::Singularity(format!(
            "dθ/dP is unbounded at P = {}",
            p.0
        )));
    }
    Ok(-1.0 / v.sqrt())
}

/// Clamps `x` into `[-1, 1]` if it overshoots by at most [`CLAMP_SLACK`].
pub fn clamp_unit_interval(x: f64) -> Result<f64> {
    if x.is_nan() || x.abs() > 1.0 + CLAMP_SLACK {
        return Err(Error::Domain(format!("argument {x} outside [-1, 1]")));
    }
    Ok(x.clamp(-1.0, 1.0))
}

/// Legendre polynomial `L_k(x)` by the upward three-term recurrence
/// `(n+1) L_{n+1} = (2n+1) x L_n − n L_{n−1}`.
pub fn legendre(k: LegendreOrder, x: f64) -> Result<f64> {
    let x = clamp_unit_interval(x)?;
    Ok(legendre_unchecked(k.0, x))
}

pub(crate) fn legendre_unchecked(n: usize, x: f64) -> f64 {
    let mut it = LegendreSeq::new(x);
    let mut value = 1.0;
    for _ in 0..=n {
        value = it.next_value();
    }
    value
}

/// Shifted Legendre polynomial on `[0, 1]`: `𝓛_k(x) = L_k(2x − 1)`.
pub fn shifted_legendre(k: LegendreOrder, x: f64) -> Result<f64> {
    if !(-CLAMP_SLACK..=1.0 + CLAMP_SLACK).contains(&x) {
        return Err(Error::Domain(format!("argument {x} outside [0, 1]")));
    }
    legendre(k, 2.0 * x.clamp(0.0, 1.0) - 1.0)
}

/// Streams `L_0(x), L_1(x), L_2(x), …` one order at a time.
#[derive(Debug, Clone)]
pub(crate) struct LegendreSeq {
    x: f64,
    order: usize,
    prev: f64,
    curr: f64,
}

impl LegendreSeq {
    pub(crate) fn new(x: f64) -> Self {
        LegendreSeq {
            x,
            order: 0,
            prev: 0.0,
            curr: 1.0,
        }
    }

    /// Returns `L_k(x)` for `k = 0, 1, 2, …` on successive calls.
    #[inline]
    pub(crate) fn next_value(&mut self) -> f64 {
        let out = self.curr;
        let n = self.order as f64;
        let next = if self.order == 0 {
            self.x
        } else {
            ((2.0 * n + 1.0) * self.x * self.curr - n * self.prev) / (n + 1.0)
        };
        self.prev = self.curr;
        self.curr = next;
        self.order += 1;
        out
    }
}
