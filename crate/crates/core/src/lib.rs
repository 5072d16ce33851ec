//! Two-scale random-walk noise model for single-qubit readout frequencies.
//!
//! Qubit states diffuse on the Bloch sphere at two scales: every shot
//! (walker) receives its own isotropic angular noise with rate `d_n`, and
//! all shots of one Binomial experiment share a common pool-level walk with
//! rate `d_q`. A one-time exposure `d_ini` models state preparation and
//! measurement. The crate provides
//!
//! - [`bloch`]: angle/probability transforms and Legendre polynomials,
//! - [`kernel`]: the single-level spherical diffusion PDFs and moments,
//! - [`two_scale`]: reduced Bloch-vector length, pool PDF, bounds and bands,
//! - [`simulate`]: stepwise walker and distributional Monte Carlo,
//! - [`inference`]: Metropolis-Hastings with a Gibbs split over hidden pool angles,
//! - [`data`]: CSV/JSON formats and run manifests used by the CLI.

pub mod bloch;
pub mod data;
pub mod error;
pub mod inference;
pub mod kernel;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod two_scale;

pub use bloch::{Colatitude, LegendreOrder, Probability};
pub use error::{Error, Result};
pub use kernel::{DiffusionExposure, MomentSet, SeriesConfig, ThetaSampler};
pub use two_scale::{BandCurve, BandPoint, DiffusionRates, GateCount, PoolAngle};
