//! Bayes-optimal in-context prediction for regression task mixtures.
//!
//! The crate provides the prompt-generating process ([`taskgen`]), exact
//! conjugate posteriors and the Bayes predictor ([`conjugate`]), a
//! uniform-attention transformer with hand-written gradients ([`net`]) and
//! its trainer ([`trainer`]), and Monte Carlo laboratories for the risk
//! decomposition ([`risk`]), task identification ([`ident`]), input shift
//! ([`ood`]) and the soft-histogram / McShane construction ([`histo`]).
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision versions used by the
//! laboratories.

pub mod basis;
pub mod conjugate;
pub mod error;
pub mod histo;
pub mod ident;
pub mod linalg;
pub mod net;
pub mod ood;
pub mod risk;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type FamilyPosterior64 = conjugate::FamilyPosterior<f64>;
pub type MixturePosterior64 = conjugate::MixturePosterior<f64>;
pub type Predictive64 = conjugate::Predictive<f64>;
pub type TransformerParams64 = net::TransformerParams<f64>;
pub type TransformerParams32 = net::TransformerParams<f32>;
pub type Prompt64 = taskgen::Prompt<f64>;
