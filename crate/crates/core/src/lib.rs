//! Manifold-aligned generative transport.
//!
//! A transport network maps a low-dimensional Gaussian latent to the ambient
//! space. It is trained at a single Gaussian smoothing level with an
//! anchor-based, self-normalized importance-sampling estimate of the smoothed
//! score, and sampled in one forward pass (or refined with M-DDIM).
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations.

pub mod anchor_score;
pub mod density;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod manifolds;
pub mod metrics;
pub mod net;
pub mod prior;
pub mod qmc;
pub mod rng;
pub mod samplers;
pub mod scalar;
pub mod schedule;
pub mod trainer;
pub mod transport;

pub use anchor_score::{AnchorBank, ProposalKind, ScoreEstimate};
pub use error::{MagtError, Result};
pub use net::{ForwardTape, ParameterGradient, TransportNet};
pub use prior::LatentPrior;
pub use scalar::Scalar;
pub use schedule::NoiseLevel;
pub use transport::{FnTransport, Transport};

pub type TransportNet64 = TransportNet<f64>;
pub type TransportNet32 = TransportNet<f32>;
pub type AnchorBank64 = AnchorBank<f64>;
pub type AnchorBank32 = AnchorBank<f32>;
pub type NoiseLevel64 = NoiseLevel<f64>;
pub type NoiseLevel32 = NoiseLevel<f32>;
pub type ScoreEstimate64 = ScoreEstimate<f64>;
pub type ScoreEstimate32 = ScoreEstimate<f32>;
