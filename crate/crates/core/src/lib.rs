//! Continuous-time flows for inference and density estimation.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: matrices, reverse-mode differentiation, parameters,
//!   random streams and linear algebra.
//! * [`targets`]: unnormalized log-densities: toy potentials, Gaussians,
//!   mixtures, and the Ornstein–Uhlenbeck moment oracle.
//! * [`flow`]: the discretized Langevin transformation and trajectories.
//! * [`metrics`]: exact Wasserstein distances, Gaussian W₂, MSE estimation.
//! * [`amortize`]: implicit generators distilled from the flow.
//! * [`macvae`]: the flow-based variational autoencoder and a planar-flow
//!   baseline.
//! * [`macgan`]: energy-based density estimation with a flow-guided
//!   generator.
//! * [`catalog`]: every shipped network and energy, for gradient audits.

pub mod error;
pub mod numerics;
pub mod targets;
pub mod flow;
pub mod metrics;
pub mod amortize;
pub mod macvae;
pub mod macgan;
pub mod catalog;

pub use error::{Error, Result};
