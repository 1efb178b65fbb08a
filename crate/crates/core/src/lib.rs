//! Multi-scale residual latent factorization with per-scale rectified-flow
//! generation.
//!
//! A latent is split into a low-resolution base plus residuals at
//! increasing resolutions ([`factorize`]). One conditional velocity network
//! ([`velocity`]) is trained per scale with teacher-forced priors
//! ([`training`]), and generation samples each residual in turn, adding it
//! into a running latent that conditions the next scale ([`sampler`]).
//! [`harness`] holds synthetic data, metrics, the FLOP cost model, and
//! experiment orchestration.

pub mod error;
pub mod factorize;
pub mod grid;
pub mod harness;
pub mod parallel;
pub mod sampler;
pub mod training;
pub mod velocity;

pub use error::{MsfError, Result};
pub use factorize::{
    extract_priors, extract_residuals, factorize_scaling_image, factorize_scaling_latent,
    reconstruct, Codec, PriorSet, ResidualPyramid, ScaleSchedule,
};
pub use grid::{combine, resize, LatentGrid};
pub use parallel::Exec;
pub use velocity::{
    forward, forward_cfg, init_params, ConditionBundle, EvalCounter, VelocityConfig,
    VelocityField, VelocityParams,
};
