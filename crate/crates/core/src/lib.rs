//! PV-RNN: a hierarchical variational recurrent network trained by
//! back-propagation through time, plus the shared-control deliberation loop
//! and intent observer built around it.
//!
//! - [`model`]: prior/posterior heads, leaky-integrator context, output
//!   decoding, KL and ELBO.
//! - [`train`]: analytic BPTT gradients, Adam, the offline training loop and
//!   checkpoints.
//! - [`deliberation`]: generation, sliding-window error regression and the
//!   human/robot mixing law.
//! - [`observer`]: feed-forward intent classifier, congruence metric, PCA.
//! - [`io`]: primitive datasets, run configuration and CSV logs.

// Negated comparisons reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod deliberation;
pub mod encoding;
pub mod error;
pub mod io;
pub mod model;
pub mod observer;
pub mod params;
pub mod train;

pub use config::{LayerSpec, NetworkConfig};
pub use encoding::SoftmaxEncoder;
pub use error::{CoreError, Result};
pub use model::{
    context_step, decode_output, elbo, generate_prior, kl_gaussian, posterior_stats, prior_stats,
    rollout_posterior, sample_z, ElboTerms, EpsMode, GaussianStats, LatentState, LayerState, Noise,
    Rollout, SoftmaxFrame, StepMode,
};
pub use params::{GaussianHead, LayerParams, NetworkParams};
