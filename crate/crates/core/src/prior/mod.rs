//! Latent style prior: Gaussian latents, the motion encoder/decoder/predictor
//! and the divergence decomposition check.

mod decomposition;
mod features;
mod gaussian;
mod latent;

pub use decomposition::{verify_decomposition, Decomposition};
pub use features::{features_to_window, frame_dim, frames_features, window_dim, window_features, Normalizer};
pub use gaussian::{gaussian_kl, kl_term, symmetric_kl, LatentGaussian};
pub use latent::{
    reconstruction_loss, BalancedBatch, EpochLog, FinetuneReport, FinetuneState, LatentPrior, MixedReplayBuffer,
    PriorConfig, Store, PRIOR_FORMAT, PRIOR_VERSION,
};
