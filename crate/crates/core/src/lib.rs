//! Latent-space motion imitation and terrain adaptation for a simplified
//! quadruped.

pub mod config;
pub mod error;
pub mod eval;
pub mod motion;
pub mod nn;
pub mod prior;
pub mod rewards;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};

/// Environment variable capping the worker threads used for rollouts and evaluation.
pub const THREADS_ENV: &str = "LM_THREADS";

/// Sizes the global worker pool from `LM_THREADS` when it is set. Returns the
/// pool size in effect.
pub fn init_thread_pool() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        // a pool that is already built keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
