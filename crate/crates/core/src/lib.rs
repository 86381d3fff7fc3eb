//! Track-based selfie video stabilization engine.
//!
//! The crate operates on precomputed 2D point tracks: background feature
//! points, their next-frame correspondences (the warp nodes) and sampled face
//! vertices. A sliding-window solver infers per-frame warp node displacements
//! minimizing a lambda-weighted foreground/background motion loss; frames are
//! rendered through a grid-approximated rigid moving-least-squares warp.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod mls;
pub mod objective;
pub mod pipeline;
pub mod raster;
pub mod solvers;
pub mod tracks;

pub use error::{Error, Result};

/// Configure the global worker pool from the `STAB_THREADS` environment
/// variable (0 or unset = automatic). Call once at process start; returns the
/// applied thread count when a cap was set.
pub fn init_thread_pool_from_env() -> Option<usize> {
    let n: usize = std::env::var("STAB_THREADS").ok()?.parse().ok()?;
    if n == 0 {
        return None;
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok()?;
    Some(n)
}
