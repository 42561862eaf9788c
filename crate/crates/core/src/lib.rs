//! Joint flow matching and Markov bridge generative kernel.

pub mod alignment;
pub mod backbone;
pub mod bridges;
pub mod error;
pub mod evaluation;
pub mod flows;
pub mod geometry;
pub mod io;
pub mod molecule;
pub mod tape;
pub mod toydata;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, platform-stable RNG stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `f` on a pool capped by `FLOWBRIDGE_THREADS` when that variable is set,
/// otherwise on the global pool.
pub fn with_thread_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let cap = std::env::var("FLOWBRIDGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    match cap.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/flows.md")]
    mod flows {}
    #[doc = include_str!("../../../book/src/bridges.md")]
    mod bridges {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/toydata.md")]
    mod toydata {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
