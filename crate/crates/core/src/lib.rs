//! Convolutional network training built on a cache-tiled, multi-threaded
//! matrix-multiplication core.
//!
//! The crate covers the full pipeline for the eight-class fish-species
//! task: dense tensors ([`tensor`]), GEMM kernels and their benchmark
//! ([`gemm`], [`bench`]), layers with backpropagation ([`nn`]), SGD with
//! momentum ([`optim`]), log-loss metrics ([`metrics`]), the data split
//! protocol ([`data`]), model definitions and drivers ([`model`]), model
//! files ([`modelfile`]) and the `cnf` command line ([`cli`]).

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod gemm;
pub mod metrics;
pub mod model;
pub mod modelfile;
pub mod nn;
pub mod optim;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor};

/// Deterministic generator for one randomized step of an experiment.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
