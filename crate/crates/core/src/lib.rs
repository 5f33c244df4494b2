//! Desk-scale LoRA fine-tuning and temporally sharded sampling for a
//! miniature video diffusion transformer.
//!
//! The crate covers the full loop: synthetic clip generation, manifest
//! construction, adapter training against a frozen backbone, adapter merging,
//! classifier-free-guided sampling with temporal sharding, and perceptual /
//! temporal / style metrics — all bit-reproducible from a single seed.

pub mod artifact;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod shard;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Command-line entry point; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::main()
}
