//! Reinforcement-learning fine-tuning of small pixel-space diffusion restorers.

pub mod archive;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod reward;
pub mod rl;
pub mod rng;
pub mod schedule;
pub mod sft;

pub use error::{Error, Result};
pub use grid::{Grid, Shape};
