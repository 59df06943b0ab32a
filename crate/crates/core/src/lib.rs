//! Domain-adaptive semantic segmentation on a synthetic two-domain
//! benchmark: symmetric mean-teacher distillation warm-up with cross-domain
//! mixing, followed by self-training on consensus pseudo-labels.

pub mod augment;
pub mod centroids;
pub mod cli;
pub mod config;
pub mod domains;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod model;
pub mod rng;
pub mod selftrain;
pub mod tensor;
pub mod warmup;

pub use config::{load_config, TrainConfig};
pub use error::{Error, Result};
