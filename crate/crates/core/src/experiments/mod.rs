//! Datasets, experiment configs and the runner behind the CLI.

pub mod classifier;
pub mod config;
pub mod data;
pub mod rollout;
pub mod runner;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ExperimentConfig, Task};
pub use rollout::recursive_rollout;
pub use runner::{evaluate, prepare, run_experiment, Checkpoint, Evaluation, MetricRow, Prepared};

/// Stream `stream` of the ChaCha generator keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
