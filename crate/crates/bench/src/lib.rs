//! Shared fixtures for the benchmarks.

use amoclust::pin::{PinHyper, PinModel};
use amoclust::prior::{sample_task, Dataset, PriorConfig};
use amoclust::train::TrainConfig;

/// A desk-prior task with exactly `n` rows and `d` columns.
pub fn task(n: usize, d: usize, k_max: usize, seed: u64) -> Dataset {
    let prior = PriorConfig {
        n_min: n,
        n_max: n,
        d_min: d,
        d_max: d,
        k_max,
        overlap_mc_samples: 500,
        ..PriorConfig::desk()
    };
    sample_task(&prior, seed).expect("desk prior is feasible")
}

pub fn desk_pin(k_max: usize) -> PinModel {
    PinModel::new(PinHyper { k_max, ..PinHyper::desk() }, 0).expect("desk hyperparameters are valid")
}

/// Desk training configuration shrunk to a small batch for per-step timing.
pub fn step_config(batch: usize) -> TrainConfig {
    TrainConfig {
        batch_tasks: batch,
        prior: PriorConfig {
            overlap_mc_samples: 500,
            ..PriorConfig::desk()
        },
        ..TrainConfig::desk()
    }
}
