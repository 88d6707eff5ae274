//! Inputs shared by the benchmarks.

use matchest_core::synth::{generate, SimConfig, SyntheticData};

/// Default-scale synthetic data set.
pub fn default_scale(seed: u64) -> SyntheticData {
    generate(&SimConfig {
        seed,
        ..Default::default()
    })
    .expect("default configuration is valid")
}
