//! Benchmark fixtures shared by the criterion targets.

use eom_core::{synth_generate, GeneratorConfig, Scene};

/// Desk-scale scenes with a fixed seed.
pub fn desk_scenes(n: usize) -> Vec<Scene> {
    let config = GeneratorConfig { scenes: n, ..GeneratorConfig::default() };
    synth_generate(&config, 11).expect("default generator config is valid")
}
