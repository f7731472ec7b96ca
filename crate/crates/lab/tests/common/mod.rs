#![allow(dead_code)]

use hyt_core::hyt::{ModelConfig, TrainConfig};
use hyt_core::oracle::{self, OracleConfig};
use hyt_core::world::{TaskFamily, WorldConfig};
use hyt_lab::dataset::DemoFile;

/// A handful of 2-object PlaceAt demonstrations.
pub fn small_demos(n: u64) -> DemoFile {
    let world = WorldConfig::default();
    let ocfg = OracleConfig::default();
    let demos = (0..n).map(|s| oracle::demo(&world, &ocfg, TaskFamily::PlaceAt, 2, s, true).unwrap()).collect();
    DemoFile { grid_size: world.grid_size, thought_format: ocfg.thought_format, demos }
}

/// Fast to train, only meant for exercising the plumbing.
pub fn tiny_train(epochs: u32) -> TrainConfig {
    TrainConfig {
        model: ModelConfig { d_model: 8, n_heads: 2, n_layers: 1, context_len: 96, ..ModelConfig::default() },
        batch_size: 4,
        epochs,
        checkpoint_epochs: vec![epochs],
        ..TrainConfig::default()
    }
}
