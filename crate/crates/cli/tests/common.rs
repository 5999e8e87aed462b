use std::path::Path;

use dcam_core::config::{GuidanceMode, ModelConfig};
use dcam_core::model::Dcam;
use dcam_core::training::checkpoint::Checkpoint;
use dcam_core::training::schedule::TrainConfig;

/// Untrained tiny checkpoint written to `path`.
pub fn write_checkpoint(path: &Path, mode: GuidanceMode, seed: u64) -> Checkpoint {
    let model = ModelConfig::tiny(mode);
    let (_, params) = Dcam::init::<f32>(&model, seed).unwrap();
    let ckpt = Checkpoint {
        model,
        train: TrainConfig::default(),
        epoch: 0,
        history: Vec::new(),
        params,
        optimizer: None,
    };
    ckpt.save(path).unwrap();
    ckpt
}
