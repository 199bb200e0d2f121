#![allow(dead_code)]

use protoseg::config::RunConfig;
use protoseg::synthdata::generate_dataset;
use protoseg::trainer::TrainData;

/// A run small enough to train in well under a second per stage.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("num_classes", "3"),
        ("train_samples", "6"),
        ("val_samples", "3"),
        ("height", "32"),
        ("width", "32"),
        ("widths", "4,6,6"),
        ("downsample", "4"),
        ("proto_dim", "4"),
        ("protos_per_class", "3"),
        ("warmup_steps", "3"),
        ("joint_steps", "3"),
        ("tune1_steps", "2"),
        ("tune2_steps", "2"),
        ("batch_size", "2"),
        ("prune_knn", "4"),
        ("prune_threshold", "2"),
        ("eval_train_images", "3"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

pub fn data_for(config: &RunConfig) -> TrainData {
    let ds = generate_dataset(&config.dataset_spec()).unwrap();
    TrainData {
        train: ds.train,
        val: ds.val,
    }
}
