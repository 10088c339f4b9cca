//! Run configuration, checkpoints, heatmaps and the end-to-end commands
//! built on them.

mod checkpoint;
mod config;
mod heatmap;
mod run;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_backbone_weights, load_checkpoint, model_tensors, save_checkpoint,
    CheckpointMeta, Progress, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::*;
pub use heatmap::{grad_cam, read_pgm, response_map, write_pgm, Heatmap, HeatmapMethod, Site};
pub use run::{
    eval_checkpoint, export_synthetic, infer_image, inspect_checkpoint, inspect_image, run_training,
    stage_checkpoint_name, write_dataset, InspectReport, BEST_CHECKPOINT, CONFIG_FILE, METRICS_FILE,
};
