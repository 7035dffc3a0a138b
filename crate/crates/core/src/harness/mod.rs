//! Synthetic tracking harness: data generation, the frame-by-frame
//! tracking loop with template update, one-pass-evaluation metrics,
//! training orchestration and ablation suites.

use crate::geom::{Box3D, PointCloud};

mod ablate;
mod metrics;
mod synth;
mod track;
mod train;

pub use ablate::{run_ablation, Suite};
pub use metrics::{compute_ope, precision_curve, success_curve, OPE_GRID};
pub use synth::{
    class_preset, generate_tracklet, load_dataset, make_dataset, save_dataset, ClassPreset,
    Motion, Noise, ShapeKind,
};
pub use track::{evaluate_dataset, summarize_by_class, track_sequence};
pub use train::{lr_at_epoch, train, TrainReport};

/// Deterministic rng stream tags carved out of the master seed.
pub mod streams {
    pub const TRAIN_DATA: u64 = 0x10_0000;
    pub const EVAL_DATA: u64 = 0x20_0000;
    pub const TRACK: u64 = 0x30_0000;
    pub const TRAIN_LOOP: u64 = 0x40_0000;
}

/// Minimum frames a tracklet must keep after filtering.
pub const MIN_FRAMES: usize = 3;
/// Minimum scene points inside every ground-truth box.
pub const MIN_POINTS_IN_GT: usize = 10;

/// One observation: the full scene cloud and the ground-truth box.
#[derive(Debug, Clone)]
pub struct Frame {
    pub scene: PointCloud,
    pub gt: Box3D,
}

/// One object's ordered frames, the unit of tracking evaluation.
#[derive(Debug, Clone)]
pub struct TrackletSequence {
    pub frames: Vec<Frame>,
    pub object_id: String,
    pub class_tag: String,
}

/// Per-sequence tracking scores: AUC-style success and precision in
/// [0, 100] plus the raw per-frame (IoU, center distance) pairs.
#[derive(Debug, Clone)]
pub struct OpeResult {
    pub success: f64,
    pub precision: f64,
    pub per_frame: Vec<(f64, f64)>,
    pub coasted: usize,
}
