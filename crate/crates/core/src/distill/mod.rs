//! Unified-latent feature distillation.

mod decoder;
mod loss;
mod train;

pub use decoder::{decoder_widths, matrix_from_rows, matrix_to_rows, DecoderCache, DecoderGrads, DecoderMLP, Linear};
pub use loss::{
    adam_step, feature_loss, feature_loss_masked, photometric_loss, photometric_loss_masked, AdamConfig, AdamState,
};
pub use train::{
    evaluate, frame_objective, train, EvalSummary, FeatureField, FrameGrads, FrameLosses, FrameTargets, LearningRates,
    LossRecord, LossWeights, Stage, TaskHead, TaskSpec, TrainConfig, TrainReport,
};

pub use crate::map::{resize_area, resize_bilinear};

use thiserror::Error;

use crate::map::MapError;
use crate::raster::RasterError;
use crate::scaffold::ScaffoldError;
use crate::scene::SceneError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("input width {got} does not match expected {expected}")]
    Width { expected: usize, got: usize },
    #[error("decoder backward called without a forward cache")]
    MissingCache,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing target for timestep {timestep}: {what}")]
    MissingTarget { timestep: usize, what: String },
    #[error("non-finite {term} loss at {stage} iteration {iteration}")]
    NonFinite { stage: String, iteration: usize, term: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
    #[error(transparent)]
    Map(#[from] MapError),
}
