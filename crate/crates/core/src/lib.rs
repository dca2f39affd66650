//! Synthesis of a short-wave infrared band from green, red and near-infrared
//! imagery with a residual convolutional network.
//!
//! The crate covers raster I/O, a small reverse-mode tensor engine, the
//! network and its trainer, patch-wise tile synthesis with feathered
//! stitching, image-quality metrics and a synthetic scene generator.

pub mod checkpoint;
pub mod error;
pub mod metrics;
pub mod model;
pub mod mosaic;
pub mod raster;
pub mod scenegen;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use error::{Error, Result};
pub use model::{build_model, count_parameters, DeepSwirModel, Layer, ModelConfig, PatchPredictor};
pub use mosaic::{build_grid, synthesize_tile, PatchGrid, StitchMode};
pub use raster::{read_raster, write_raster, Manifest, Raster, ToaBlock, MAX_DN};
pub use scenegen::{generate_scene, SceneConfig, ScenePair};
pub use tensor::{finite_diff_check, Element, ParamStore, Tape, Tensor, Var};
pub use trainer::{
    evaluate, sample_patch_dataset, train, train_with, ErrorStats, PatchDataset, PatchSample,
    StopReason, TrainConfig, TrainReport,
};
