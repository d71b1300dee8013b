//! Semantic-segmentation workbench: VOC-layout data, paired augmentation,
//! the four encoder-decoder architectures, losses and metrics, the training
//! loop and the experiment runner.

pub mod error;
pub mod exp_runner;
pub mod model_zoo;
pub mod objective_metrics;
pub mod paired_transforms;
pub mod palette;
pub mod raster;
pub mod synthetic;
pub mod train_engine;
pub mod voc_data;

pub use error::{Result, SegError};
