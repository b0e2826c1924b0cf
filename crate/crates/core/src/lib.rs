//! Edge-map prompting of a frozen promptable segmenter for modality-agnostic liver
//! segmentation, with baselines, training, evaluation and 3D reconstruction.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod edm;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prompt_net;
pub mod protocol;
pub mod raster;
pub mod report;
pub mod segmenter;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
