//! Multi-resolution Fourier feature pyramids for physics-informed field models.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod diagnostics;
pub mod error;
pub mod fft;
pub mod field;
pub mod format;
pub mod image_fit;
pub mod problems;
pub mod pyramid;
pub mod training;

pub use checkpoint::{Checkpoint, SavedModel};
pub use config::RunConfig;
pub use decoder::{DecoderConfig, DecoderParams};
pub use error::{Error, Result};
pub use field::{BeignetModel, DomainMap, ModelConfig, ProfileAnsatz};
pub use image_fit::{ImageModel, ImageModelKind, ImageTarget};
pub use problems::{ProblemKind, ProblemSpec, ReferenceSolution};
pub use pyramid::{FourierPyramid, PyramidConfig};
pub use training::{MetricRecord, TrainConfig, Trainer, WindowedModel};
