//! Sliding-window object detection with spatial-pyramid Fisher Vectors,
//! linear models and group-sparse training.

pub mod analysis;
pub mod codebook;
pub mod detector;
pub mod encoder;
pub mod encoding;
pub mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod kmeans;
pub mod learner;
pub mod model;
pub mod pca;

pub use codebook::{fit_gmm, GmmModel};
pub use detector::{Detection, GroundTruth};
pub use encoder::{FvLayout, Normalization, PyramidFv};
pub use encoding::{Accumulator, FeaturePipeline, ImageEncoding};
pub use error::{Error, Result};
pub use geometry::{iou, Window};
pub use image::GrayImage;
pub use model::LinearModel;
pub use pca::PcaProjection;
