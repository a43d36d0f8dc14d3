//! Depth-augmented object detection and semantic segmentation from single RGB images.
//!
//! The crate estimates depth with a continuous CRF over superpixels whose unary
//! term is a small convnet, encodes the estimate as a 3-channel image, and fuses
//! depth features with RGB features for detection (SVMs over concatenated
//! region features, or two-stream RoI pooling with a multi-task loss) and for
//! segmentation (late feature concatenation, or joint label/depth training).
//!
//! Modules:
//! - [`netcore`]: differentiable layers and SGD
//! - [`superpixel`]: oversegmentation, neighbour graph, superpixel pooling
//! - [`crf`]: CRF inference and likelihood, and the trainable depth model
//! - [`depth_io`]: depth/image types, depth encoding, file formats
//! - [`fusion`]: RoI pooling, concatenation, upscaling and task losses
//! - [`detector`]: proposal labelling, SVMs with hard negative mining, NMS
//! - [`eval`]: IoU, average precision, segmentation IoU, reports
//! - [`pipeline`]: synthetic data, configuration and end-to-end experiments

pub mod crf;
pub mod depth_io;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod netcore;
pub mod pipeline;
pub mod superpixel;

pub use error::{Error, Result};
