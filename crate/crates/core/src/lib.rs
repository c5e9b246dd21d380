//! Seed-based 2D Gaussian image representation with a learned entropy model
//! and a bit-exact container format.
//!
//! An image is fitted by seeds, each owning a feature vector, two scalings and
//! `K` offsets; shared MLPs decode every seed into `K` colored anisotropic
//! Gaussians which are summed per pixel. A context model over a binary hash
//! grid predicts the distribution of each seed's quantized attributes, which
//! drives both the rate term during training and the range coder.

pub mod codec;
pub mod entropy;
pub mod error;
pub mod image;
pub mod model;
pub mod nn;
pub mod raster;
pub mod trainer;

pub use codec::{decode_model, encode_model, EncodedModel, SizeReport};
pub use entropy::{BinaryHashGrid, GridConfig, QuantConfig};
pub use error::{Result, SgiError};
pub use image::{load_image, psnr, save_image, ssim, Image};
pub use model::{ModelConfig, SeedSet, SgiModel};
pub use trainer::{compress, evaluate, render_at_scale, render_model, train, Metrics, TrainConfig, TrainReport};
