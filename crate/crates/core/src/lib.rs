//! Two-in-one self-supervised depth estimation.
//!
//! One Siamese network predicts depth from a single image (monocular path) or from a rectified
//! stereo pair (binocular path). Everything runs on a small reverse-mode tensor engine that is
//! generic over the scalar type: `f64` for gradient checks and `f32` for training.

pub mod error;
pub mod losses;
pub mod scalar;
pub mod data;
pub mod disparity;
pub mod eval;
pub mod masks;
pub mod network;
pub mod tensor;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use disparity::{CameraRig, DisparityLevels};
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
