//! Volumetric lesion segmentation with an attention-based 3D CNN, built from
//! first principles: a tape-based tensor engine with exact reverse-mode
//! gradients, CLAHE/Laplacian preprocessing, lesion-centered patch sampling,
//! the SCA-VoxRes network, Tversky-family losses with Adam training, tiled
//! inference, and lesion-wise evaluation metrics.
//!
//! Everything runs on the CPU over plain `Vec` storage. The numeric core is
//! generic over the scalar type ([`Scalar`]): training runs at `f32`, while
//! the verification suites instantiate the same code at `f64` so gradient and
//! adjoint checks are meaningful.

pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nifti;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Tensor at training precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Tensor at verification precision.
pub type Tensor64 = tensor::Tensor<f64>;
/// Tape at training precision.
pub type Tape32 = tensor::Tape<f32>;
/// Tape at verification precision.
pub type Tape64 = tensor::Tape<f64>;

/// Tool version stamped into run manifests and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
