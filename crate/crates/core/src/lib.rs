//! Relationship grounding on a self-contained differentiable tensor core.
//!
//! The crate provides, bottom to top: a row-major tensor with hand-derived
//! gradients for every op (`tensor`, `ops`, `optim`, `gradcheck`); a
//! synthetic 2-D scene benchmark with exhaustively derived spatial
//! relationships (`scene`, `dataset`); scene encoders (`encoder`); the
//! iterative attention-shifting grounding model and its baselines
//! (`model`, `baselines`, `train`); evaluation metrics and reports
//! (`metrics`); scene-graph traversal (`saccade`); and the on-disk
//! formats (`checkpoint`, `pnm`).

pub mod baselines;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod pnm;
pub mod saccade;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod threads;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default scalar for storage: 32-bit floats with 64-bit accumulation.
pub type Real = f32;

/// Default tensor alias used by the model and the command-line driver.
pub type RealTensor = Tensor<Real>;
