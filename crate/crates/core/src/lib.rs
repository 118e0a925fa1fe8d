//! Few-shot adaptation of a frozen vision encoder by fine-tuning only its
//! attention-pooling layer, blending the tuned and original layers at
//! inference, and optionally combining the blend with a key-value cache
//! adapter.

pub mod attention;
pub mod cache;
pub mod correspondence;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use attention::{AttnPoolConfig, AttnPoolGrads, AttnPoolParams, AttnPoolTensors, DenseFeatureMap};
pub use error::{Error, Result};
pub use inference::{BlendConfig, Classifier};
pub use tensor::{AnyTensor, DType, Scalar, Tensor};
