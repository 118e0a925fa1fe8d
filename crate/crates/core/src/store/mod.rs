//! On-disk formats, dataset manifests, few-shot sampling, and the synthetic
//! planted-parts dataset generator.

pub mod checkpoint;
pub mod manifest;
pub mod sampling;
pub mod synthetic;
pub mod tensor_file;

pub use manifest::{DatasetManifest, LoadedSample, Split};
pub use sampling::{sample_k_shot, FewShotSet};
pub use tensor_file::{decode, encode, read_tensor, read_tensor_as, write_tensor};
