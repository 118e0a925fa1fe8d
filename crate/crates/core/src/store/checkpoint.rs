//! Attention-pool checkpoints: one `SAFT` file per tensor (`<field>.saft`)
//! plus an `attnpool.json` describing heads, scale and flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor_file::{read_tensor_as, write_tensor};
use crate::attention::{AttnPoolParams, AttnPoolTensors, FIELD_NAMES};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const META_FILE: &str = "attnpool.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub heads: usize,
    #[serde(default)]
    pub include_mean_token: bool,
    #[serde(default)]
    pub pos_embed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl CheckpointMeta {
    pub fn of<T: Scalar>(p: &AttnPoolParams<T>) -> Self {
        Self {
            heads: p.heads(),
            include_mean_token: p.include_mean_token(),
            pos_embed: p.tensors.pos_embed.is_some(),
            scale: Some(p.scale().widen()),
        }
    }
}

pub fn save<T: Scalar>(dir: impl AsRef<Path>, p: &AttnPoolParams<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in p.tensors.tensors() {
        write_tensor(dir.join(format!("{name}.saft")), t)?;
    }
    let meta = serde_json::to_string_pretty(&CheckpointMeta::of(p)).expect("meta serializes");
    let path = dir.join(META_FILE);
    fs::write(&path, meta + "\n").map_err(|e| Error::io(path, e))
}

/// Loads tensors from `dir` using the given flags.
pub fn load<T: Scalar>(dir: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<AttnPoolParams<T>> {
    let dir = dir.as_ref();
    let get = |name: &str| read_tensor_as::<T>(dir.join(format!("{name}.saft")));
    let tensors = AttnPoolTensors {
        q_weight: get(FIELD_NAMES[0])?,
        q_bias: get(FIELD_NAMES[1])?,
        k_weight: get(FIELD_NAMES[2])?,
        k_bias: get(FIELD_NAMES[3])?,
        v_weight: get(FIELD_NAMES[4])?,
        v_bias: get(FIELD_NAMES[5])?,
        c_weight: get(FIELD_NAMES[6])?,
        c_bias: get(FIELD_NAMES[7])?,
        pos_embed: if meta.pos_embed {
            Some(get(FIELD_NAMES[8])?)
        } else {
            None
        },
    };
    AttnPoolParams::new(tensors, meta.heads, meta.scale.map(T::cast), meta.include_mean_token)
}

/// Loads a checkpoint that carries its own `attnpool.json`.
pub fn load_dir<T: Scalar>(dir: impl AsRef<Path>) -> Result<AttnPoolParams<T>> {
    let dir = dir.as_ref();
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
    load(dir, &meta)
}
