//! Seeded k-shot selection.
//!
//! For each class, in manifest class order: collect that class's train-split
//! samples in manifest order, shuffle them with Fisher–Yates driven by
//! `SplitMix64(seed ^ fnv1a(class_name))`, take the first `K` for training
//! and the next `min(K, 4)` for validation.

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, SplitMix64};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSet {
    pub shots: usize,
    pub seed: u64,
    /// Manifest sample indices per class.
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
}

pub fn val_size(shots: usize) -> usize {
    shots.min(4)
}

pub fn sample_k_shot(manifest: &DatasetManifest, shots: usize, seed: u64) -> Result<FewShotSet> {
    if shots == 0 {
        return Err(Error::config("shots must be at least 1"));
    }
    let need = shots + val_size(shots);
    let mut train = Vec::with_capacity(manifest.n_classes());
    let mut val = Vec::with_capacity(manifest.n_classes());
    for (label, name) in manifest.classes.iter().enumerate() {
        let mut pool: Vec<usize> = manifest
            .split_indices(Split::Train)
            .filter(|&i| manifest.samples[i].label == label)
            .collect();
        if pool.len() < need {
            return Err(Error::Capacity {
                class: name.clone(),
                available: pool.len(),
                required: need,
            });
        }
        SplitMix64::new(seed ^ fnv1a(name)).shuffle(&mut pool);
        train.push(pool[..shots].to_vec());
        val.push(pool[shots..need].to_vec());
    }
    Ok(FewShotSet {
        shots,
        seed,
        train,
        val,
    })
}

impl FewShotSet {
    /// Training indices, class by class.
    pub fn train_indices(&self) -> Vec<usize> {
        self.train.concat()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.val.concat()
    }
}
