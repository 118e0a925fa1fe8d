//! Planted-parts synthetic dataset.
//!
//! A random orthonormal basis of ℝ^C supplies the part vocabulary: the first
//! `N` basis vectors are class parts, the next `P − N` are background parts.
//! Every map places its class part in 2–4 random cells and a random
//! background part in each remaining cell, then adds isotropic Gaussian noise
//! whose expected norm per cell is `σ`.
//!
//! The original attention-pooling layer uses the basis as its value
//! projection and maps part `i` to the `i`-th row of an orthonormal set in
//! ℝ^{d_out}, so the pooled feature of a pure part is exactly that row. The
//! classifier row for class `c` is that image plus Gaussian noise of expected
//! norm `σ`, renormalized. At `σ = 0` the classes are separable by
//! construction; at `σ > 0` background clutter leaks into the class logits
//! and zero-shot accuracy drops into the middle of the range.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::manifest::{AttnPoolEntry, DatasetManifest, Grid, SampleEntry, Split, SyntheticInfo};
use super::tensor_file::write_tensor;
use super::LoadedSample;
use crate::attention::{AttnPoolParams, AttnPoolTensors, DenseFeatureMap};
use crate::error::{Error, Result};
use crate::inference::{evaluate, Classifier, ZeroShot};
use crate::kernels::{axpy, dot, norm};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Train-split samples per class (the pool k-shot sets are drawn from).
    pub pool_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub parts: usize,
    pub noise: f64,
    pub heads: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    /// The pinned benchmark fixture.
    pub fn fixture() -> Self {
        Self {
            classes: 10,
            pool_per_class: 20,
            test_per_class: 30,
            height: 7,
            width: 7,
            channels: 64,
            embed_dim: 32,
            parts: 20,
            noise: 0.5,
            heads: 4,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.parts < self.classes {
            return fail(format!("parts ({}) must be at least classes ({})", self.parts, self.classes));
        }
        if self.channels < 8 || self.embed_dim < 8 {
            return fail("channels and embed_dim must be at least 8".into());
        }
        if self.parts > self.channels.min(self.embed_dim) {
            return fail(format!(
                "parts ({}) must not exceed min(channels, embed_dim) = {}",
                self.parts,
                self.channels.min(self.embed_dim)
            ));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!("heads ({}) must divide channels ({})", self.heads, self.channels));
        }
        if self.height * self.width < 4 {
            return fail("grid needs at least 4 cells".into());
        }
        if self.pool_per_class == 0 || self.test_per_class == 0 {
            return fail("per-class sample counts must be positive".into());
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return fail(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Modified Gram–Schmidt over `count` random Gaussian vectors in ℝ^dim.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        for b in &basis {
            let p = dot(&v, b);
            axpy(-p, b, &mut v);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn f32_tensor(dims: Vec<usize>, data: &[f64]) -> Tensor<f32> {
    Tensor::new(dims, data.iter().map(|&x| x as f32).collect()).expect("generator shapes")
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes the dataset under `out_dir` and returns its manifest (also saved
/// as `out_dir/manifest.json`).
pub fn gen_synthetic(cfg: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, d_out, hw) = (cfg.channels, cfg.embed_dim, cfg.height * cfg.width);

    let basis = orthonormal(&mut rng, c, c);
    let images = orthonormal(&mut rng, cfg.parts, d_out);

    // value projection: coordinates in the part basis (C × C, input-major)
    let mut v_weight = vec![0.0; c * c];
    for (i, b) in basis.iter().enumerate() {
        for ch in 0..c {
            v_weight[ch * c + i] = b[ch];
        }
    }
    let mut c_weight = Vec::with_capacity(c * d_out);
    for i in 0..c {
        if i < cfg.parts {
            c_weight.extend_from_slice(&images[i]);
        } else {
            c_weight.extend(gaussian(&mut rng, d_out, 1.0 / (d_out as f64).sqrt()));
        }
    }
    let in_std = 1.0 / (c as f64).sqrt();
    let q_weight = gaussian(&mut rng, c * c, in_std);
    let k_weight = gaussian(&mut rng, c * c, in_std);
    let orig = AttnPoolParams::new(
        AttnPoolTensors {
            q_weight: f32_tensor(vec![c, c], &q_weight),
            q_bias: Tensor::zeros(&[c]),
            k_weight: f32_tensor(vec![c, c], &k_weight),
            k_bias: Tensor::zeros(&[c]),
            v_weight: f32_tensor(vec![c, c], &v_weight),
            v_bias: Tensor::zeros(&[c]),
            c_weight: f32_tensor(vec![c, d_out], &c_weight),
            c_bias: Tensor::zeros(&[d_out]),
            pos_embed: None,
        },
        cfg.heads,
        None,
        false,
    )?;

    let mut clf = Vec::with_capacity(cfg.classes * d_out);
    for img in images.iter().take(cfg.classes) {
        let mut row = img.clone();
        axpy(1.0, &gaussian(&mut rng, d_out, cfg.noise / (d_out as f64).sqrt()), &mut row);
        let n = norm(&row);
        clf.extend(row.into_iter().map(|x| x / n));
    }
    let clf = f32_tensor(vec![cfg.classes, d_out], &clf);

    mkdir(out_dir)?;
    write_tensor(out_dir.join("classifier.saft"), &clf)?;
    checkpoint::save(out_dir.join("attnpool"), &orig)?;

    let cell_std = cfg.noise / (c as f64).sqrt();
    let background = cfg.parts - cfg.classes;
    let mut samples = Vec::new();
    let mut test = Vec::new();
    for (split, per_class) in [(Split::Train, cfg.pool_per_class), (Split::Test, cfg.test_per_class)] {
        let dir_name = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        mkdir(&out_dir.join("features").join(dir_name))?;
        for label in 0..cfg.classes {
            for i in 0..per_class {
                let planted_count = rng.gen_range(2..=4usize);
                let mut planted = index::sample(&mut rng, hw, planted_count).into_vec();
                planted.sort_unstable();
                let mut data = Vec::with_capacity(hw * c);
                for cell in 0..hw {
                    let part = if planted.binary_search(&cell).is_ok() {
                        Some(label)
                    } else if background > 0 {
                        Some(cfg.classes + rng.gen_range(0..background))
                    } else {
                        None
                    };
                    let mut v = gaussian(&mut rng, c, cell_std);
                    if let Some(p) = part {
                        axpy(1.0, &basis[p], &mut v);
                    }
                    data.extend(v);
                }
                let t = f32_tensor(vec![cfg.height, cfg.width, c], &data);
                let rel = format!("features/{dir_name}/c{label:02}_{i:03}.saft");
                write_tensor(out_dir.join(&rel), &t)?;
                if split == Split::Test {
                    test.push(LoadedSample {
                        index: samples.len(),
                        path: rel.clone(),
                        label,
                        features: DenseFeatureMap::from_tensor(t, None)?,
                        planted_cells: planted.clone(),
                    });
                }
                samples.push(SampleEntry {
                    path: rel,
                    label,
                    split,
                    planted_cells: planted,
                });
            }
        }
    }

    let classifier = Classifier::with_defaults(clf)?;
    let zero_shot = evaluate(&test, &ZeroShot { orig: &orig, classifier: &classifier }, cfg.classes)?;

    let mut manifest = DatasetManifest::new(
        format!("synthetic-seed{}", cfg.seed),
        (0..cfg.classes).map(|i| format!("class_{i:02}")).collect(),
        Grid {
            height: cfg.height,
            width: cfg.width,
            channels: c,
        },
        d_out,
        "classifier.saft",
        AttnPoolEntry {
            checkpoint: Some("attnpool".into()),
            heads: cfg.heads,
            include_mean_token: false,
            pos_embed: false,
            scale: None,
        },
        samples,
        out_dir,
    );
    manifest.synthetic = Some(SyntheticInfo {
        config: cfg.clone(),
        zero_shot_accuracy: zero_shot.accuracy,
    });
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
