//! JSON dataset manifest. Paths inside a manifest are relative to the
//! directory holding the manifest file.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, CheckpointMeta};
use super::synthetic::SyntheticConfig;
use super::tensor_file::{read_header, read_tensor_as};
use crate::attention::{AttnPoolParams, DenseFeatureMap};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub path: String,
    pub label: usize,
    pub split: Split,
    /// Spatial cells carrying the class-discriminative content, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planted_cells: Vec<usize>,
}

/// Where the original attention-pooling layer lives and how to run it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnPoolEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub heads: usize,
    #[serde(default)]
    pub include_mean_token: bool,
    #[serde(default)]
    pub pos_embed: bool,
    /// Overrides the default `sqrt(embed / heads)` attention scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl AttnPoolEntry {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            heads: self.heads,
            include_mean_token: self.include_mean_token,
            pos_embed: self.pos_embed,
            scale: self.scale,
        }
    }
}

/// Generation record written by the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInfo {
    pub config: SyntheticConfig,
    /// Top-1 zero-shot accuracy on the test split, measured at generation.
    pub zero_shot_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub grid: Grid,
    pub embed_dim: usize,
    pub classifier: String,
    pub attnpool: AttnPoolEntry,
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticInfo>,
    #[serde(skip)]
    root: PathBuf,
}

/// A sample with its feature map in memory.
#[derive(Clone, Debug)]
pub struct LoadedSample<T> {
    /// Position in the manifest's sample list.
    pub index: usize,
    pub path: String,
    pub label: usize,
    pub features: DenseFeatureMap<T>,
    pub planted_cells: Vec<usize>,
}

impl DatasetManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        classes: Vec<String>,
        grid: Grid,
        embed_dim: usize,
        classifier: impl Into<String>,
        attnpool: AttnPoolEntry,
        samples: Vec<SampleEntry>,
        root: impl Into<PathBuf>,
    ) -> Self {
        Self {
            name: name.into(),
            classes,
            grid,
            embed_dim,
            classifier: classifier.into(),
            attnpool,
            samples,
            synthetic: None,
            root: root.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split_indices(&self, split: Split) -> impl Iterator<Item = usize> + '_ {
        self.samples
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.split == split)
            .map(|(i, _)| i)
    }

    /// Checks structure and every referenced file header. Returns warnings
    /// for issues that do not prevent use.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.classes.is_empty() {
            return bad("class list is empty".into());
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return bad(format!("duplicate class name {c:?}"));
            }
        }
        let Grid { height, width, channels } = self.grid;
        if height == 0 || width == 0 || channels == 0 || self.embed_dim == 0 {
            return bad("grid and embed_dim must be positive".into());
        }
        let n = self.n_classes();
        let hw = height * width;
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= n {
                return bad(format!("sample {i} ({}) has label {} but only {n} classes", s.path, s.label));
            }
            if let Some(&c) = s.planted_cells.iter().find(|&&c| c >= hw) {
                return bad(format!("sample {i} marks cell {c} outside the {height}x{width} grid"));
            }
        }
        let checked: Vec<Result<()>> = self
            .samples
            .par_iter()
            .map(|s| {
                let (_, dims) = read_header(self.resolve(&s.path))?;
                if dims != [height, width, channels] && dims != [hw, channels] {
                    return Err(Error::Manifest(format!(
                        "{} has shape {dims:?}, manifest declares {height}x{width}x{channels}",
                        s.path
                    )));
                }
                Ok(())
            })
            .collect();
        checked.into_iter().collect::<Result<()>>()?;

        let (_, dims) = read_header(self.resolve(&self.classifier))?;
        if dims != [n, self.embed_dim] {
            return bad(format!(
                "classifier has shape {dims:?}, expected [{n}, {}]",
                self.embed_dim
            ));
        }

        let mut warnings = Vec::new();
        match &self.attnpool.checkpoint {
            Some(dir) => {
                let p: AttnPoolParams<f64> = checkpoint::load(self.resolve(dir), &self.attnpool.meta())?;
                if p.channels() != channels || p.out_dim() != self.embed_dim {
                    return bad(format!(
                        "attention-pool checkpoint maps {} -> {}, manifest declares {channels} -> {}",
                        p.channels(),
                        p.out_dim(),
                        self.embed_dim
                    ));
                }
                if let Some(pe) = &p.tensors.pos_embed {
                    if pe.rows() != hw + 1 {
                        return bad(format!("positional table has {} rows, grid needs {}", pe.rows(), hw + 1));
                    }
                }
            }
            None => warnings.push("no attention-pool checkpoint; training and evaluation need one".into()),
        }
        if self.split_indices(Split::Test).next().is_none() {
            warnings.push("manifest has no test samples".into());
        }
        Ok(warnings)
    }

    pub fn load_sample<T: Scalar>(&self, index: usize) -> Result<LoadedSample<T>> {
        let s = self.samples.get(index).ok_or(Error::Index {
            what: "manifest samples",
            index,
            len: self.samples.len(),
        })?;
        let t = read_tensor_as::<T>(self.resolve(&s.path))?;
        let features = DenseFeatureMap::from_tensor(t, Some((self.grid.height, self.grid.width)))?;
        if features.channels() != self.grid.channels {
            return Err(Error::Manifest(format!(
                "{} has {} channels, manifest declares {}",
                s.path,
                features.channels(),
                self.grid.channels
            )));
        }
        Ok(LoadedSample {
            index,
            path: s.path.clone(),
            label: s.label,
            features,
            planted_cells: s.planted_cells.clone(),
        })
    }

    /// Loads the listed samples in order.
    pub fn load_samples<T: Scalar>(&self, indices: &[usize]) -> Result<Vec<LoadedSample<T>>> {
        indices.par_iter().map(|&i| self.load_sample(i)).collect()
    }

    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<Vec<LoadedSample<T>>> {
        let idx: Vec<usize> = self.split_indices(split).collect();
        self.load_samples(&idx)
    }

    pub fn load_classifier_weights<T: Scalar>(&self) -> Result<Tensor<T>> {
        read_tensor_as(self.resolve(&self.classifier))
    }

    pub fn load_attnpool<T: Scalar>(&self) -> Result<AttnPoolParams<T>> {
        let dir = self
            .attnpool
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::config("manifest has no attention-pool checkpoint"))?;
        checkpoint::load(self.resolve(dir), &self.attnpool.meta())
    }
}
