//! Residual-blended inference, the zero-shot baseline, and accuracy metrics.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnPoolParams, DenseFeatureMap};
use crate::error::{Error, Result};
use crate::kernels::{self, dot, NORM_EPS};
use crate::store::LoadedSample;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

/// Text-derived class weights, one row per class.
///
/// With `normalize` set (the default), rows are unit-normalized at
/// construction and logits are `logit_scale · cos(f, row)`. Without it,
/// logits are the raw products `f · W_cᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    weights: Tensor<T>,
    logit_scale: T,
    normalize: bool,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(weights: Tensor<T>, logit_scale: f64, normalize: bool) -> Result<Self> {
        let (n, _) = weights.matrix_dims("classifier")?;
        if n < 2 {
            return Err(Error::config(format!("classifier needs at least 2 classes, got {n}")));
        }
        if !weights.is_finite() {
            return Err(Error::Degenerate("classifier has non-finite weights".into()));
        }
        let mut weights = weights;
        if normalize {
            for i in 0..n {
                let row = weights.row_mut(i);
                if kernels::norm(row) < T::cast(NORM_EPS) {
                    return Err(Error::Degenerate(format!("classifier row {i} has zero norm")));
                }
                let unit = kernels::l2_normalize(row, T::cast(NORM_EPS));
                row.copy_from_slice(&unit);
            }
        }
        Ok(Self {
            weights,
            logit_scale: T::cast(logit_scale),
            normalize,
        })
    }

    pub fn with_defaults(weights: Tensor<T>) -> Result<Self> {
        Self::new(weights, DEFAULT_LOGIT_SCALE, true)
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn logit_scale(&self) -> T {
        self.logit_scale
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    fn check(&self, f: &[T]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(Error::dims("classifier input", &[f.len()], self.weights.dims()));
        }
        Ok(())
    }

    pub fn logits(&self, f: &[T]) -> Result<Vec<T>> {
        self.check(f)?;
        let rows = 0..self.n_classes();
        if !self.normalize {
            return Ok(rows.map(|i| dot(self.weights.row(i), f)).collect());
        }
        let n = kernels::norm(f);
        if n < T::cast(NORM_EPS) {
            return Err(Error::Degenerate("pooled feature has zero norm".into()));
        }
        let unit: Vec<T> = f.iter().map(|&x| x / n).collect();
        Ok(rows.map(|i| self.logit_scale * dot(self.weights.row(i), &unit)).collect())
    }

    /// Gradient of `⟨dlogits, logits(f)⟩` with respect to `f`.
    pub fn logits_backward(&self, f: &[T], dlogits: &[T]) -> Result<Vec<T>> {
        self.check(f)?;
        let mut d_unit = vec![T::zero(); self.dim()];
        for (i, &g) in dlogits.iter().enumerate() {
            kernels::axpy(g, self.weights.row(i), &mut d_unit);
        }
        if !self.normalize {
            return Ok(d_unit);
        }
        let d_unit = kernels::scale(&d_unit, self.logit_scale);
        Ok(kernels::l2_normalize_backward(f, &d_unit, T::cast(NORM_EPS)))
    }
}

/// Weight `β` on the frozen branch in `β·orig(F) + tuned(F)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub beta: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { beta: 0.5 }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::config(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// `β·orig(F) + tuned(F)`.
pub fn blend<T: Scalar>(
    f: &DenseFeatureMap<T>,
    orig: &AttnPoolParams<T>,
    tuned: &AttnPoolParams<T>,
    beta: T,
) -> Result<Vec<T>> {
    let a = orig.forward(f)?;
    let b = tuned.forward(f)?;
    if a.len() != b.len() {
        return Err(Error::dims("blend", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(&b).map(|(&x, &y)| beta * x + y).collect())
}

/// Anything that maps a feature map to class logits.
pub trait LogitModel<T>: Sync {
    fn logits(&self, f: &DenseFeatureMap<T>) -> Result<Vec<T>>;
}

/// Original layer only.
pub struct ZeroShot<'a, T> {
    pub orig: &'a AttnPoolParams<T>,
    pub classifier: &'a Classifier<T>,
}

impl<T: Scalar> LogitModel<T> for ZeroShot<'_, T> {
    fn logits(&self, f: &DenseFeatureMap<T>) -> Result<Vec<T>> {
        self.classifier.logits(&self.orig.forward(f)?)
    }
}

/// Blend of original and fine-tuned layers.
pub struct Blended<'a, T> {
    pub orig: &'a AttnPoolParams<T>,
    pub tuned: &'a AttnPoolParams<T>,
    pub beta: T,
    pub classifier: &'a Classifier<T>,
}

impl<T: Scalar> LogitModel<T> for Blended<'_, T> {
    fn logits(&self, f: &DenseFeatureMap<T>) -> Result<Vec<T>> {
        self.classifier.logits(&blend(f, self.orig, self.tuned, self.beta)?)
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: String,
    pub label: usize,
    pub predicted: usize,
    pub top_logit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    /// `path,label,predicted,top_logit` with a header row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("path,label,predicted,top_logit\n");
        for p in &self.predictions {
            out.push_str(&format!("{},{},{},{:e}\n", p.path, p.label, p.predicted, p.top_logit));
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Top-1 accuracy of `model` over `samples`.
pub fn evaluate<T: Scalar, M: LogitModel<T>>(
    samples: &[LoadedSample<T>],
    model: &M,
    n_classes: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let predictions: Vec<Prediction> = samples
        .par_iter()
        .map(|s| {
            let logits = model.logits(&s.features)?;
            let predicted = argmax(&logits);
            Ok(Prediction {
                path: s.path.clone(),
                label: s.label,
                predicted,
                top_logit: logits[predicted].widen(),
            })
        })
        .collect::<Result<_>>()?;
    let mut hits = vec![0usize; n_classes];
    let mut counts = vec![0usize; n_classes];
    for p in &predictions {
        if p.label >= n_classes {
            return Err(Error::Index {
                what: "class labels",
                index: p.label,
                len: n_classes,
            });
        }
        counts[p.label] += 1;
        hits[p.label] += usize::from(p.label == p.predicted);
    }
    let correct: usize = hits.iter().sum();
    Ok(EvalReport {
        accuracy: correct as f64 / predictions.len() as f64,
        correct,
        total: predictions.len(),
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        predictions,
    })
}
