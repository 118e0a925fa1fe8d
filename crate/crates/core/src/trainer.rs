//! Fine-tuning loop for the attention-pooling layer.
//!
//! Only the tuned copy changes. Each step draws a batch from shuffled epochs
//! over the few-shot training set, pools with the tuned layer, scores with
//! the frozen classifier, and takes one AdamW step under a cosine schedule.
//! Every `eval_every` steps the blended model is scored on the validation
//! set and the best checkpoint is kept.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnPoolGrads, AttnPoolParams, AttnPoolTensors};
use crate::error::{Error, Result};
use crate::inference::{evaluate, Blended, Classifier};
use crate::kernels;
use crate::optim::{cosine_lr, AdamW, OptimState};
use crate::rng::SplitMix64;
use crate::store::{DatasetManifest, FewShotSet, LoadedSample};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Peak learning rate for a single run.
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    pub eval_every: usize,
    /// Blend weight used for validation.
    pub beta: f64,
    pub seed: u64,
    pub adam: AdamW,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 12_800,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.0,
            lr_grid: vec![1e-4, 1e-5, 1e-6, 1e-7],
            wd_grid: vec![0.0, 1e-3, 1e-5],
            eval_every: 100,
            beta: 0.5,
            seed: 0,
            adam: AdamW::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m));
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1");
        }
        if self.lr_grid.is_empty() || self.wd_grid.is_empty() {
            return fail("learning-rate and weight-decay grids must be nonempty");
        }
        let rates = [self.lr, self.weight_decay].into_iter().chain(self.lr_grid.iter().copied()).chain(self.wd_grid.iter().copied());
        for v in rates {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("learning rates and decays must be finite and non-negative, got {v}")));
            }
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return fail("beta must be finite and non-negative");
        }
        Ok(())
    }
}

/// Few-shot samples held in memory.
#[derive(Clone, Debug)]
pub struct FewShotData<T> {
    pub n_classes: usize,
    pub train: Vec<LoadedSample<T>>,
    pub val: Vec<LoadedSample<T>>,
}

impl<T: Scalar> FewShotData<T> {
    /// Reads just the set's samples from disk.
    pub fn load(manifest: &DatasetManifest, set: &FewShotSet) -> Result<Self> {
        Ok(Self {
            n_classes: manifest.n_classes(),
            train: manifest.load_samples(&set.train_indices())?,
            val: manifest.load_samples(&set.val_indices())?,
        })
    }

    /// Picks the set's samples out of `samples`, which must be indexed by
    /// manifest position (as returned by loading the whole manifest).
    pub fn from_set(samples: &[LoadedSample<T>], set: &FewShotSet, n_classes: usize) -> Result<Self> {
        let pick = |idx: Vec<usize>| -> Result<Vec<LoadedSample<T>>> {
            idx.into_iter()
                .map(|i| {
                    samples.get(i).filter(|s| s.index == i).cloned().ok_or(Error::Index {
                        what: "loaded samples",
                        index: i,
                        len: samples.len(),
                    })
                })
                .collect()
        };
        Ok(Self {
            n_classes,
            train: pick(set.train_indices())?,
            val: pick(set.val_indices())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub val_accuracy: f64,
    /// Mean training loss since the previous record; absent at step 0.
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub final_val_accuracy: f64,
    pub history: Vec<EvalRecord>,
    pub checkpoint: AttnPoolParams<T>,
}

/// Serializable part of a [`TrainReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub lr: f64,
    pub weight_decay: f64,
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub final_val_accuracy: f64,
    pub history: Vec<EvalRecord>,
}

impl<T> TrainReport<T> {
    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            lr: self.lr,
            weight_decay: self.weight_decay,
            best_step: self.best_step,
            best_val_accuracy: self.best_val_accuracy,
            final_val_accuracy: self.final_val_accuracy,
            history: self.history.clone(),
        }
    }
}

/// Logits of the tuned layer alone, as used by the training loss.
fn sample_logits<T: Scalar>(
    params: &AttnPoolParams<T>,
    classifier: &Classifier<T>,
    sample: &LoadedSample<T>,
) -> Result<Vec<T>> {
    classifier.logits(&params.forward(&sample.features)?)
}

/// Mean cross-entropy of the tuned layer over `batch`, and its gradient.
pub fn batch_loss_and_grads<T: Scalar>(
    params: &AttnPoolParams<T>,
    classifier: &Classifier<T>,
    batch: &[&LoadedSample<T>],
) -> Result<(T, AttnPoolGrads<T>)> {
    let traces = batch
        .par_iter()
        .map(|s| params.forward_traced(&s.features))
        .collect::<Result<Vec<_>>>()?;
    let logits = traces
        .iter()
        .map(|tr| classifier.logits(tr.output()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let logits = Tensor::from_rows(&logits)?;
    let loss = kernels::cross_entropy(&logits, &labels)?;
    let dlogits = kernels::cross_entropy_backward(&logits, &labels)?;

    let per_sample = batch
        .par_iter()
        .zip(traces.par_iter())
        .enumerate()
        .map(|(b, (s, tr))| {
            let mut g = AttnPoolTensors::zeros_like(&params.tensors);
            let up = classifier.logits_backward(tr.output(), dlogits.row(b))?;
            params.accumulate_backward_traced(&s.features, tr, &up, &mut g)?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = AttnPoolTensors::zeros_like(&params.tensors);
    for g in &per_sample {
        grads.add_scaled(T::one(), g);
    }
    Ok((loss, grads))
}

/// Mean cross-entropy of `params` on `batch`, no gradients.
pub fn batch_loss<T: Scalar>(
    params: &AttnPoolParams<T>,
    classifier: &Classifier<T>,
    batch: &[&LoadedSample<T>],
) -> Result<T> {
    let logits = batch
        .iter()
        .map(|s| sample_logits(params, classifier, s))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    kernels::cross_entropy(&Tensor::from_rows(&logits)?, &labels)
}

/// Endless shuffled epochs over `0..n`.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: SplitMix64,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn validate_blend<T: Scalar>(
    data: &FewShotData<T>,
    orig: &AttnPoolParams<T>,
    tuned: &AttnPoolParams<T>,
    classifier: &Classifier<T>,
    beta: f64,
) -> Result<f64> {
    let model = Blended {
        orig,
        tuned,
        beta: T::cast(beta),
        classifier,
    };
    Ok(evaluate(&data.val, &model, data.n_classes)?.accuracy)
}

/// Fine-tunes a copy of `init` with the config's single `(lr, weight_decay)`.
///
/// Validation runs at step 0, every `eval_every` steps, and at the last
/// step. The returned checkpoint is the one with the highest validation
/// accuracy; among equals the later one wins.
pub fn train_safe<T: Scalar>(
    data: &FewShotData<T>,
    init: &AttnPoolParams<T>,
    classifier: &Classifier<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config("few-shot set has no training or validation samples"));
    }
    let mut params = init.clone();
    let mut state = OptimState::new(params.tensors.tensors().into_iter().map(|(_, t)| t));
    let mut sampler = EpochSampler::new(data.train.len(), cfg.seed);

    let acc0 = validate_blend(data, init, &params, classifier, cfg.beta)?;
    let mut history = vec![EvalRecord {
        step: 0,
        val_accuracy: acc0,
        train_loss: None,
    }];
    let (mut best_step, mut best_acc, mut best) = (0, acc0, params.clone());
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for step in 0..cfg.iterations {
        let batch: Vec<&LoadedSample<T>> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| &data.train[i])
            .collect();
        let (loss, grads) = batch_loss_and_grads(&params, classifier, &batch)?;
        loss_sum += loss.widen();
        loss_count += 1;

        let lr = cosine_lr(step, cfg.iterations, cfg.lr, 0.0)?;
        let grad_refs = grads.tensors().into_iter().map(|(_, t)| t).collect();
        let param_refs = params.tensors.tensors_mut().into_iter().map(|(_, t)| t).collect();
        cfg.adam.step(&mut state, param_refs, grad_refs, lr, cfg.weight_decay)?;

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.iterations {
            let acc = validate_blend(data, init, &params, classifier, cfg.beta)?;
            history.push(EvalRecord {
                step: done,
                val_accuracy: acc,
                train_loss: Some(loss_sum / loss_count as f64),
            });
            (loss_sum, loss_count) = (0.0, 0);
            if acc >= best_acc {
                (best_step, best_acc, best) = (done, acc, params.clone());
            }
        }
    }
    Ok(TrainReport {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        best_step,
        best_val_accuracy: best_acc,
        final_val_accuracy: history.last().map_or(acc0, |r| r.val_accuracy),
        history,
        checkpoint: best,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub weight_decay: f64,
    pub best_val_accuracy: f64,
    pub best_step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport<T> {
    pub best: TrainReport<T>,
    /// Every cell, in grid order (learning rate outer, weight decay inner).
    pub cells: Vec<GridCell>,
}

/// Runs [`train_safe`] for every `(lr, wd)` pair and keeps the first cell
/// (in grid order) with the highest validation accuracy. Cells run in
/// parallel; each is fully independent.
pub fn grid_search<T: Scalar>(
    data: &FewShotData<T>,
    init: &AttnPoolParams<T>,
    classifier: &Classifier<T>,
    cfg: &TrainConfig,
) -> Result<GridReport<T>> {
    cfg.validate()?;
    let pairs: Vec<(f64, f64)> = cfg
        .lr_grid
        .iter()
        .flat_map(|&lr| cfg.wd_grid.iter().map(move |&wd| (lr, wd)))
        .collect();
    let reports = pairs
        .par_iter()
        .map(|&(lr, weight_decay)| {
            let cell = TrainConfig {
                lr,
                weight_decay,
                ..cfg.clone()
            };
            train_safe(data, init, classifier, &cell)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = reports
        .iter()
        .map(|r| GridCell {
            lr: r.lr,
            weight_decay: r.weight_decay,
            best_val_accuracy: r.best_val_accuracy,
            best_step: r.best_step,
        })
        .collect();
    let mut best = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.best_val_accuracy > reports[best].best_val_accuracy {
            best = i;
        }
    }
    let best = reports.into_iter().nth(best).expect("grid is nonempty");
    Ok(GridReport { best, cells })
}
