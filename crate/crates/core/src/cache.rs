//! Key-value cache adapter on top of pooled features.
//!
//! Keys are the L2-normalized pooled features of the few-shot training set,
//! values their one-hot labels. A query `f` adds
//! `α·φ(f̂·keysᵀ)·values` to the classifier logits, where
//! `φ(x) = exp(−γ(1 − x))`. In blended mode both keys and queries use
//! `β·orig(F) + tuned(F)` instead of `orig(F)`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnPoolParams, DenseFeatureMap};
use crate::error::{Error, Result};
use crate::inference::{argmax, blend, Classifier, LogitModel};
use crate::kernels::{self, NORM_EPS};
use crate::store::{read_tensor_as, write_tensor, LoadedSample};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_ALPHAS: [f64; 4] = [0.5, 1.0, 2.0, 5.0];
pub const DEFAULT_GAMMAS: [f64; 4] = [1.0, 3.0, 5.5, 10.0];

const KEYS_FILE: &str = "keys.saft";
const VALUES_FILE: &str = "values.saft";
const META_FILE: &str = "cache.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Pool with the frozen layer only.
    Original,
    /// Pool with `β·orig + tuned`.
    Blended,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub alpha: f64,
    pub gamma: f64,
    pub mode: CacheMode,
    pub beta: f64,
}

impl CacheMeta {
    fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::config(format!("gamma must be finite and > 0, got {}", self.gamma)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Frozen cache. Cheap to query from many threads.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheModel<T> {
    keys: Tensor<T>,
    values: Tensor<T>,
    meta: CacheMeta,
}

/// `exp(−γ(1 − x))`.
pub fn phi<T: Scalar>(x: T, gamma: T) -> T {
    (-gamma * (T::one() - x)).exp()
}

/// The pooled feature used for both keys and queries under `mode`.
pub fn pooled_feature<T: Scalar>(
    f: &DenseFeatureMap<T>,
    mode: CacheMode,
    orig: &AttnPoolParams<T>,
    tuned: &AttnPoolParams<T>,
    beta: f64,
) -> Result<Vec<T>> {
    match mode {
        CacheMode::Original => orig.forward(f),
        CacheMode::Blended => blend(f, orig, tuned, T::cast(beta)),
    }
}

fn unit<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = kernels::norm(v);
    if n < T::cast(NORM_EPS) {
        return Err(Error::Degenerate("pooled feature has zero norm".into()));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Builds the cache from few-shot samples, which must hold the same number
/// of samples for every one of `n_classes` classes.
pub fn build_cache<T: Scalar>(
    samples: &[LoadedSample<T>],
    n_classes: usize,
    orig: &AttnPoolParams<T>,
    tuned: &AttnPoolParams<T>,
    meta: CacheMeta,
) -> Result<CacheModel<T>> {
    meta.validate()?;
    if n_classes == 0 || samples.is_empty() {
        return Err(Error::config("cache needs at least one class and one sample"));
    }
    let mut counts = vec![0usize; n_classes];
    for s in samples {
        *counts.get_mut(s.label).ok_or(Error::Index {
            what: "class labels",
            index: s.label,
            len: n_classes,
        })? += 1;
    }
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(Error::config(format!("cache needs the same shot count per class, got {counts:?}")));
    }
    let keys = samples
        .par_iter()
        .map(|s| unit(&pooled_feature(&s.features, meta.mode, orig, tuned, meta.beta)?))
        .collect::<Result<Vec<_>>>()?;
    let mut values = Tensor::zeros(&[samples.len(), n_classes]);
    for (r, s) in samples.iter().enumerate() {
        values.row_mut(r)[s.label] = T::one();
    }
    Ok(CacheModel {
        keys: Tensor::from_rows(&keys)?,
        values,
        meta,
    })
}

impl<T: Scalar> CacheModel<T> {
    /// Wraps existing tensors after checking the cache invariants.
    pub fn new(keys: Tensor<T>, values: Tensor<T>, meta: CacheMeta) -> Result<Self> {
        meta.validate()?;
        let (rows, dim) = keys.matrix_dims("cache keys")?;
        let (vrows, classes) = values.matrix_dims("cache values")?;
        if rows != vrows || rows == 0 || dim == 0 || classes == 0 {
            return Err(Error::dims("cache", keys.dims(), values.dims()));
        }
        let tol = T::cast(1e-6);
        for r in 0..rows {
            if (kernels::norm(keys.row(r)) - T::one()).abs() > tol {
                return Err(Error::Manifest(format!("cache key {r} is not unit norm")));
            }
            let row = values.row(r);
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || zeros != classes - 1 {
                return Err(Error::Manifest(format!("cache value row {r} is not one-hot")));
            }
        }
        Ok(Self { keys, values, meta })
    }

    pub fn keys(&self) -> &Tensor<T> {
        &self.keys
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn meta(&self) -> CacheMeta {
        self.meta
    }

    pub fn n_classes(&self) -> usize {
        self.values.cols()
    }

    /// Same keys and values with different `α`, `γ`.
    pub fn with_hparams(&self, alpha: f64, gamma: f64) -> Result<Self> {
        let meta = CacheMeta { alpha, gamma, ..self.meta };
        meta.validate()?;
        Ok(Self { meta, ..self.clone() })
    }

    /// Cosine of `f` against every key.
    pub fn affinities(&self, f: &[T]) -> Result<Vec<T>> {
        if f.len() != self.keys.cols() {
            return Err(Error::dims("cache query", &[f.len()], self.keys.dims()));
        }
        let q = unit(f)?;
        Ok((0..self.keys.rows()).map(|r| kernels::dot(self.keys.row(r), &q)).collect())
    }

    /// `α·φ(affinities)·values`.
    pub fn cache_term(&self, affinities: &[T], alpha: f64, gamma: f64) -> Result<Vec<T>> {
        let g = T::cast(gamma);
        let weights: Vec<T> = affinities.iter().map(|&a| phi(a, g)).collect();
        Ok(kernels::scale(&kernels::vecmat(&weights, &self.values)?, T::cast(alpha)))
    }

    /// Classifier logits on the pooled feature plus the cache term.
    /// With `α = 0` this is exactly the classifier's output.
    pub fn logits_for_feature(&self, f: &[T], classifier: &Classifier<T>) -> Result<Vec<T>> {
        if classifier.n_classes() != self.n_classes() {
            return Err(Error::dims("cache classes", &[self.n_classes()], classifier.weights().dims()));
        }
        let base = classifier.logits(f)?;
        if self.meta.alpha == 0.0 {
            return Ok(base);
        }
        let term = self.cache_term(&self.affinities(f)?, self.meta.alpha, self.meta.gamma)?;
        kernels::add(&base, &term)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(dir.join(KEYS_FILE), &self.keys)?;
        write_tensor(dir.join(VALUES_FILE), &self.values)?;
        let path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta = serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
        Self::new(
            read_tensor_as(dir.join(KEYS_FILE))?,
            read_tensor_as(dir.join(VALUES_FILE))?,
            meta,
        )
    }
}

/// SAFE-A: pooled feature per the cache's mode, then classifier plus cache.
pub struct SafeA<'a, T> {
    pub orig: &'a AttnPoolParams<T>,
    pub tuned: &'a AttnPoolParams<T>,
    pub cache: &'a CacheModel<T>,
    pub classifier: &'a Classifier<T>,
}

impl<T: Scalar> LogitModel<T> for SafeA<'_, T> {
    fn logits(&self, f: &DenseFeatureMap<T>) -> Result<Vec<T>> {
        safe_a_logits(f, self.orig, self.tuned, self.cache, self.classifier)
    }
}

pub fn safe_a_logits<T: Scalar>(
    f: &DenseFeatureMap<T>,
    orig: &AttnPoolParams<T>,
    tuned: &AttnPoolParams<T>,
    cache: &CacheModel<T>,
    classifier: &Classifier<T>,
) -> Result<Vec<T>> {
    let m = cache.meta();
    let pooled = pooled_feature(f, m.mode, orig, tuned, m.beta)?;
    cache.logits_for_feature(&pooled, classifier)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheGridCell {
    pub alpha: f64,
    pub gamma: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheTuning {
    pub alpha: f64,
    pub gamma: f64,
    pub val_accuracy: f64,
    /// Alpha outer, gamma inner.
    pub cells: Vec<CacheGridCell>,
}

/// Picks the `(α, γ)` pair with the best validation accuracy; the first
/// such pair in grid order wins ties.
pub fn tune_cache_hparams<T: Scalar>(
    val: &[LoadedSample<T>],
    orig: &AttnPoolParams<T>,
    tuned: &AttnPoolParams<T>,
    cache: &CacheModel<T>,
    classifier: &Classifier<T>,
    alphas: &[f64],
    gammas: &[f64],
) -> Result<CacheTuning> {
    if alphas.is_empty() || gammas.is_empty() {
        return Err(Error::config("alpha and gamma grids must be nonempty"));
    }
    if val.is_empty() {
        return Err(Error::config("cache tuning needs validation samples"));
    }
    for &a in alphas {
        for &g in gammas {
            cache.with_hparams(a, g)?;
        }
    }
    let m = cache.meta();
    // Classifier logits and affinities do not depend on (α, γ).
    let pre = val
        .par_iter()
        .map(|s| {
            let f = pooled_feature(&s.features, m.mode, orig, tuned, m.beta)?;
            Ok((classifier.logits(&f)?, cache.affinities(&f)?, s.label))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(alphas.len() * gammas.len());
    for &alpha in alphas {
        for &gamma in gammas {
            let mut correct = 0usize;
            for (base, aff, label) in &pre {
                let logits = if alpha == 0.0 {
                    base.clone()
                } else {
                    kernels::add(base, &cache.cache_term(aff, alpha, gamma)?)?
                };
                correct += usize::from(argmax(&logits) == *label);
            }
            cells.push(CacheGridCell {
                alpha,
                gamma,
                val_accuracy: correct as f64 / pre.len() as f64,
            });
        }
    }
    let mut best = 0;
    for (i, c) in cells.iter().enumerate() {
        if c.val_accuracy > cells[best].val_accuracy {
            best = i;
        }
    }
    Ok(CacheTuning {
        alpha: cells[best].alpha,
        gamma: cells[best].gamma,
        val_accuracy: cells[best].val_accuracy,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttnPoolConfig;
    use crate::inference::Blended;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Toy {
        orig: AttnPoolParams<f64>,
        tuned: AttnPoolParams<f64>,
        classifier: Classifier<f64>,
        train: Vec<LoadedSample<f64>>,
        val: Vec<LoadedSample<f64>>,
    }

    fn random_map(rng: &mut ChaCha8Rng) -> DenseFeatureMap<f64> {
        let v = Tensor::new(vec![9, 5], (0..45).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        DenseFeatureMap::new(3, 3, v).unwrap()
    }

    fn toy(seed: u64, shots: usize) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AttnPoolConfig {
            channels: 5,
            embed_dim: 6,
            out_dim: 4,
            heads: 2,
            scale: None,
            include_mean_token: true,
            positional: Some((3, 3)),
        };
        let orig = AttnPoolParams::random(&cfg, &mut rng).unwrap();
        let tuned = AttnPoolParams::random(&cfg, &mut rng).unwrap();
        let w = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let classifier = Classifier::with_defaults(w).unwrap();
        let mut make = |n: usize| -> Vec<LoadedSample<f64>> {
            (0..n)
                .map(|i| LoadedSample {
                    index: i,
                    path: format!("{i}"),
                    label: i % 3,
                    features: random_map(&mut rng),
                    planted_cells: vec![],
                })
                .collect()
        };
        let train = make(3 * shots);
        let val = make(12);
        Toy { orig, tuned, classifier, train, val }
    }

    fn meta(mode: CacheMode) -> CacheMeta {
        CacheMeta { alpha: 1.0, gamma: 3.0, mode, beta: 0.5 }
    }

    #[test]
    fn phi_values() {
        for g in [0.1, 1.0, 5.5, 40.0] {
            assert_eq!(phi(1.0, g), 1.0);
        }
        assert!((phi(0.0f64, 1.0) - 0.367879).abs() < 1e-6);
        let xs: Vec<f64> = (0..=200).map(|i| -1.0 + i as f64 / 100.0).collect();
        for g in [0.5, 3.0, 10.0] {
            for w in xs.windows(2) {
                assert!(phi(w[1], g) > phi(w[0], g));
            }
            assert!(xs.iter().all(|&x| phi(x, g) > 0.0 && phi(x, g) <= 1.0));
        }
    }

    #[test]
    fn one_hot_values_and_unit_keys() {
        let t = toy(1, 1);
        let c = build_cache(&t.train[..2], 2, &t.orig, &t.tuned, meta(CacheMode::Original));
        // labels 0 and 1 only, two classes
        let c = c.unwrap();
        assert_eq!(c.values().as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        let c = build_cache(&t.train, 3, &t.orig, &t.tuned, meta(CacheMode::Blended)).unwrap();
        for r in 0..c.keys().rows() {
            assert!((kernels::norm(c.keys().row(r)) - 1.0).abs() < 1e-12);
            assert_eq!(c.values().row(r).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn keys_match_recomputed_features() {
        let t = toy(2, 2);
        for mode in [CacheMode::Original, CacheMode::Blended] {
            let c = build_cache(&t.train, 3, &t.orig, &t.tuned, meta(mode)).unwrap();
            for (r, s) in t.train.iter().enumerate() {
                let a = t.orig.forward(&s.features).unwrap();
                let raw = match mode {
                    CacheMode::Original => a,
                    CacheMode::Blended => {
                        let b = t.tuned.forward(&s.features).unwrap();
                        a.iter().zip(&b).map(|(x, y)| 0.5 * x + y).collect()
                    }
                };
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (k, x) in c.keys().row(r).iter().zip(&raw) {
                    assert!((k - x / n).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn blended_with_identical_layers_matches_original() {
        let t = toy(3, 2);
        let a = build_cache(&t.train, 3, &t.orig, &t.orig, meta(CacheMode::Original)).unwrap();
        let b = build_cache(&t.train, 3, &t.orig, &t.orig, meta(CacheMode::Blended)).unwrap();
        assert!(a.keys().max_abs_diff(b.keys()) < 1e-6);
    }

    #[test]
    fn imbalanced_classes_are_rejected() {
        let t = toy(4, 2);
        let r = build_cache(&t.train[..5], 3, &t.orig, &t.tuned, meta(CacheMode::Original));
        assert!(matches!(r, Err(Error::Config(_))));
        let bad = CacheMeta { gamma: 0.0, ..meta(CacheMode::Original) };
        assert!(matches!(build_cache(&t.train, 3, &t.orig, &t.tuned, bad), Err(Error::Config(_))));
    }

    #[test]
    fn zero_alpha_is_bit_identical_to_blended_inference() {
        let t = toy(5, 2);
        let c = build_cache(&t.train, 3, &t.orig, &t.tuned, meta(CacheMode::Blended))
            .unwrap()
            .with_hparams(0.0, 3.0)
            .unwrap();
        let safe = Blended { orig: &t.orig, tuned: &t.tuned, beta: 0.5, classifier: &t.classifier };
        for s in &t.val {
            let a = safe_a_logits(&s.features, &t.orig, &t.tuned, &c, &t.classifier).unwrap();
            let b = safe.logits(&s.features).unwrap();
            assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn training_query_hits_its_own_key() {
        let t = toy(6, 2);
        let c = build_cache(&t.train, 3, &t.orig, &t.tuned, meta(CacheMode::Blended)).unwrap();
        for (r, s) in t.train.iter().enumerate() {
            let f = pooled_feature(&s.features, CacheMode::Blended, &t.orig, &t.tuned, 0.5).unwrap();
            let aff = c.affinities(&f).unwrap();
            assert!((aff[r] - 1.0).abs() < 1e-12);
            assert!(aff.iter().all(|&a| a <= 1.0 + 1e-12));
            assert!(c.cache_term(&aff, 1.0, 3.0).unwrap()[s.label] >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let t = toy(7, 1);
        let c = build_cache(&t.train, 3, &t.orig, &t.tuned, meta(CacheMode::Original)).unwrap();
        assert!(matches!(c.affinities(&[1.0; 3]), Err(Error::Dimension { .. })));
        let two = Classifier::with_defaults(Tensor::new(vec![2, 4], vec![1.0; 8]).unwrap()).unwrap();
        assert!(matches!(c.logits_for_feature(&[1.0; 4], &two), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tuning_is_exhaustive_and_first_best() {
        let t = toy(8, 2);
        let c = build_cache(&t.train, 3, &t.orig, &t.tuned, meta(CacheMode::Blended)).unwrap();
        let alphas = [0.0, 0.5, 1.0, 5.0];
        let gammas = [1.0, 5.0];
        let r = tune_cache_hparams(&t.val, &t.orig, &t.tuned, &c, &t.classifier, &alphas, &gammas).unwrap();
        assert_eq!(r.cells.len(), 8);
        // recheck every cell with the full query path
        for cell in &r.cells {
            let cc = c.with_hparams(cell.alpha, cell.gamma).unwrap();
            let model = SafeA { orig: &t.orig, tuned: &t.tuned, cache: &cc, classifier: &t.classifier };
            let acc = crate::inference::evaluate(&t.val, &model, 3).unwrap().accuracy;
            assert_eq!(acc, cell.val_accuracy);
            assert!(r.val_accuracy >= acc);
        }
        let first = r.cells.iter().position(|c| c.val_accuracy == r.val_accuracy).unwrap();
        assert_eq!((r.alpha, r.gamma), (r.cells[first].alpha, r.cells[first].gamma));
        let safe = Blended { orig: &t.orig, tuned: &t.tuned, beta: 0.5, classifier: &t.classifier };
        let base = crate::inference::evaluate(&t.val, &safe, 3).unwrap().accuracy;
        assert!(r.val_accuracy >= base);

        let one = tune_cache_hparams(&t.val, &t.orig, &t.tuned, &c, &t.classifier, &[2.0], &[5.5]).unwrap();
        assert_eq!((one.alpha, one.gamma), (2.0, 5.5));
        assert!(tune_cache_hparams(&t.val, &t.orig, &t.tuned, &c, &t.classifier, &[], &[1.0]).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let t = toy(9, 2);
        let c = build_cache(&t.train, 3, &t.orig, &t.tuned, meta(CacheMode::Blended)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(CacheModel::<f64>::load(dir.path()).unwrap(), c);
    }

    proptest! {
        #[test]
        fn cache_term_partitions_mass(seed in 0u64..500, alpha in 0.0f64..10.0, gamma in 0.1f64..20.0) {
            let t = toy(seed, 2);
            let c = build_cache(&t.train, 3, &t.orig, &t.tuned, meta(CacheMode::Original)).unwrap();
            let f = t.orig.forward(&t.val[0].features).unwrap();
            let aff = c.affinities(&f).unwrap();
            let term = c.cache_term(&aff, alpha, gamma).unwrap();
            let total: f64 = aff.iter().map(|&a| alpha * phi(a, gamma)).sum();
            prop_assert!(term.iter().all(|&v| v >= 0.0 && v <= total + 1e-12));
            prop_assert!((term.iter().sum::<f64>() - total).abs() <= 1e-9 * (1.0 + total));
        }
    }
}
