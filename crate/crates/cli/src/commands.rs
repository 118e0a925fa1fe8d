use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use safe_core::cache::{build_cache, tune_cache_hparams, CacheMeta, CacheMode, SafeA};
use safe_core::correspondence::{export_heatmap, match_point, upsample, PixelPoint};
use safe_core::inference::{evaluate, Blended, Classifier, ZeroShot};
use safe_core::store::checkpoint;
use safe_core::store::synthetic::{gen_synthetic, SyntheticConfig};
use safe_core::store::{read_tensor_as, sample_k_shot, DatasetManifest, FewShotSet, Split};
use safe_core::trainer::{grid_search, train_safe, FewShotData, TrainConfig};
use safe_core::{AttnPoolParams, DenseFeatureMap, Error, Result, Scalar};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::reports::*;
use crate::{
    CacheArgs, CorrespondArgs, EvalArgs, GenSynthArgs, ModeArg, Precision, ReportArgs, SplitArg, TrainArgs,
};

macro_rules! with_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn write_json<S: Serialize>(path: &Path, doc: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).expect("reports serialize");
    fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

fn absolute(path: &Path) -> String {
    fs::canonicalize(path)
        .unwrap_or_else(|_| path.to_path_buf())
        .display()
        .to_string()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    require(path)?;
    let m = DatasetManifest::load(path)?;
    for w in m.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(m)
}

fn check_folds(folds: &[u64], shots: usize) -> Result<()> {
    if folds.is_empty() {
        return Err(Error::Config("at least one fold seed is required".into()));
    }
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    Ok(())
}

/// Frozen pieces shared by every fold.
struct Base<T> {
    manifest: DatasetManifest,
    orig: AttnPoolParams<T>,
    classifier: Classifier<T>,
}

impl<T: Scalar> Base<T> {
    fn load(path: &Path) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let orig = manifest.load_attnpool()?;
        let classifier = Classifier::with_defaults(manifest.load_classifier_weights()?)?;
        Ok(Self {
            manifest,
            orig,
            classifier,
        })
    }
}

pub fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::fixture();
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(seed, classes, pool_per_class, test_per_class, height, width, channels, embed_dim, parts, noise, heads);
    let m = gen_synthetic(&cfg, &a.out)?;
    let zs = m.synthetic.as_ref().map_or(f64::NAN, |s| s.zero_shot_accuracy);
    println!(
        "wrote {} samples to {}; zero-shot test accuracy {:.4}",
        m.samples.len(),
        a.out.display(),
        zs
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field.clone() { cfg.$field = v; })* };
    }
    set!(iterations, batch_size, lr, weight_decay, lr_grid, wd_grid, eval_every, beta);
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs, p: Precision, grid: bool) -> Result<()> {
    with_precision!(p, train_typed(a, p, grid))
}

fn train_typed<T: Scalar>(a: &TrainArgs, p: Precision, grid: bool) -> Result<()> {
    check_folds(&a.data.folds, a.data.shots)?;
    let cfg = train_config(a)?;
    let base = Base::<T>::load(&a.data.manifest)?;
    let n = base.manifest.n_classes();
    let test = base.manifest.load_split::<T>(Split::Test)?;
    let zero_shot = evaluate(&test, &ZeroShot { orig: &base.orig, classifier: &base.classifier }, n)?.accuracy;
    mkdir(&a.out)?;

    let sets = a
        .data
        .folds
        .iter()
        .map(|&seed| sample_k_shot(&base.manifest, a.data.shots, seed))
        .collect::<Result<Vec<_>>>()?;
    let folds = a
        .data
        .folds
        .par_iter()
        .zip(sets)
        .map(|(&seed, set)| {
            let data = FewShotData::<T>::load(&base.manifest, &set)?;
            let fold_cfg = TrainConfig { seed, ..cfg.clone() };
            let (report, cells) = if grid {
                let g = grid_search(&data, &base.orig, &base.classifier, &fold_cfg)?;
                (g.best, Some(g.cells))
            } else {
                (train_safe(&data, &base.orig, &base.classifier, &fold_cfg)?, None)
            };
            let rel = format!("fold-{seed}/checkpoint");
            checkpoint::save(a.out.join(&rel), &report.checkpoint)?;
            let model = Blended {
                orig: &base.orig,
                tuned: &report.checkpoint,
                beta: T::cast(cfg.beta),
                classifier: &base.classifier,
            };
            let test_accuracy = evaluate(&test, &model, n)?.accuracy;
            eprintln!(
                "fold {seed}: best step {} val {:.4} test {:.4}",
                report.best_step, report.best_val_accuracy, test_accuracy
            );
            Ok(FoldReport {
                seed,
                checkpoint: rel,
                test_accuracy,
                training: report.summary(),
                grid: cells,
                fewshot: set,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let doc = RunReport {
        command: if grid { "grid" } else { "train" }.into(),
        manifest: absolute(&a.data.manifest),
        precision: precision_name(p).into(),
        shots: a.data.shots,
        config: cfg,
        zero_shot_accuracy: zero_shot,
        mean_test_accuracy: mean(folds.iter().map(|f| f.test_accuracy)),
        folds,
    };
    write_json(&a.out.join(RUN_FILE), &doc)?;
    println!(
        "zero-shot {:.4}; SAFE mean over {} folds {:.4}",
        doc.zero_shot_accuracy,
        doc.folds.len(),
        doc.mean_test_accuracy
    );
    Ok(())
}

pub fn eval(a: &EvalArgs, p: Precision) -> Result<()> {
    with_precision!(p, eval_typed(a))
}

fn eval_typed<T: Scalar>(a: &EvalArgs) -> Result<()> {
    let base = Base::<T>::load(&a.manifest)?;
    let n = base.manifest.n_classes();
    let (split, split_name) = match a.split {
        SplitArg::Train => (Split::Train, "train"),
        SplitArg::Val => (Split::Val, "val"),
        SplitArg::Test => (Split::Test, "test"),
    };
    let samples = base.manifest.load_split::<T>(split)?;
    let report = match &a.checkpoint {
        Some(dir) => {
            require(dir)?;
            safe_core::BlendConfig { beta: a.beta }.validate()?;
            let tuned = checkpoint::load_dir::<T>(dir)?;
            let model = Blended {
                orig: &base.orig,
                tuned: &tuned,
                beta: T::cast(a.beta),
                classifier: &base.classifier,
            };
            evaluate(&samples, &model, n)?
        }
        None => evaluate(&samples, &ZeroShot { orig: &base.orig, classifier: &base.classifier }, n)?,
    };
    mkdir(&a.out)?;
    report.write_csv(a.out.join("predictions.csv"))?;
    let doc = EvalDoc {
        manifest: absolute(&a.manifest),
        split: split_name.into(),
        mode: if a.checkpoint.is_some() { "blended" } else { "zero-shot" }.into(),
        checkpoint: a.checkpoint.as_deref().map(absolute),
        beta: a.checkpoint.as_ref().map(|_| a.beta),
        accuracy: report.accuracy,
        correct: report.correct,
        total: report.total,
        per_class: report.per_class,
        predictions: "predictions.csv".into(),
    };
    write_json(&a.out.join(EVAL_FILE), &doc)?;
    println!("accuracy {:.4} ({}/{})", doc.accuracy, doc.correct, doc.total);
    Ok(())
}

pub fn cache(a: &CacheArgs, p: Precision) -> Result<()> {
    with_precision!(p, cache_typed(a))
}

/// One fold's inputs for the cache: few-shot set and tuned checkpoint.
struct CacheInput {
    seed: u64,
    set: FewShotSet,
    checkpoint: Option<PathBuf>,
}

fn cache_typed<T: Scalar>(a: &CacheArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Original => CacheMode::Original,
        ModeArg::Blended => CacheMode::Blended,
    };
    let (manifest_path, beta, inputs, out) = match &a.run {
        Some(run) => {
            let doc: RunReport = read_json(&run.join(RUN_FILE))?;
            let inputs = doc
                .folds
                .into_iter()
                .map(|f| CacheInput {
                    seed: f.seed,
                    set: f.fewshot,
                    checkpoint: Some(run.join(f.checkpoint)),
                })
                .collect();
            let out = a.out.clone().unwrap_or_else(|| run.clone());
            (PathBuf::from(doc.manifest), a.beta.unwrap_or(doc.config.beta), inputs, out)
        }
        None => {
            if mode == CacheMode::Blended {
                return Err(Error::Config("blended cache needs --run with fine-tuned checkpoints".into()));
            }
            let (Some(m), Some(out)) = (&a.manifest, &a.out) else {
                return Err(Error::Config("without --run, both --manifest and --out are required".into()));
            };
            check_folds(&a.folds, a.shots)?;
            require(m)?;
            let manifest = DatasetManifest::load(m)?;
            let inputs = a
                .folds
                .iter()
                .map(|&seed| {
                    Ok(CacheInput {
                        seed,
                        set: sample_k_shot(&manifest, a.shots, seed)?,
                        checkpoint: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (m.clone(), a.beta.unwrap_or(0.5), inputs, out.clone())
        }
    };
    if a.alphas.is_empty() || a.gammas.is_empty() {
        return Err(Error::Config("alpha and gamma grids must be nonempty".into()));
    }
    let base = Base::<T>::load(&manifest_path)?;
    let n = base.manifest.n_classes();
    let test = base.manifest.load_split::<T>(Split::Test)?;
    mkdir(&out)?;

    let mut folds = Vec::new();
    for input in inputs {
        let tuned = match &input.checkpoint {
            Some(dir) => checkpoint::load_dir::<T>(dir)?,
            None => base.orig.clone(),
        };
        let data = FewShotData::<T>::load(&base.manifest, &input.set)?;
        let meta = CacheMeta {
            alpha: a.alphas[0],
            gamma: a.gammas[0],
            mode,
            beta,
        };
        let cache = build_cache(&data.train, n, &base.orig, &tuned, meta)?;
        let tuning = tune_cache_hparams(
            &data.val,
            &base.orig,
            &tuned,
            &cache,
            &base.classifier,
            &a.alphas,
            &a.gammas,
        )?;
        let cache = cache.with_hparams(tuning.alpha, tuning.gamma)?;
        let rel = format!("fold-{}/cache", input.seed);
        cache.save(out.join(&rel))?;
        let model = SafeA {
            orig: &base.orig,
            tuned: &tuned,
            cache: &cache,
            classifier: &base.classifier,
        };
        let test_accuracy = evaluate(&test, &model, n)?.accuracy;
        let base_test_accuracy = match mode {
            CacheMode::Original => {
                evaluate(&test, &ZeroShot { orig: &base.orig, classifier: &base.classifier }, n)?.accuracy
            }
            CacheMode::Blended => {
                let m = Blended {
                    orig: &base.orig,
                    tuned: &tuned,
                    beta: T::cast(beta),
                    classifier: &base.classifier,
                };
                evaluate(&test, &m, n)?.accuracy
            }
        };
        eprintln!(
            "fold {}: alpha {} gamma {} val {:.4} test {:.4} (without cache {:.4})",
            input.seed, tuning.alpha, tuning.gamma, tuning.val_accuracy, test_accuracy, base_test_accuracy
        );
        folds.push(CacheFold {
            seed: input.seed,
            alpha: tuning.alpha,
            gamma: tuning.gamma,
            val_accuracy: tuning.val_accuracy,
            test_accuracy,
            base_test_accuracy,
            cache: rel,
            cells: tuning.cells,
        });
    }
    let doc = CacheDoc {
        manifest: absolute(&manifest_path),
        mode,
        beta,
        alphas: a.alphas.clone(),
        gammas: a.gammas.clone(),
        mean_test_accuracy: mean(folds.iter().map(|f| f.test_accuracy)),
        mean_base_test_accuracy: mean(folds.iter().map(|f| f.base_test_accuracy)),
        folds,
    };
    write_json(&out.join(CACHE_FILE), &doc)?;
    println!(
        "with cache {:.4}; without {:.4} (mean over {} folds)",
        doc.mean_test_accuracy,
        doc.mean_base_test_accuracy,
        doc.folds.len()
    );
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("size must look like HxW, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

pub fn correspond(a: &CorrespondArgs, p: Precision) -> Result<()> {
    with_precision!(p, correspond_typed(a))
}

fn correspond_typed<T: Scalar>(a: &CorrespondArgs) -> Result<()> {
    require(&a.source)?;
    require(&a.target)?;
    let src = DenseFeatureMap::from_tensor(read_tensor_as::<T>(&a.source)?, None)?;
    let tgt = DenseFeatureMap::from_tensor(read_tensor_as::<T>(&a.target)?, None)?;
    let (h, w) = match &a.size {
        Some(s) => parse_size(s)?,
        None => (src.height().max(tgt.height()), src.width().max(tgt.width())),
    };
    let src = upsample(&src, h, w)?;
    let tgt = upsample(&tgt, h, w)?;
    let query = PixelPoint { x: a.x, y: a.y };
    let (matched, heat) = match_point(&src, &tgt, query)?;
    mkdir(&a.out)?;
    export_heatmap(&heat, a.out.join("heatmap"))?;
    let doc = CorrespondDoc {
        source: absolute(&a.source),
        target: absolute(&a.target),
        height: h,
        width: w,
        query,
        matched,
        score: heat.at(matched.y, matched.x).widen(),
        heatmap_pgm: "heatmap.pgm".into(),
        heatmap_csv: "heatmap.csv".into(),
    };
    write_json(&a.out.join(CORRESPOND_FILE), &doc)?;
    println!("match x={} y={} score {:.6}", matched.x, matched.y, doc.score);
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let run: RunReport = read_json(&a.run.join(RUN_FILE))?;
    let cache_path = a.run.join(CACHE_FILE);
    let cache: Option<CacheDoc> = cache_path.exists().then(|| read_json(&cache_path)).transpose()?;
    let summary = |it: Vec<(u64, f64)>| Summary {
        mean: mean(it.iter().map(|x| x.1)),
        per_fold: it.into_iter().map(|(seed, accuracy)| FoldAccuracy { seed, accuracy }).collect(),
    };
    let doc = ReportDoc {
        run: absolute(&a.run),
        shots: run.shots,
        zero_shot_accuracy: run.zero_shot_accuracy,
        safe: summary(run.folds.iter().map(|f| (f.seed, f.test_accuracy)).collect()),
        safe_a: cache.map(|c| summary(c.folds.iter().map(|f| (f.seed, f.test_accuracy)).collect())),
    };
    write_json(&a.run.join(REPORT_FILE), &doc)?;

    let pct = |x: f64| format!("{:.2}", 100.0 * x);
    let mut md = format!("| method | {} | mean |\n|---|", doc.safe.per_fold.iter().map(|f| format!("fold {}", f.seed)).collect::<Vec<_>>().join(" | "));
    md.push_str(&"---|".repeat(doc.safe.per_fold.len() + 1));
    md.push('\n');
    let row = |name: &str, s: &Summary| {
        let cells: Vec<String> = s.per_fold.iter().map(|f| pct(f.accuracy)).collect();
        format!("| {name} | {} | {} |\n", cells.join(" | "), pct(s.mean))
    };
    let zs = doc.zero_shot_accuracy;
    md.push_str(&format!(
        "| zero-shot | {} | {} |\n",
        vec![pct(zs); doc.safe.per_fold.len()].join(" | "),
        pct(zs)
    ));
    md.push_str(&row("SAFE", &doc.safe));
    if let Some(s) = &doc.safe_a {
        md.push_str(&row("SAFE-A", s));
    }
    let path = a.run.join("report.md");
    fs::write(&path, &md).map_err(|source| Error::Io { path, source })?;
    print!("{md}");
    Ok(())
}
