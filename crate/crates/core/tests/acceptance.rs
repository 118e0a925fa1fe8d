//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! and fails if the criterion does.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use rayon::prelude::*;
use safe_core::cache::{build_cache, safe_a_logits, tune_cache_hparams, CacheMeta, CacheMode, SafeA, DEFAULT_ALPHAS, DEFAULT_GAMMAS};
use safe_core::correspondence::{match_point, upsample, PixelPoint};
use safe_core::inference::{argmax, evaluate, Blended, Classifier, ZeroShot};
use safe_core::store::synthetic::{gen_synthetic, SyntheticConfig};
use safe_core::store::{decode, encode, sample_k_shot, DatasetManifest, LoadedSample, Split};
use safe_core::trainer::{train_safe, FewShotData, TrainConfig};
use safe_core::{AnyTensor, AttnPoolConfig, AttnPoolParams, Tensor};
use tempfile::TempDir;

const FOLDS: [u64; 3] = [1, 2, 3];
const SHOTS: usize = 4;

fn within(t: Instant, limit: u64) -> (bool, Duration) {
    let e = t.elapsed();
    (e < Duration::from_secs(limit), e)
}

#[test]
fn gradient_correctness() {
    let t = Instant::now();
    let checks: Vec<_> = (0..20u64)
        .flat_map(|s| [(s, true), (s, false)])
        .map(|(s, normalize)| gradcheck(s, normalize, 1e-5))
        .collect();
    let worst = checks.iter().map(|g| g.worst_rel).fold(0.0, f64::max);
    let k_bias = checks.iter().map(|g| g.k_bias_abs).fold(0.0, f64::max);
    let entries: usize = checks.iter().map(|g| g.entries).sum();
    let (fast, e) = within(t, 30);
    let pass = worst <= 1e-4 && k_bias <= 1e-8 && fast;
    line(
        "gradient correctness",
        pass,
        format!("20 seeds x 2 classifier modes, {entries} entries, max rel err {worst:.2e}, |k_bias grad| <= {k_bias:.1e}, {e:.2?}"),
    );
    assert!(pass);
}

#[test]
fn oracle_equivalence() {
    let t = Instant::now();
    let mut rng = rng(2024);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let heads = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let cfg = AttnPoolConfig {
            channels: rng.gen_range(1..=8),
            embed_dim: heads * rng.gen_range(1..=4),
            out_dim: rng.gen_range(1..=6),
            heads,
            scale: rng.gen_bool(0.3).then(|| rng.gen_range(0.5..4.0)),
            include_mean_token: rng.gen_bool(0.5),
            positional: rng.gen_bool(0.5).then_some((h, w)),
        };
        let p = random_layer(&mut rng, &cfg);
        let f = random_map(&mut rng, h, w, cfg.channels);
        let fused = p.forward(&f).unwrap();
        for (a, b) in fused.iter().zip(naive_forward(&p, &f)) {
            worst = worst.max((a - b).abs());
        }
    }
    let (fast, e) = within(t, 10);
    let pass = worst <= 1e-10 && fast;
    line("oracle equivalence", pass, format!("50 combinations, max abs diff {worst:.2e}, {e:.2?}"));
    assert!(pass);
}

#[test]
fn init_argmax_invariance() {
    let mut rng = rng(99);
    let mut agree = 0;
    let total = 1000;
    for i in 0..total {
        let cfg = AttnPoolConfig {
            channels: 8,
            embed_dim: 12,
            out_dim: 6,
            heads: 3,
            scale: None,
            include_mean_token: i % 2 == 0,
            positional: (i % 3 == 0).then_some((3, 3)),
        };
        // a fresh layer every 100 inputs
        let mut layer_rng = common::rng(i as u64 / 100);
        let p = random_layer(&mut layer_rng, &cfg);
        let clf = Classifier::with_defaults(random_tensor(&mut layer_rng, &[5, 6], 1.0)).unwrap();
        let f = random_map(&mut rng, 3, 3, 8);
        let zs = argmax(&ZeroShot { orig: &p, classifier: &clf }.logits_of(&f));
        let bl = argmax(&Blended { orig: &p, tuned: &p, beta: 0.5, classifier: &clf }.logits_of(&f));
        agree += usize::from(zs == bl);
    }
    let pass = agree == total;
    line("init argmax invariance", pass, format!("{agree}/{total} predictions agree"));
    assert!(pass);
}

trait LogitsOf {
    fn logits_of(&self, f: &safe_core::DenseFeatureMap<f64>) -> Vec<f64>;
}

impl<M: safe_core::inference::LogitModel<f64>> LogitsOf for M {
    fn logits_of(&self, f: &safe_core::DenseFeatureMap<f64>) -> Vec<f64> {
        self.logits(f).unwrap()
    }
}

struct Fold {
    data: FewShotData<f32>,
    tuned: AttnPoolParams<f32>,
    safe_acc: f64,
    mass_up: usize,
}

struct Fixture {
    _dir: TempDir,
    manifest: DatasetManifest,
    orig: AttnPoolParams<f32>,
    classifier: Classifier<f32>,
    test: Vec<LoadedSample<f32>>,
    zero_shot: f64,
    folds: Vec<Fold>,
    elapsed: Duration,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let started = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_synthetic(&SyntheticConfig::fixture(), dir.path()).unwrap();
        let all: Vec<usize> = (0..manifest.samples.len()).collect();
        let samples = manifest.load_samples::<f32>(&all).unwrap();
        let test = manifest.load_split::<f32>(Split::Test).unwrap();
        let orig = manifest.load_attnpool::<f32>().unwrap();
        let classifier = Classifier::with_defaults(manifest.load_classifier_weights().unwrap()).unwrap();
        let n = manifest.n_classes();
        let zero_shot = evaluate(&test, &ZeroShot { orig: &orig, classifier: &classifier }, n)
            .unwrap()
            .accuracy;
        let folds = FOLDS
            .par_iter()
            .map(|&seed| {
                let set = sample_k_shot(&manifest, SHOTS, seed).unwrap();
                let data = FewShotData::from_set(&samples, &set, n).unwrap();
                let cfg = TrainConfig { seed, ..TrainConfig::default() };
                let tuned = train_safe(&data, &orig, &classifier, &cfg).unwrap().checkpoint;
                let model = Blended { orig: &orig, tuned: &tuned, beta: 0.5, classifier: &classifier };
                let safe_acc = evaluate(&test, &model, n).unwrap().accuracy;
                let mass_up = test
                    .iter()
                    .filter(|s| {
                        let before = orig.attention_mass(&s.features, &s.planted_cells).unwrap();
                        let after = tuned.attention_mass(&s.features, &s.planted_cells).unwrap();
                        after > before
                    })
                    .count();
                Fold { data, tuned, safe_acc, mass_up }
            })
            .collect();
        Fixture {
            _dir: dir,
            manifest,
            orig,
            classifier,
            test,
            zero_shot,
            folds,
            elapsed: started.elapsed(),
        }
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn synthetic_safe_gain() {
    let fx = fixture();
    let pinned = fx.manifest.synthetic.as_ref().unwrap().zero_shot_accuracy;
    let safe = mean(fx.folds.iter().map(|f| f.safe_acc));
    let gain = safe - fx.zero_shot;
    let n_test = fx.test.len();
    let mass_ok = fx.folds.iter().all(|f| f.mass_up * 10 >= n_test * 9);
    let fast = fx.elapsed < Duration::from_secs(120);
    let pass = gain >= 0.15 && mass_ok && fast && pinned == fx.zero_shot;
    let per_fold: Vec<String> = fx.folds.iter().map(|f| format!("{:.1}%", 100.0 * f.safe_acc)).collect();
    let mass: Vec<String> = fx.folds.iter().map(|f| format!("{}/{n_test}", f.mass_up)).collect();
    line(
        "synthetic SAFE gain",
        pass,
        format!(
            "zero-shot {:.1}%, SAFE folds [{}] mean {:.1}%, gain {:+.1} pt, attention mass up [{}], {:.2?}",
            100.0 * fx.zero_shot,
            per_fold.join(", "),
            100.0 * safe,
            100.0 * gain,
            mass.join(", "),
            fx.elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn safe_a_consistency() {
    let fx = fixture();
    let t = Instant::now();
    let n = fx.manifest.n_classes();
    let mut bit_identical = true;
    let mut safe_a = Vec::new();
    for fold in &fx.folds {
        let meta = CacheMeta { alpha: 0.0, gamma: 1.0, mode: CacheMode::Blended, beta: 0.5 };
        let cache = build_cache(&fold.data.train, n, &fx.orig, &fold.tuned, meta).unwrap();
        let safe = Blended { orig: &fx.orig, tuned: &fold.tuned, beta: 0.5, classifier: &fx.classifier };
        for s in &fx.test {
            let a = safe_a_logits(&s.features, &fx.orig, &fold.tuned, &cache, &fx.classifier).unwrap();
            let b = safe_core::inference::LogitModel::logits(&safe, &s.features).unwrap();
            bit_identical &= a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits()));
        }
        let tuning = tune_cache_hparams(
            &fold.data.val,
            &fx.orig,
            &fold.tuned,
            &cache,
            &fx.classifier,
            &DEFAULT_ALPHAS,
            &DEFAULT_GAMMAS,
        )
        .unwrap();
        let tuned_cache = cache.with_hparams(tuning.alpha, tuning.gamma).unwrap();
        let model = SafeA { orig: &fx.orig, tuned: &fold.tuned, cache: &tuned_cache, classifier: &fx.classifier };
        safe_a.push((evaluate(&fx.test, &model, n).unwrap().accuracy, tuning.alpha, tuning.gamma));
    }
    let safe_mean = mean(fx.folds.iter().map(|f| f.safe_acc));
    let safe_a_mean = mean(safe_a.iter().map(|r| r.0));
    // fixture training counts toward this criterion too
    let waited = fx.elapsed + t.elapsed();
    let fast = waited < Duration::from_secs(120);
    let pass = bit_identical && safe_a_mean >= safe_mean - 0.005 && fast;
    let folds: Vec<String> = safe_a
        .iter()
        .map(|(a, al, g)| format!("{:.1}% (a={al}, g={g})", 100.0 * a))
        .collect();
    line(
        "SAFE-A consistency",
        pass,
        format!(
            "alpha=0 bit-identical: {bit_identical}; SAFE-A folds [{}] mean {:.1}% vs SAFE {:.1}%, {waited:.2?}",
            folds.join(", "),
            100.0 * safe_a_mean,
            100.0 * safe_mean
        ),
    );
    assert!(pass);
}

/// Not a criterion of its own: the smaller α/γ grid must hold up too.
#[test]
fn safe_a_small_grid() {
    let fx = fixture();
    let n = fx.manifest.n_classes();
    let accs: Vec<f64> = fx
        .folds
        .iter()
        .map(|fold| {
            let meta = CacheMeta { alpha: 0.0, gamma: 1.0, mode: CacheMode::Blended, beta: 0.5 };
            let cache = build_cache(&fold.data.train, n, &fx.orig, &fold.tuned, meta).unwrap();
            let tuning =
                tune_cache_hparams(&fold.data.val, &fx.orig, &fold.tuned, &cache, &fx.classifier, &[0.5, 1.0, 2.0], &[1.0, 5.0])
                    .unwrap();
            let cache = cache.with_hparams(tuning.alpha, tuning.gamma).unwrap();
            let model = SafeA { orig: &fx.orig, tuned: &fold.tuned, cache: &cache, classifier: &fx.classifier };
            evaluate(&fx.test, &model, n).unwrap().accuracy
        })
        .collect();
    let safe_mean = mean(fx.folds.iter().map(|f| f.safe_acc));
    assert!(mean(accs.iter().copied()) >= safe_mean - 0.005, "{accs:?} vs SAFE {safe_mean}");
}

#[test]
fn correspondence() {
    let t = Instant::now();
    let mut rng = rng(5);
    let mut self_hits = 0;
    for _ in 0..500 {
        let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
        let f = random_map(&mut rng, h, w, 16);
        let f = upsample(&f, h + rng.gen_range(0..=8), w + rng.gen_range(0..=8)).unwrap();
        let p = PixelPoint { x: rng.gen_range(0..f.width()), y: rng.gen_range(0..f.height()) };
        let (hit, _) = match_point(&f, &f, p).unwrap();
        self_hits += usize::from(hit == p);
    }
    let mut oracle_hits = 0;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
        let s = random_map(&mut rng, h, w, 8);
        let (th, tw) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
        let tgt = random_map(&mut rng, th, tw, 8);
        let p = PixelPoint { x: rng.gen_range(0..w), y: rng.gen_range(0..h) };
        let (hit, heat) = match_point(&s, &tgt, p).unwrap();
        let q = s.at_point(p.x, p.y);
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best = (f64::NEG_INFINITY, PixelPoint { x: 0, y: 0 });
        let mut same_heat = true;
        for y in 0..tgt.height() {
            for x in 0..tgt.width() {
                let v = tgt.at_point(x, y);
                let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                let c = q.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (qn * vn);
                same_heat &= (heat.at(y, x) - c).abs() <= 1e-12;
                if c > best.0 {
                    best = (c, PixelPoint { x, y });
                }
            }
        }
        oracle_hits += usize::from(hit == best.1 && same_heat);
    }
    let (fast, e) = within(t, 10);
    let pass = self_hits == 500 && oracle_hits == 100 && fast;
    line(
        "correspondence",
        pass,
        format!("self-match {self_hits}/500, brute-force agreement {oracle_hits}/100, {e:.2?}"),
    );
    assert!(pass);
}

#[test]
fn persistence() {
    let mut rng = rng(11);
    let mut exact = 0;
    let trials = 300;
    for _ in 0..trials {
        let rank = rng.gen_range(1..=5);
        let dims: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=5)).collect();
        let len: usize = dims.iter().product();
        let any: AnyTensor = if rng.gen_bool(0.5) {
            Tensor::new(dims, (0..len).map(|_| f32::from_bits(rng.gen())).collect()).unwrap().into()
        } else {
            Tensor::new(dims, (0..len).map(|_| f64::from_bits(rng.gen())).collect()).unwrap().into()
        };
        let bytes = match &any {
            AnyTensor::F32(t) => encode(t),
            AnyTensor::F64(t) => encode(t),
        };
        let back = decode(&bytes).unwrap();
        let again = match &back {
            AnyTensor::F32(t) => encode(t),
            AnyTensor::F64(t) => encode(t),
        };
        exact += usize::from(back.dtype() == any.dtype() && back.dims() == any.dims() && again == bytes);
    }

    // two independently generated copies of the fixture
    let cfg = SyntheticConfig::fixture();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = gen_synthetic(&cfg, a.path()).unwrap();
    let mb = gen_synthetic(&cfg, b.path()).unwrap();
    let runs_agree = FOLDS
        .iter()
        .all(|&s| sample_k_shot(&ma, SHOTS, s).unwrap() == sample_k_shot(&mb, SHOTS, s).unwrap());
    // pinned from a separate transcription of the sampling algorithm
    let pinned: [(u64, [usize; 4], [usize; 4], [usize; 4], [usize; 4]); 3] = [
        (1, [10, 19, 4, 5], [15, 11, 8, 0], [194, 197, 190, 193], [188, 185, 192, 196]),
        (2, [10, 1, 4, 11], [5, 14, 17, 15], [196, 193, 181, 189], [188, 192, 191, 186]),
        (3, [18, 3, 15, 4], [9, 5, 2, 10], [190, 183, 197, 191], [180, 195, 189, 194]),
    ];
    let matches_pin = pinned.iter().all(|(seed, t0, v0, t9, v9)| {
        let s = sample_k_shot(&ma, SHOTS, *seed).unwrap();
        s.train[0] == t0 && s.val[0] == v0 && s.train[9] == t9 && s.val[9] == v9
    });
    let pass = exact == trials && runs_agree && matches_pin;
    line(
        "persistence",
        pass,
        format!("tensor round-trips bit-exact {exact}/{trials}; k-shot runs agree: {runs_agree}; pinned selections match: {matches_pin}"),
    );
    assert!(pass);
}
