#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_core::inference::Classifier;
use safe_core::store::LoadedSample;
use safe_core::trainer::batch_loss_and_grads;
use safe_core::{AttnPoolConfig, AttnPoolParams, DenseFeatureMap, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> DenseFeatureMap<f64> {
    let v = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    DenseFeatureMap::new(h, w, Tensor::new(vec![h * w, c], v).unwrap()).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], spread: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-spread..spread)).collect()).unwrap()
}

/// Layer with every tensor random, biases included.
pub fn random_layer(rng: &mut ChaCha8Rng, cfg: &AttnPoolConfig) -> AttnPoolParams<f64> {
    let mut p = AttnPoolParams::random(cfg, rng).unwrap();
    for (_, t) in p.tensors.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    p
}

/// Attention pooling written out with explicit per-token keys and values
/// and separate loops per head.
pub fn naive_forward(p: &AttnPoolParams<f64>, f: &DenseFeatureMap<f64>) -> Vec<f64> {
    let t = &p.tensors;
    let (c, e) = (p.channels(), p.embed_dim());
    let heads = p.heads();
    let dh = e / heads;
    let hw = f.locations();

    let mut mean = vec![0.0; c];
    for j in 0..hw {
        for k in 0..c {
            mean[k] += f.at(j)[k] / hw as f64;
        }
    }
    let pos = |r: usize, k: usize| t.pos_embed.as_ref().map_or(0.0, |pe| pe.at(r, k));
    let query_src: Vec<f64> = (0..c).map(|k| mean[k] + pos(0, k)).collect();
    let mut tokens: Vec<Vec<f64>> = Vec::new();
    if p.include_mean_token() {
        tokens.push(query_src.clone());
    }
    for j in 0..hw {
        tokens.push((0..c).map(|k| f.at(j)[k] + pos(j + 1, k)).collect());
    }
    let project = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        (0..w.cols())
            .map(|o| b.as_slice()[o] + (0..x.len()).map(|i| x[i] * w.at(i, o)).sum::<f64>())
            .collect()
    };
    let q = project(&query_src, &t.q_weight, &t.q_bias);
    let keys: Vec<Vec<f64>> = tokens.iter().map(|x| project(x, &t.k_weight, &t.k_bias)).collect();
    let values: Vec<Vec<f64>> = tokens.iter().map(|x| project(x, &t.v_weight, &t.v_bias)).collect();
    let scale = p.scale();

    let mut concat = vec![0.0; e];
    for h in 0..heads {
        let lo = h * dh;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| (lo..lo + dh).map(|i| q[i] * k[i]).sum::<f64>() / scale)
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        for (j, v) in values.iter().enumerate() {
            for i in lo..lo + dh {
                concat[i] += ex[j] / z * v[i];
            }
        }
    }
    project(&concat, &t.c_weight, &t.c_bias)
}

pub fn gradcheck_config(rng: &mut ChaCha8Rng) -> AttnPoolConfig {
    let heads = rng.gen_range(1..=3);
    AttnPoolConfig {
        channels: rng.gen_range(3..=6),
        embed_dim: heads * rng.gen_range(1..=3),
        out_dim: rng.gen_range(3..=5),
        heads,
        scale: None,
        include_mean_token: rng.gen_bool(0.5),
        positional: Some((2, 3)),
    }
}

pub struct GradCheck {
    /// Worst `|a − n| / max(|a|, |n|, 1e-6)` outside `k_bias`.
    pub worst_rel: f64,
    /// `k_bias` shifts every score of a head equally, so its true gradient
    /// is zero; this is the largest magnitude seen on either side.
    pub k_bias_abs: f64,
    pub entries: usize,
}

/// Compares the analytic gradient of the mean cross-entropy over a small
/// random batch (pooling layer, then classifier) with central differences
/// of step `eps`, entry by entry.
pub fn gradcheck(seed: u64, normalize: bool, eps: f64) -> GradCheck {
    let mut rng = rng(seed);
    let cfg = gradcheck_config(&mut rng);
    let p = random_layer(&mut rng, &cfg);
    let n_classes = 4;
    let w = random_tensor(&mut rng, &[n_classes, cfg.out_dim], 1.0);
    let logit_scale = if normalize { 100.0 } else { 1.0 };
    let clf = Classifier::new(w, logit_scale, normalize).unwrap();
    let batch: Vec<LoadedSample<f64>> = (0..3)
        .map(|i| LoadedSample {
            index: i,
            path: String::new(),
            label: rng.gen_range(0..n_classes),
            features: random_map(&mut rng, 2, 3, cfg.channels),
            planted_cells: vec![],
        })
        .collect();
    let refs: Vec<&LoadedSample<f64>> = batch.iter().collect();
    let (_, grads) = batch_loss_and_grads(&p, &clf, &refs).unwrap();
    let loss_at = |q: &AttnPoolParams<f64>| batch_loss_and_grads(q, &clf, &refs).unwrap().0;

    let names: Vec<&str> = grads.tensors().iter().map(|(n, _)| *n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.as_slice().to_vec()).collect();
    let mut out = GradCheck { worst_rel: 0.0, k_bias_abs: 0.0, entries: 0 };
    let mut probe = p.clone();
    for (ti, a) in analytic.iter().enumerate() {
        for i in 0..a.len() {
            let base = probe.tensors.tensors()[ti].1.as_slice()[i];
            probe.tensors.tensors_mut()[ti].1.as_mut_slice()[i] = base + eps;
            let up = loss_at(&probe);
            probe.tensors.tensors_mut()[ti].1.as_mut_slice()[i] = base - eps;
            let down = loss_at(&probe);
            probe.tensors.tensors_mut()[ti].1.as_mut_slice()[i] = base;
            let numeric = (up - down) / (2.0 * eps);
            out.entries += 1;
            let err = (a[i] - numeric).abs() / a[i].abs().max(numeric.abs()).max(1e-6);
            if names[ti] == "k_bias" {
                out.k_bias_abs = out.k_bias_abs.max(a[i].abs().max(numeric.abs()));
            } else {
                out.worst_rel = out.worst_rel.max(err);
            }
        }
    }
    out
}

/// Written to the stderr handle directly so the line survives test-output
/// capture and shows up in a plain `cargo test` run.
pub fn line(name: &str, pass: bool, detail: impl std::fmt::Display) {
    use std::io::Write;
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "[{tag}] {name}: {detail}");
}
