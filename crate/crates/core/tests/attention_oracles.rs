mod common;

use common::*;
use rand::Rng;
use safe_core::AttnPoolConfig;

#[test]
fn gradients_match_central_differences() {
    for seed in 0..20 {
        for normalize in [true, false] {
            let g = gradcheck(seed, normalize, 1e-5);
            assert!(g.worst_rel <= 1e-4, "seed {seed} normalize {normalize}: {}", g.worst_rel);
            assert!(g.k_bias_abs <= 1e-8, "seed {seed}: k_bias {}", g.k_bias_abs);
        }
    }
}

#[test]
fn fused_forward_matches_naive_reference() {
    let mut rng = rng(77);
    for _ in 0..50 {
        let heads = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let cfg = AttnPoolConfig {
            channels: rng.gen_range(1..=7),
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
        let naive = naive_forward(&p, &f);
        for (a, b) in fused.iter().zip(&naive) {
            assert!((a - b).abs() <= 1e-10, "{cfg:?}: {a} vs {b}");
        }
    }
}
