use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lrformer::attention::{attention_probs, pairwise_sq_dist, AttentionParams, Kernel};
use lrformer::data::{grid, GridSpec};
use lrformer::lipschitz::sigma;
use lrformer::metrics::{auroc, auroc_trapezoid, predictive_entropy};
use lrformer::optim::cosine_lr;
use lrformer::{Tape, Tensor};

fn tensor(shape: &[usize], seed: u64, std: f64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.01f64..50.0) {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[rows, cols], seed, scale), false).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        let v = tape.value(p);
        for i in 0..rows {
            let r = v.row(i);
            prop_assert!(r.iter().all(|&q| (0.0..=1.0).contains(&q)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let a = tensor(&[m, k], seed, 1.0);
        let b = tensor(&[k, l], seed.wrapping_add(1), 1.0);
        let c = tensor(&[l, n], seed.wrapping_add(2), 1.0);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn pairwise_distances_are_nonnegative_and_symmetric(n in 1usize..8, d in 1usize..6, seed in any::<u64>()) {
        let q = tensor(&[n, d], seed, 3.0);
        let dist = pairwise_sq_dist(&q, &q).unwrap();
        for i in 0..n {
            prop_assert!(dist.get(i, i).abs() < 1e-9);
            for j in 0..n {
                prop_assert!(dist.get(i, j) >= 0.0);
                prop_assert!((dist.get(i, j) - dist.get(j, i)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_weights_are_row_stochastic(n in 1usize..7, seed in any::<u64>(), k in 0usize..3, alpha in 0.1f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::init(8, 2, Kernel::ALL[k], alpha, 0.5, &mut rng).unwrap();
        let x = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let probs = attention_probs(&x, &p).unwrap();
        for row in probs.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_is_bounded(rows in 1usize..8, k in 2usize..6, seed in any::<u64>()) {
        let raw = tensor(&[rows, k], seed, 2.0).map(f64::exp);
        let data: Vec<f64> = raw.data().chunks(k).flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s)
        }).collect();
        let probs = Tensor::new(vec![rows, k], data).unwrap();
        for h in predictive_entropy(&probs).unwrap() {
            prop_assert!(h >= 0.0 && h <= (k as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_shape(total in 2usize..500, warmup_frac in 0.0f64..0.5, base in 1e-4f64..1.0) {
        let warmup = (total as f64 * warmup_frac) as usize;
        let mut prev = f64::INFINITY;
        for s in warmup..=total {
            let lr = cosine_lr(s, total, base, warmup);
            prop_assert!(lr <= prev + 1e-15 && lr >= -1e-15);
            prev = lr;
        }
        if warmup > 0 {
            // continuity at the warmup boundary
            let before = cosine_lr(warmup - 1, total, base, warmup);
            prop_assert!((cosine_lr(warmup, total, base, warmup) - before) <= base / warmup as f64 + 1e-12);
        }
        prop_assert!(cosine_lr(total, total, base, warmup).abs() < 1e-12);
    }

    #[test]
    fn grid_has_resolution_squared_points(res in 1usize..40) {
        let spec = GridSpec { xmin: -1.0, xmax: 2.0, ymin: 0.0, ymax: 1.0, resolution: res };
        prop_assert_eq!(grid(&spec).unwrap().rows(), res * res);
    }
}

#[test]
fn auroc_rank_form_equals_trapezoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        use rand::Rng;
        let n = rng.random_range(2..80);
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        pos[0] = true;
        pos[1] = false;
        let levels = rng.random_range(2..20) as f64;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0f64) * levels).round()).collect();
        let a = auroc(&scores, &pos).unwrap();
        let b = auroc_trapezoid(&scores, &pos).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn spectral_norm_matches_svd() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let (r, c) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let w = Tensor::randn(&[r, c], 1.0, &mut rng);
        let svd = DMatrix::from_row_slice(r, c, w.data()).singular_values();
        let top = svd.iter().cloned().fold(0.0, f64::max);
        let ours = sigma(&w).unwrap();
        assert!((ours - top).abs() <= 1e-6 * top, "{ours} vs {top} for {r}x{c}");
    }
}
