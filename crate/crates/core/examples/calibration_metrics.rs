//! Calibration and OOD-detection metrics on a synthetic, deliberately
//! overconfident classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lrformer::metrics::{auroc, auroc_trapezoid, predictive_entropy, CalibrationReport, DEFAULT_ECE_BINS};
use lrformer::{Result, Tensor};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1000;
    // Always 95% confident, right 80% of the time.
    let mut probs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..2usize);
        let pred = if rng.random_bool(0.8) { y } else { 1 - y };
        probs.extend(if pred == 0 { [0.95, 0.05] } else { [0.05, 0.95] });
        labels.push(y);
    }
    let probs = Tensor::new(vec![n, 2], probs)?;
    // OOD inputs get flatter predictions.
    let ood: Vec<f64> = (0..300).flat_map(|_| {
        let p = rng.random_range(0.5..0.8);
        [p, 1.0 - p]
    }).collect();
    let ood = Tensor::new(vec![300, 2], ood)?;

    let report = CalibrationReport::compute(&probs, &labels, Some(&ood), DEFAULT_ECE_BINS)?;
    print!("{report}");

    let mut scores = predictive_entropy(&probs)?;
    scores.extend(predictive_entropy(&ood)?);
    let is_ood: Vec<bool> = (0..scores.len()).map(|i| i >= n).collect();
    println!("AUROC rank form {:.6}, trapezoid {:.6}", auroc(&scores, &is_ood)?, auroc_trapezoid(&scores, &is_ood)?);
    Ok(())
}
