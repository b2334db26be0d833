//! The random-Fourier-feature GP head: kernel approximation, Laplace
//! precision and the resulting input-dependent predictive uncertainty.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lrformer::gp_head::{gp_predict, laplace_fit, rff_features, GpConfig, RffHeadParams};
use lrformer::metrics::predictive_entropy;
use lrformer::{Result, Tensor};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = GpConfig { features: 2048, length_scale: 1.0, ..GpConfig::default() };
    let mut head = RffHeadParams::init(2, 2, &cfg, &mut rng)?;

    // Φ(x)·Φ(x') against exp(−‖x−x'‖²/2ℓ²)
    let pair = Tensor::from_rows(&[&[0.0, 0.0], &[0.8, -0.3]])?;
    let phi = rff_features(&pair, &head)?;
    let approx: f64 = phi.row(0).iter().zip(phi.row(1)).map(|(a, b)| a * b).sum();
    println!("RFF kernel {approx:.4} vs RBF {:.4}", (-0.73f64 / 2.0).exp());

    // A hand-set β separating x < 0 from x > 0, then the Laplace fit on data
    // clustered near the origin.
    let train = Tensor::randn(&[200, 2], 0.5, &mut rng);
    let target: Vec<f64> = train.data().chunks(2).flat_map(|p| if p[0] < 0.0 { [2.0, -2.0] } else { [-2.0, 2.0] }).collect();
    let phi = rff_features(&train, &head)?;
    let y = Tensor::new(vec![200, 2], target)?;
    // a scaled correlation Φᵀy is enough for a demo
    head.beta = phi.transpose()?.matmul(&y)?.scale(0.05);
    // n_samples = 0: plain softmax of the mean logits
    let probs = gp_predict(&train, &head, 0, &mut rng)?;
    head.precision = Some(laplace_fit(&phi, &probs, cfg.ridge)?);

    let queries = Tensor::from_rows(&[&[-0.5, 0.0], &[0.5, 0.0], &[6.0, 6.0]])?;
    let pred = gp_predict(&queries, &head, cfg.mc_samples, &mut rng)?;
    let ent = predictive_entropy(&pred)?;
    for (i, h) in ent.iter().enumerate() {
        println!("query {:?}: p = {:?}, entropy {h:.4}", queries.row(i), pred.row(i));
    }
    Ok(())
}
