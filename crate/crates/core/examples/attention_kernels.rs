//! The three similarity kernels side by side on one random sequence, and
//! how α sharpens LRSA attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lrformer::attention::{attention_probs, scores, AttentionParams, Kernel};
use lrformer::lipschitz::lrsa_bound;
use lrformer::{Result, Tensor};

fn row_entropy(p: &Tensor, n: usize) -> f64 {
    // mean entropy over the rows of head 0
    (0..n)
        .map(|i| -p.data()[i * n..(i + 1) * n].iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d, heads) = (5, 8, 2);
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);
    let base = AttentionParams::init(d, heads, Kernel::Lrsa, 100.0, 0.5, &mut rng)?;

    for kernel in Kernel::ALL {
        let p = AttentionParams { kernel, ..base.clone() };
        let s = scores(&x, &p, 0)?;
        println!("{kernel:>4}: first score row {:?}", &s.row(0).iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    }

    println!("\n alpha   mean row entropy   L_LRSA bound");
    for alpha in [1.0, 10.0, 100.0, 1000.0] {
        let p = AttentionParams { alpha, ..base.clone() };
        let probs = attention_probs(&x, &p)?;
        println!("{alpha:>6}   {:>16.4}   {:>12.4}", row_entropy(&probs, n), lrsa_bound(&p, &x)?);
    }
    Ok(())
}
