//! Analytic Lipschitz bounds of one layer against finite-difference probes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lrformer::attention::Kernel;
use lrformer::blocks::{lrformer_layer, LayerParams};
use lrformer::lipschitz::{attention_probs_probe, empirical_lipschitz, gelu_lipschitz, layer_bound, Norm, PROBE_DELTA};
use lrformer::{Result, Tensor};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (6, 16);
    let layer = LayerParams::init(d, 4, 32, Kernel::Lrsa, 100.0, 0.3, &mut rng)?;
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);

    let b = layer_bound(&layer, &x)?;
    println!("GeLU constant     {:.6}", gelu_lipschitz()?);
    println!("eta1, eta2        {:.3}, {:.3}", b.eta1, b.eta2);
    println!("sigma(W1), (W2)   {:.4}, {:.4}", b.sigma_w1, b.sigma_w2);
    println!("L_MLP             {:.4}", b.l_mlp);
    println!("L_LRSA            {:.4}", b.l_lrsa);
    println!("layer bound       {:.4e}", b.l_layer);

    let probes = 500;
    let attn = attention_probs_probe(&layer.attn, &x, probes, PROBE_DELTA, &mut rng)?;
    let whole = empirical_lipschitz(|v| lrformer_layer(v, &layer), |_| x.clone(), probes, PROBE_DELTA, Norm::Inf, &mut rng)?;
    println!("\nattention weights: probe {attn:.4e} <= bound {:.4e}: {}", b.l_lrsa, attn <= b.l_lrsa);
    println!("whole layer:       probe {whole:.4e} <= bound {:.4e}: {}", b.l_layer, whole <= b.l_layer);
    Ok(())
}
