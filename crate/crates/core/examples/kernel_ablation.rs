//! Same backbone, data and seed with each attention kernel, then an α sweep
//! of the LRSA kernel, on noisy two-moons.
//!
//! `cargo run --release --example kernel_ablation`

use lrformer::config::{TrainConfig, DEFAULT_ALPHAS};
use lrformer::data::DatasetSpec;
use lrformer::gp_head::GpConfig;
use lrformer::model::ModelConfig;
use lrformer::train::{ablate_kernels, alpha_sweep, write_sweep_csv};

fn main() -> lrformer::Result<()> {
    let cfg = TrainConfig {
        model: ModelConfig {
            depth: 2,
            d_model: 16,
            heads: 4,
            d_ff: 32,
            gp: GpConfig { features: 256, ..GpConfig::default() },
            ..ModelConfig::two_moons()
        },
        epochs: 30,
        warmup_epochs: 2,
        dataset: DatasetSpec { n_train: 1000, noise: 0.3, ..DatasetSpec::default() },
        ..TrainConfig::two_moons()
    };

    println!("kernel  accuracy     nll     ece   auroc");
    for row in ablate_kernels(&cfg)? {
        let r = &row.report;
        println!("{:>6}  {:>8.4}  {:>6.4}  {:>6.4}  {:>6.4}", row.kernel, r.accuracy, r.nll, r.ece, r.auroc.unwrap_or(f64::NAN));
    }

    println!();
    let rows = alpha_sweep(&cfg, &DEFAULT_ALPHAS)?;
    write_sweep_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}
