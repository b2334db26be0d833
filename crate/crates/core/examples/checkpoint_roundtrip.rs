//! Save a trained model, load it back and confirm predictions are
//! bit-identical.

use lrformer::checkpoint::{load_model, save_model};
use lrformer::config::TrainConfig;
use lrformer::data::DatasetSpec;
use lrformer::model::ModelConfig;
use lrformer::train::{predict, train};

fn main() -> lrformer::Result<()> {
    let cfg = TrainConfig {
        model: ModelConfig { depth: 1, d_model: 8, heads: 2, d_ff: 16, ..ModelConfig::two_moons() },
        epochs: 5,
        warmup_epochs: 1,
        dataset: DatasetSpec { n_train: 400, n_test: 100, ..DatasetSpec::default() },
        ..TrainConfig::two_moons()
    };
    let run = train(&cfg)?;
    let dir = std::env::temp_dir().join("lrformer_checkpoint_demo");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("checkpoint.json");
    save_model(&run.model, Some(&cfg), &path)?;

    let (loaded, stored_cfg) = load_model(&path)?;
    let a = predict(&run.model, &run.splits.test.x, cfg.seed)?;
    let b = predict(&loaded, &run.splits.test.x, cfg.seed)?;
    let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("checkpoint {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());
    println!("config restored: {}", stored_cfg.as_ref() == Some(&cfg));
    println!("predictions bit-identical: {same}");
    Ok(())
}
