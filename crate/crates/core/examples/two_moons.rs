//! The two-moons run: train the depth-9 LRSA model with its GP head, report
//! calibration and OOD metrics, and write the uncertainty heatmap.
//!
//! `cargo run --release --example two_moons -- [epochs] [out_dir]`
//! (the full 100 epochs take a few minutes on one core)

use std::path::PathBuf;

use lrformer::checkpoint::save_model;
use lrformer::config::TrainConfig;
use lrformer::data::GridSpec;
use lrformer::heatmap::heatmap;
use lrformer::train::{evaluate, train, write_log_csv};

fn main() -> lrformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = TrainConfig::two_moons();
    if let Some(e) = args.next() {
        cfg.epochs = e.parse().map_err(|_| lrformer::Error::InvalidInput(format!("bad epoch count {e:?}")))?;
        cfg.warmup_epochs = cfg.warmup_epochs.min(cfg.epochs);
    }
    let out = PathBuf::from(args.next().unwrap_or_else(|| "two_moons_out".into()));
    std::fs::create_dir_all(&out)?;

    let run = train(&cfg)?;
    for l in run.log.iter().filter(|l| l.epoch % 10 == 0 || l.epoch == 1) {
        println!("epoch {:>3}  lr {:.5}  loss {:.5}  acc {:.4}", l.epoch, l.lr, l.train_loss, l.train_acc);
    }
    let report = evaluate(&run.model, &run.splits.test, Some(&run.splits.ood), cfg.ece_bins, cfg.seed)?;
    print!("{report}");

    let grid = GridSpec { xmin: -3.0, xmax: 4.0, ymin: -3.0, ymax: 3.5, resolution: 100 };
    let map = heatmap(&run.model, &grid, cfg.seed)?;
    map.write_csv(out.join("heatmap.csv"))?;
    map.write_ppm(out.join("heatmap.ppm"))?;
    save_model(&run.model, Some(&cfg), out.join("checkpoint.json"))?;
    write_log_csv(out.join("train_log.csv"), &run.log)?;
    println!("corner entropy {:.4}; outputs in {}", map.corner_entropy(), out.display());
    Ok(())
}
