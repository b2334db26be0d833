//! Training loop, evaluation and the sweep/ablation drivers.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Kernel;
use crate::autodiff::{softmax_rows_inplace, Tape};
use crate::config::TrainConfig;
use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::gp_head::LaplaceAccumulator;
use crate::metrics::CalibrationReport;
use crate::model::Model;
use crate::module::Module;
use crate::optim::{cosine_lr, Optimizer};
use crate::tensor::Tensor;

/// Rows per forward pass when evaluating large sets.
const EVAL_CHUNK: usize = 1024;

// ChaCha stream ids; data splits use 1..=3 (see `DatasetSpec::generate`).
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 10;
const STREAM_MC: u64 = 11;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub splits: Splits,
}

/// Generates the dataset from `cfg` and trains on its train split.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = cfg.dataset.generate(cfg.seed)?;
    let (model, log) = train_on(cfg, &splits.train)?;
    Ok(TrainOutcome { model, log, splits })
}

/// Minimizes mean cross-entropy on `data`; a GP head gets its Laplace
/// precision fitted on the same data after the last epoch.
pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<(Model, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.x.cols() != cfg.model.in_features {
        return Err(Error::shape("train", data.x.shape(), &[cfg.model.in_features]));
    }
    if let Some(&bad) = data.y.iter().find(|&&y| y >= cfg.model.n_classes) {
        return Err(Error::InvalidInput(format!("label {bad} ≥ n_classes {}", cfg.model.n_classes)));
    }
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let mut model = Model::init_with(model_cfg, &mut rng_for(cfg.seed, STREAM_INIT))?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), cfg.weight_decay)?;
    let mut shuffle = rng_for(cfg.seed, STREAM_SHUFFLE);

    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut hits, mut lr) = (0.0, 0usize, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.subset(idx)?;
            lr = cosine_lr(step, total, cfg.lr, warmup);
            let numerical = |e: Error| match e {
                Error::NonFinite { op } => {
                    Error::Numerical(format!("non-finite value in {op} at epoch {epoch}, batch {b} (step {step})"))
                }
                other => other,
            };
            let mut tape = Tape::new();
            let f = model.forward_on_tape(&mut tape, &batch.x).map_err(numerical)?;
            let loss = tape.softmax_cross_entropy(f.logits, &batch.y).map_err(numerical)?;
            let lv = tape.value(loss).item();
            let logits = tape.value(f.logits);
            hits += (0..idx.len()).filter(|&i| argmax(logits.row(i)) == batch.y[i]).count();
            loss_sum += lv * idx.len() as f64;
            let grads = tape.backward(loss).map_err(numerical)?;
            model.zero_grad();
            model.accumulate_grads(&grads)?;
            opt.step(&mut model, lr);
            step += 1;
        }
        log.push(EpochLog { epoch, lr, train_loss: loss_sum / n as f64, train_acc: hits as f64 / n as f64 });
    }
    model.zero_grad();
    if model.gp().is_some() {
        fit_laplace(&mut model, data)?;
    }
    Ok((model, log))
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

/// Sets the GP head's precision from the training inputs.
pub fn fit_laplace(model: &mut Model, data: &Dataset) -> Result<()> {
    let Some(gp) = model.gp() else {
        return Err(Error::InvalidInput("fit_laplace needs a gp head".into()));
    };
    let mut acc = LaplaceAccumulator::new(gp.features(), gp.ridge)?;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let batch = data.subset(&idx)?;
        let mut tape = Tape::new();
        let f = model.forward_on_tape(&mut tape, &batch.x)?;
        let phi = tape.value(f.phi.expect("gp forward records features"));
        let logits = tape.value(f.logits);
        let mut probs = logits.data().to_vec();
        softmax_rows_inplace(&mut probs, logits.cols());
        acc.add(phi, &Tensor::new(logits.shape().to_vec(), probs)?)?;
    }
    let prec = acc.finish()?;
    model.gp_mut().unwrap().precision = Some(prec);
    Ok(())
}

/// Class probabilities for every row of `x`, evaluated in chunks.
pub fn predict(model: &Model, x: &Tensor, seed: u64) -> Result<Tensor> {
    let samples = if model.gp().is_some() { model.config.gp.mc_samples } else { 0 };
    let mut rng = rng_for(seed, STREAM_MC);
    let (n, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(n * model.config.n_classes);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = Tensor::new(vec![end - start, d], x.data()[start * d..end * d].to_vec())?;
        out.extend_from_slice(model.predict_proba(&chunk, samples, &mut rng)?.data());
    }
    Tensor::new(vec![n, model.config.n_classes], out)
}

pub fn evaluate(model: &Model, test: &Dataset, ood: Option<&Tensor>, bins: usize, seed: u64) -> Result<CalibrationReport> {
    let probs = predict(model, &test.x, seed)?;
    let ood_probs = ood.map(|o| predict(model, o, seed.wrapping_add(1))).transpose()?;
    CalibrationReport::compute(&probs, &test.y, ood_probs.as_ref(), bins)
}

pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub auroc: Option<f64>,
}

/// One LRSA run per α, all with the config's seed and data.
pub fn alpha_sweep(cfg: &TrainConfig, alphas: &[f64]) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha sweep needs at least one value".into()));
    }
    let splits = cfg.dataset.generate(cfg.seed)?;
    alphas
        .iter()
        .map(|&alpha| {
            let mut c = cfg.clone();
            c.model.kernel = Kernel::Lrsa;
            c.model.alpha = alpha;
            let (model, _) = train_on(&c, &splits.train)?;
            let r = evaluate(&model, &splits.test, Some(&splits.ood), c.ece_bins, c.seed)?;
            Ok(SweepRow { alpha, accuracy: r.accuracy, nll: r.nll, ece: r.ece, auroc: r.auroc })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kernel: Kernel,
    pub report: CalibrationReport,
}

/// Identical backbone, data and seed; only the similarity kernel differs.
pub fn ablate_kernels(cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    let splits = cfg.dataset.generate(cfg.seed)?;
    Kernel::ALL
        .iter()
        .map(|&kernel| {
            let mut c = cfg.clone();
            c.model.kernel = kernel;
            let (model, _) = train_on(&c, &splits.train)?;
            let report = evaluate(&model, &splits.test, Some(&splits.ood), c.ece_bins, c.seed)?;
            Ok(AblationRow { kernel, report })
        })
        .collect()
}

/// Writes sweep rows as CSV.
pub fn write_sweep_csv(mut out: impl Write, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "alpha,accuracy,nll,ece,auroc")?;
    for r in rows {
        let auroc = r.auroc.map_or_else(String::new, |v| v.to_string());
        writeln!(out, "{},{},{},{},{}", r.alpha, r.accuracy, r.nll, r.ece, auroc)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::gp_head::GpConfig;
    use crate::model::{HeadKind, ModelConfig};

    pub(crate) fn tiny(head: HeadKind) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                depth: 1,
                d_model: 8,
                heads: 2,
                d_ff: 8,
                n_tokens: 2,
                head_kind: head,
                gp: GpConfig { features: 64, ..GpConfig::default() },
                ..ModelConfig::two_moons()
            },
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 32,
            dataset: DatasetSpec { n_train: 64, n_test: 32, ..DatasetSpec::default() },
            seed: 3,
            ..TrainConfig::two_moons()
        }
    }

    #[test]
    fn first_epoch_loss_is_near_log2() {
        let out = train(&tiny(HeadKind::Dense)).unwrap();
        assert_eq!(out.log.len(), 3);
        assert!(out.log[0].train_loss <= 2f64.ln() + 0.1);
    }

    #[test]
    fn gp_training_keeps_rff_buffers_and_fits_precision() {
        let cfg = tiny(HeadKind::Gp);
        let init = Model::init_with(
            ModelConfig { seed: cfg.seed, ..cfg.model.clone() },
            &mut rng_for(cfg.seed, STREAM_INIT),
        )
        .unwrap();
        let out = train(&cfg).unwrap();
        let (a, b) = (init.gp().unwrap(), out.model.gp().unwrap());
        assert_eq!(a.w, b.w);
        assert_eq!(a.b, b.b);
        assert_ne!(a.beta.data(), b.beta.data());
        assert!(b.precision.is_some());
        let r = evaluate(&out.model, &out.splits.test, Some(&out.splits.ood), 15, 3).unwrap();
        assert!(r.auroc.is_some());
    }

    #[test]
    fn same_seed_same_model() {
        let a = train(&tiny(HeadKind::Dense)).unwrap();
        let b = train(&tiny(HeadKind::Dense)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }
}
