use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lrformer::checkpoint::{load_model, save_model};
use lrformer::config::{TrainConfig, DEFAULT_ALPHAS};
use lrformer::data::{resolve_eval_data, DatasetSpec, GridSpec};
use lrformer::gradcheck::{run_suite, summarize};
use lrformer::heatmap::heatmap;
use lrformer::lipschitz::{audit, AuditOptions, PROBE_DELTA};
use lrformer::train::{ablate_kernels, alpha_sweep, evaluate, train, write_log_csv, write_sweep_csv};
use lrformer::{Error, Model, Result};

#[derive(Parser)]
#[command(name = "lrformer", version, about = "Train, evaluate and audit small Lipschitz-regularized transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; writes checkpoint.json and train_log.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Accuracy, ECE, NLL and OOD metrics on a dataset spec (.json) or a labelled CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predictive entropy over a grid; writes <out>.csv and <out>.ppm.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// xmin,xmax,ymin,ymax,res
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analytic Lipschitz bounds against finite-difference probes, per layer.
    Audit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of test points forwarded to obtain layer inputs.
        #[arg(long, default_value_t = 32)]
        reference: usize,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = PROBE_DELTA)]
        delta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retrain with the LRSA kernel at each α.
    SweepAlpha {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated; defaults to the config's list, then 1,100,500,1000.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain with each attention kernel, everything else fixed.
    AblateKernels {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every op and the composed model.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        verbose: bool,
    },
}

fn main() -> ExitCode {
    // clap's own usage-error code (2) would collide with "numerical failure".
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let run = train(&cfg)?;
            fs::create_dir_all(&out)?;
            save_model(&run.model, Some(&cfg), out.join("checkpoint.json"))?;
            write_log_csv(out.join("train_log.csv"), &run.log)?;
            if let Some(last) = run.log.last() {
                println!(
                    "epoch {} loss {:.6} acc {:.4} -> {}",
                    last.epoch,
                    last.train_loss,
                    last.train_acc,
                    out.join("checkpoint.json").display()
                );
            }
        }
        Command::Eval { checkpoint, data, out, seed } => {
            let (model, cfg) = load_model(&checkpoint)?;
            let (spec, bins, seed) = run_settings(&model, cfg.as_ref(), seed);
            let (test, ood) = resolve_eval_data(&data, &spec, seed)?;
            let report = evaluate(&model, &test, Some(&ood), bins, seed)?;
            print!("{report}");
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
        Command::Heatmap { checkpoint, grid, out, seed } => {
            let spec: GridSpec = grid.parse()?;
            let (model, cfg) = load_model(&checkpoint)?;
            let (_, _, seed) = run_settings(&model, cfg.as_ref(), seed);
            let h = heatmap(&model, &spec, seed)?;
            h.write_csv(out.with_extension("csv"))?;
            h.write_ppm(out.with_extension("ppm"))?;
            println!("corner entropy {:.6} over {} cells", h.corner_entropy(), h.cells.len());
        }
        Command::Audit { checkpoint, data, reference, probes, delta, out, seed } => {
            if reference == 0 || probes == 0 || !(delta > 0.0) {
                return Err(Error::InvalidInput("reference, probes and delta must be positive".into()));
            }
            let (model, cfg) = load_model(&checkpoint)?;
            let (spec, _, seed) = run_settings(&model, cfg.as_ref(), seed);
            let (test, _) = resolve_eval_data(&data, &spec, seed)?;
            let k = reference.min(test.len());
            let idx: Vec<usize> = (0..k).map(|i| i * test.len() / k).collect();
            let refs = test.subset(&idx)?;
            let report = audit(&model, &refs.x, &AuditOptions { probes, delta, seed })?;
            println!("gelu constant {:.6}; kernel {} alpha {}", report.gelu_const, report.kernel, report.alpha);
            println!("{:>5} {:>12} {:>12} {:>12} {:>8}", "layer", "bound", "empirical", "margin", "status");
            for l in &report.layers {
                let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"));
                let status = if l.violated { "VIOLATED" } else { "ok" };
                println!("{:>5} {:>12} {:>12.4e} {:>12} {:>8}", l.layer, fmt(l.l_layer), l.empirical, fmt(l.margin), status);
            }
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            if report.any_violation() {
                eprintln!("warning: an empirical ratio exceeds its analytic bound");
            }
        }
        Command::SweepAlpha { config, alphas, out } => {
            let cfg = TrainConfig::load(&config)?;
            let alphas = alphas.or_else(|| cfg.alpha_sweep.clone()).unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());
            if alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
                return Err(Error::InvalidInput(format!("alphas must be positive and finite, got {alphas:?}")));
            }
            let rows = alpha_sweep(&cfg, &alphas)?;
            match out {
                Some(path) => write_sweep_csv(fs::File::create(path)?, &rows)?,
                None => write_sweep_csv(std::io::stdout().lock(), &rows)?,
            }
        }
        Command::AblateKernels { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let rows = ablate_kernels(&cfg)?;
            println!("{:>6} {:>9} {:>9} {:>9} {:>9}", "kernel", "accuracy", "nll", "ece", "auroc");
            for r in &rows {
                let auroc = r.report.auroc.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                println!("{:>6} {:>9.4} {:>9.4} {:>9.4} {:>9}", r.kernel, r.report.accuracy, r.report.nll, r.report.ece, auroc);
            }
            if let Some(path) = out {
                write_json(&path, &rows)?;
            }
        }
        Command::Gradcheck { seeds, verbose } => {
            if seeds == 0 {
                return Err(Error::InvalidInput("need at least one seed".into()));
            }
            let all = run_suite(&(0..seeds).collect::<Vec<_>>())?;
            let shown = if verbose { all.clone() } else { summarize(&all) };
            for r in &shown {
                let tag = if r.passed { "ok  " } else { "FAIL" };
                println!("{tag} {:<28} seed {:>2} entries {:>5} max rel err {:.3e} (tol {:.0e})", r.name, r.seed, r.entries, r.max_rel_err, r.tol);
            }
            if all.iter().any(|r| !r.passed) {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Dataset spec, ECE bins and seed for evaluating a checkpoint.
fn run_settings(model: &Model, cfg: Option<&TrainConfig>, seed: Option<u64>) -> (DatasetSpec, usize, u64) {
    match cfg {
        Some(c) => (c.dataset.clone(), c.ece_bins, seed.unwrap_or(c.seed)),
        None => (DatasetSpec::default(), lrformer::metrics::DEFAULT_ECE_BINS, seed.unwrap_or(model.config.seed)),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(value)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}
