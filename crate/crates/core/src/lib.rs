//! Lipschitz-regularized transformers at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff tape, three attention
//! kernels (dot-product, L2 and the Lipschitz-regularized LRSA kernel), a
//! post-norm transformer layer, a random-Fourier-feature GP output head,
//! analytic Lipschitz bounds with finite-difference audits, and the usual
//! calibration / OOD metrics. Everything runs in `f64` on one thread.
//!
//! ```no_run
//! use lrformer::config::TrainConfig;
//! use lrformer::train::{evaluate, train};
//!
//! let cfg = TrainConfig::two_moons();
//! let run = train(&cfg)?;
//! let report = evaluate(&run.model, &run.splits.test, Some(&run.splits.ood), cfg.ece_bins, cfg.seed)?;
//! println!("{report}");
//! # Ok::<(), lrformer::Error>(())
//! ```

pub mod attention;
pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gp_head;
pub mod gradcheck;
pub mod heatmap;
pub mod lipschitz;
pub mod metrics;
pub mod model;
pub mod module;
pub mod optim;
pub mod special;
pub mod tensor;
pub mod train;

pub use attention::{AttentionParams, Kernel};
pub use autodiff::{Gradients, Tape, Var};
pub use config::TrainConfig;
pub use error::{Error, Result};
pub use model::{HeadKind, Model, ModelConfig};
pub use module::Module;
pub use tensor::Tensor;
