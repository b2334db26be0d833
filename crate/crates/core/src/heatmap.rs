//! Predictive-uncertainty maps over a planar grid.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{grid, GridSpec};
use crate::error::{Error, Result};
use crate::metrics::predictive_entropy;
use crate::model::Model;
use crate::train::predict;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub x: f64,
    pub y: f64,
    pub entropy: f64,
    pub maxprob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub spec: GridSpec,
    pub n_classes: usize,
    /// Row-major over the grid, `x` fastest, starting at `(xmin, ymin)`.
    pub cells: Vec<Cell>,
}

impl Heatmap {
    pub fn cell(&self, i: usize, j: usize) -> &Cell {
        &self.cells[j * self.spec.resolution + i]
    }

    /// Mean entropy of the four corner cells.
    pub fn corner_entropy(&self) -> f64 {
        let r = self.spec.resolution - 1;
        [(0, 0), (r, 0), (0, r), (r, r)].iter().map(|&(i, j)| self.cell(i, j).entropy).sum::<f64>() / 4.0
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        for c in &self.cells {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Binary PPM; low entropy is yellow, maximal entropy (`log K`) blue.
    /// The top image row is `ymax`.
    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let res = self.spec.resolution;
        let max_h = libm::log(self.n_classes as f64).max(f64::MIN_POSITIVE);
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "P6\n{res} {res}\n255\n")?;
        for j in (0..res).rev() {
            for i in 0..res {
                let t = (self.cell(i, j).entropy / max_h).clamp(0.0, 1.0);
                let ch = |a: f64, b: f64| ((1.0 - t) * a + t * b).round() as u8;
                out.write_all(&[ch(255.0, 0.0), ch(255.0, 0.0), ch(0.0, 255.0)])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub fn heatmap(model: &Model, spec: &GridSpec, seed: u64) -> Result<Heatmap> {
    if model.config.in_features != 2 {
        return Err(Error::InvalidInput("heatmaps need a model over 2-D inputs".into()));
    }
    let pts = grid(spec)?;
    let probs = predict(model, &pts, seed)?;
    let ent = predictive_entropy(&probs)?;
    let cells = (0..pts.rows())
        .map(|i| Cell {
            x: pts.get(i, 0),
            y: pts.get(i, 1),
            entropy: ent[i],
            maxprob: probs.row(i).iter().copied().fold(0.0, f64::max),
        })
        .collect();
    Ok(Heatmap { spec: spec.clone(), n_classes: model.config.n_classes, cells })
}
