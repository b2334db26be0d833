//! Toy 2-D datasets, OOD sets and the `x1,x2,label` CSV format.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled points: `x` is `[n, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.ndim() != 2 || x.rows() != y.len() {
            return Err(Error::invalid_shape("dataset", x.shape(), format!("{} labels", y.len())));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.y.iter().max().map_or(0, |m| m + 1)
    }

    /// Rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.x.cols();
        let mut xs = Vec::with_capacity(idx.len() * d);
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            xs.extend_from_slice(self.x.row(i));
            ys.push(self.y[i]);
        }
        Dataset::new(Tensor::new(vec![idx.len(), d], xs)?, ys)
    }
}

fn noise_dist(noise: f64) -> Result<Option<Normal<f64>>> {
    if !(noise >= 0.0) {
        return Err(Error::Config(format!("noise must be non-negative, got {noise}")));
    }
    if noise == 0.0 {
        Ok(None)
    } else {
        Normal::new(0.0, noise).map(Some).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Two interleaving half circles: class 0 on `(cos t, sin t)`, class 1 on
/// `(1 − cos t, 0.5 − sin t)`, `t ~ U[0, π]`, plus isotropic Gaussian noise.
/// The first `n/2` rows are class 0.
pub fn two_moons<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidInput(format!("two_moons needs a positive even n, got {n}")));
    }
    let dist = noise_dist(noise)?;
    let half = n / 2;
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0.0..=PI);
        let (mut a, mut b) = if i < half { (libm::cos(t), libm::sin(t)) } else { (1.0 - libm::cos(t), 0.5 - libm::sin(t)) };
        if let Some(d) = &dist {
            a += d.sample(rng);
            b += d.sample(rng);
        }
        xs.push(a);
        xs.push(b);
        ys.push(usize::from(i >= half));
    }
    Dataset::new(Tensor::new(vec![n, 2], xs)?, ys)
}

/// Two isotropic Gaussian blobs centred at `(−1, 0)` and `(1, 0)`.
pub fn gaussian_blobs<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidInput(format!("gaussian_blobs needs a positive even n, got {n}")));
    }
    let dist = noise_dist(noise)?;
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let c = usize::from(i >= n / 2);
        let cx = if c == 0 { -1.0 } else { 1.0 };
        let (dx, dy) = match &dist {
            Some(d) => (d.sample(rng), d.sample(rng)),
            None => (0.0, 0.0),
        };
        xs.push(cx + dx);
        xs.push(dy);
        ys.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 2], xs)?, ys)
}

/// Points on a noisy circle; labels are all 0 (OOD sets carry no labels).
pub fn ring<R: Rng + ?Sized>(n: usize, center: [f64; 2], radius: f64, noise: f64, rng: &mut R) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidInput("ring needs n > 0".into()));
    }
    let dist = noise_dist(noise)?;
    let mut xs = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t = rng.random_range(0.0..2.0 * PI);
        let r = radius + dist.as_ref().map_or(0.0, |d| d.sample(rng));
        xs.push(center[0] + r * libm::cos(t));
        xs.push(center[1] + r * libm::sin(t));
    }
    Tensor::new(vec![n, 2], xs)
}

/// A `res × res` lattice over the rectangle, row-major with `x` fastest.
pub fn grid(spec: &GridSpec) -> Result<Tensor> {
    spec.validate()?;
    let res = spec.resolution;
    let mut xs = Vec::with_capacity(2 * res * res);
    for j in 0..res {
        for i in 0..res {
            xs.push(lerp(spec.xmin, spec.xmax, i, res));
            xs.push(lerp(spec.ymin, spec.ymax, j, res));
        }
    }
    Tensor::new(vec![res * res, 2], xs)
}

fn lerp(lo: f64, hi: f64, i: usize, res: usize) -> f64 {
    if res == 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * i as f64 / (res - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.xmax, self.ymin, self.ymax].iter().all(|v| v.is_finite());
        if !finite || !(self.xmax > self.xmin) || !(self.ymax > self.ymin) {
            return Err(Error::InvalidInput(format!(
                "grid must have positive area, got [{}, {}] x [{}, {}]",
                self.xmin, self.xmax, self.ymin, self.ymax
            )));
        }
        if self.resolution == 0 {
            return Err(Error::InvalidInput("grid resolution must be positive".into()));
        }
        Ok(())
    }
}

impl std::str::FromStr for GridSpec {
    type Err = Error;

    /// `xmin,xmax,ymin,ymax,res`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::InvalidInput(format!("grid needs xmin,xmax,ymin,ymax,res; got {s:?}")));
        }
        let num = |i: usize| -> Result<f64> {
            parts[i].parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad grid value {:?}", parts[i])))
        };
        let resolution = parts[4]
            .parse::<usize>()
            .map_err(|_| Error::InvalidInput(format!("bad grid resolution {:?}", parts[4])))?;
        let spec = GridSpec { xmin: num(0)?, xmax: num(1)?, ymin: num(2)?, ymax: num(3)?, resolution };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    GaussianBlobs,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodSpec {
    Grid(GridSpec),
    Ring {
        #[serde(default = "default_ring_center")]
        center: [f64; 2],
        #[serde(default = "default_ring_radius")]
        radius: f64,
        #[serde(default = "default_ring_noise")]
        noise: f64,
        #[serde(default = "default_ring_n")]
        n: usize,
    },
    Csv {
        path: PathBuf,
    },
}

fn default_ring_center() -> [f64; 2] {
    [0.5, 0.25]
}
fn default_ring_radius() -> f64 {
    3.0
}
fn default_ring_noise() -> f64 {
    0.1
}
fn default_ring_n() -> usize {
    500
}

impl Default for OodSpec {
    fn default() -> Self {
        OodSpec::Ring {
            center: default_ring_center(),
            radius: default_ring_radius(),
            noise: default_ring_noise(),
            n: default_ring_n(),
        }
    }
}

fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    500
}
fn default_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Defaults to the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// CSV sources for `kind = csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub ood: OodSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::TwoMoons,
            n_train: default_n_train(),
            n_test: default_n_test(),
            noise: default_noise(),
            seed: None,
            train_path: None,
            test_path: None,
            ood: OodSpec::default(),
        }
    }
}

/// Train, test and OOD sets drawn from a spec.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Tensor,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind != DatasetKind::Csv && (self.n_train == 0 || self.n_test == 0) {
            return Err(Error::Config("dataset n_train and n_test must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("dataset noise must be non-negative, got {}", self.noise)));
        }
        if self.kind == DatasetKind::Csv && (self.train_path.is_none() || self.test_path.is_none()) {
            return Err(Error::Config("csv datasets need train_path and test_path".into()));
        }
        Ok(())
    }

    /// Each split gets its own ChaCha stream of the same seed.
    pub fn generate(&self, run_seed: u64) -> Result<Splits> {
        self.validate()?;
        let seed = self.seed.unwrap_or(run_seed);
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let (train, test) = match self.kind {
            DatasetKind::TwoMoons => (
                two_moons(self.n_train, self.noise, &mut stream(1))?,
                two_moons(self.n_test, self.noise, &mut stream(2))?,
            ),
            DatasetKind::GaussianBlobs => (
                gaussian_blobs(self.n_train, self.noise, &mut stream(1))?,
                gaussian_blobs(self.n_test, self.noise, &mut stream(2))?,
            ),
            DatasetKind::Csv => (
                read_csv(self.train_path.as_ref().unwrap())?,
                read_csv(self.test_path.as_ref().unwrap())?,
            ),
        };
        let ood = self.ood.generate(&mut stream(3))?;
        Ok(Splits { train, test, ood })
    }
}

impl OodSpec {
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Tensor> {
        match self {
            OodSpec::Grid(g) => grid(g),
            OodSpec::Ring { center, radius, noise, n } => ring(*n, *center, *radius, *noise, rng),
            OodSpec::Csv { path } => Ok(read_csv(path)?.x),
        }
    }
}

/// Test and OOD sets named by a `--data` argument: either a JSON
/// [`DatasetSpec`] (its test split and OOD set are generated) or a CSV file
/// of labelled test points, paired with the OOD set of `fallback`.
pub fn resolve_eval_data(arg: &Path, fallback: &DatasetSpec, seed: u64) -> Result<(Dataset, Tensor)> {
    let is_json = arg.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = std::fs::read_to_string(arg)?;
        let spec: DatasetSpec = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let s = spec.generate(seed)?;
        Ok((s.test, s.ood))
    } else {
        let test = read_csv(arg)?;
        let mut r = ChaCha8Rng::seed_from_u64(fallback.seed.unwrap_or(seed));
        r.set_stream(3);
        Ok((test, fallback.ood.generate(&mut r)?))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    x1: f64,
    x2: f64,
    label: usize,
}

/// Reads a headed `x1,x2,label` file.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x1", "x2", "label"] {
        return Err(Error::InvalidInput(format!(
            "{}: expected header x1,x2,label, got {}",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        if !row.x1.is_finite() || !row.x2.is_finite() {
            return Err(Error::InvalidInput(format!("{}: non-finite coordinate", path.display())));
        }
        xs.push(row.x1);
        xs.push(row.x2);
        ys.push(row.label);
    }
    if ys.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no rows", path.display())));
    }
    Dataset::new(Tensor::new(vec![ys.len(), 2], xs)?, ys)
}

pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    if data.x.cols() != 2 {
        return Err(Error::invalid_shape("write_csv", data.x.shape(), "expected 2 features"));
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for (i, &y) in data.y.iter().enumerate() {
        let r = data.x.row(i);
        w.serialize(Row { x1: r[0], x2: r[1], label: y })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_the_circles() {
        let d = two_moons(200, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..200 {
            let r = d.x.row(i);
            if d.y[i] == 0 {
                assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 1.0).abs() < 1e-12);
                assert!(r[1] >= 0.0);
            } else {
                let (a, b) = (1.0 - r[0], 0.5 - r[1]);
                assert!(((a * a + b * b).sqrt() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(d.y.iter().filter(|&&y| y == 0).count(), 100);
    }

    #[test]
    fn moons_are_seeded_and_reject_odd_counts() {
        let a = two_moons(50 * 2, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = two_moons(100, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(two_moons(7, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
        assert!(two_moons(8, -1.0, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn grid_layout() {
        let g: GridSpec = "-1,1,0,2,3".parse().unwrap();
        let pts = grid(&g).unwrap();
        assert_eq!(pts.rows(), 9);
        assert_eq!(pts.row(0), &[-1.0, 0.0]);
        assert_eq!(pts.row(2), &[1.0, 0.0]);
        assert_eq!(pts.row(8), &[1.0, 2.0]);
        assert!("0,0,0,1,3".parse::<GridSpec>().is_err());
        assert!("0,1,0,1".parse::<GridSpec>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = two_moons(10, 0.2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        write_csv(&path, &d).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x1,x2,label\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_csv(&path).unwrap(), d);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,b,c\n1,2,0\n").unwrap();
        assert!(read_csv(&bad).is_err());
    }

    #[test]
    fn splits_use_independent_streams() {
        let spec = DatasetSpec { n_train: 20, n_test: 20, ..DatasetSpec::default() };
        let s = spec.generate(4).unwrap();
        assert_ne!(s.train.x.data(), s.test.x.data());
        assert_eq!(s.ood.rows(), 500);
        let again = spec.generate(4).unwrap();
        assert_eq!(s.train, again.train);
    }
}
