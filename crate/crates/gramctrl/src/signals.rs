//! Sampled continuous-time trajectories: validation, composite-Simpson
//! quadrature, repeated integration, and CSV/manifest ingestion.
//!
//! Signals live on a uniform grid `t_i = i * tau / (n - 1)` with an odd
//! number of samples so that every integral is evaluated by composite
//! Simpson panels of one fixed accuracy order. Odd interior nodes of the
//! cumulative integral use the 3-point Newton-Cotes rule on the half panel,
//! fitted through the forward stencil.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Relative tolerance for grid uniformity checks.
pub const GRID_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("sample count {0} is even; composite Simpson needs an odd count")]
    EvenSampleCount(usize),
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("grid not uniform at row {row}: step {step} deviates from {expected}")]
    GridNotUniform { row: usize, step: f64, expected: f64 },
    #[error("non-finite sample at row {row}, column {col}")]
    NonFinite { row: usize, col: String },
    #[error("{what}: expected {expected} rows, got {found}")]
    RowCountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch: {what} has {found} columns, config says {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("trajectory {index} has m={m}, p={p}; dataset requires m={m0}, p={p0}")]
    InconsistentTrajectory {
        index: usize,
        m: usize,
        p: usize,
        m0: usize,
        p0: usize,
    },
    #[error("dataset needs at least one trajectory")]
    EmptyDataset,
    #[error("model order must be at least 1")]
    ZeroOrder,
    #[error("noise samples are required for this operation but absent")]
    NoiseAbsent,
    #[error("integration order must be at least 1")]
    ZeroIntegrationOrder,
}

/// Errors raised while reading trajectory CSV files or dataset manifests.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed header: {msg}")]
    MalformedHeader { path: PathBuf, msg: String },
    #[error("{path}, row {row}, field `{field}`: {msg}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        field: String,
        msg: String,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        source: csv::Error,
    },
    #[error("{path}: manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Signal {
        path: PathBuf,
        source: SignalError,
    },
}

/// One experiment's uniformly sampled input-output record on `[0, tau]`.
///
/// The optional noise record `v` is available only in simulation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    tau: f64,
    u: DMatrix<f64>,
    y: DMatrix<f64>,
    v: Option<DMatrix<f64>>,
}

impl Trajectory {
    pub fn new(
        tau: f64,
        u: DMatrix<f64>,
        y: DMatrix<f64>,
        v: Option<DMatrix<f64>>,
    ) -> Result<Self, SignalError> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(SignalError::NonPositiveDuration(tau));
        }
        let n = u.nrows();
        if n < 3 {
            return Err(SignalError::TooFewSamples(n));
        }
        if n % 2 == 0 {
            return Err(SignalError::EvenSampleCount(n));
        }
        if y.nrows() != n {
            return Err(SignalError::RowCountMismatch {
                what: "output samples",
                expected: n,
                found: y.nrows(),
            });
        }
        if let Some(v) = &v {
            if v.nrows() != n {
                return Err(SignalError::RowCountMismatch {
                    what: "noise samples",
                    expected: n,
                    found: v.nrows(),
                });
            }
            if v.ncols() != y.ncols() {
                return Err(SignalError::DimensionMismatch {
                    what: "noise samples",
                    expected: y.ncols(),
                    found: v.ncols(),
                });
            }
        }
        for (name, mat) in [("u", &u), ("y", &y)]
            .into_iter()
            .chain(v.iter().map(|v| ("v", v)))
        {
            for r in 0..mat.nrows() {
                for c in 0..mat.ncols() {
                    if !mat[(r, c)].is_finite() {
                        return Err(SignalError::NonFinite {
                            row: r,
                            col: format!("{name}{}", c + 1),
                        });
                    }
                }
            }
        }
        Ok(Self { tau, u, y, v })
    }

    /// Builds a trajectory from an explicit time grid, validating uniformity.
    pub fn from_grid(
        t: &[f64],
        u: DMatrix<f64>,
        y: DMatrix<f64>,
        v: Option<DMatrix<f64>>,
    ) -> Result<Self, SignalError> {
        let n = t.len();
        if n < 3 {
            return Err(SignalError::TooFewSamples(n));
        }
        let tau = t[n - 1];
        if tau <= 0.0 {
            return Err(SignalError::NonPositiveDuration(tau));
        }
        let expected = tau / (n - 1) as f64;
        for i in 0..n - 1 {
            let step = t[i + 1] - t[i];
            if (step - expected).abs() > GRID_TOL * tau {
                return Err(SignalError::GridNotUniform {
                    row: i + 1,
                    step,
                    expected,
                });
            }
        }
        if t[0].abs() > GRID_TOL * tau {
            return Err(SignalError::GridNotUniform {
                row: 0,
                step: t[0],
                expected: 0.0,
            });
        }
        if u.nrows() != n {
            return Err(SignalError::RowCountMismatch {
                what: "input samples",
                expected: n,
                found: u.nrows(),
            });
        }
        Self::new(tau, u, y, v)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid step `tau / (n - 1)`.
    pub fn step(&self) -> f64 {
        self.tau / (self.len() - 1) as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        self.step() * i as f64
    }

    pub fn input_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn input(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn output(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn noise(&self) -> Option<&DMatrix<f64>> {
        self.v.as_ref()
    }

    /// The stacked signal `w = [u y]`, one row per sample.
    pub fn stacked(&self) -> DMatrix<f64> {
        let n = self.len();
        let m = self.input_dim();
        let p = self.output_dim();
        let mut w = DMatrix::zeros(n, m + p);
        w.view_mut((0, 0), (n, m)).copy_from(&self.u);
        w.view_mut((0, m), (n, p)).copy_from(&self.y);
        w
    }
}

/// An ordered collection of trajectories sharing input/output dimensions,
/// together with the model order `L`.
#[derive(Debug, Clone)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    order: usize,
    m: usize,
    p: usize,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, order: usize) -> Result<Self, SignalError> {
        if order == 0 {
            return Err(SignalError::ZeroOrder);
        }
        let first = trajectories.first().ok_or(SignalError::EmptyDataset)?;
        let (m, p) = (first.input_dim(), first.output_dim());
        for (index, tr) in trajectories.iter().enumerate() {
            if tr.input_dim() != m || tr.output_dim() != p {
                return Err(SignalError::InconsistentTrajectory {
                    index,
                    m: tr.input_dim(),
                    p: tr.output_dim(),
                    m0: m,
                    p0: p,
                });
            }
        }
        Ok(Self {
            trajectories,
            order,
            m,
            p,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.p
    }

    /// Combined signal dimension `q = m + p`.
    pub fn signal_dim(&self) -> usize {
        self.m + self.p
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// True when every trajectory carries a noise record.
    pub fn has_noise(&self) -> bool {
        self.trajectories.iter().all(|t| t.noise().is_some())
    }
}

/// Composite-Simpson approximation of `\int_0^tau f(t) dt` from an odd
/// number of uniform samples. Exact for cubics on each panel pair.
pub fn quadrature(samples: &[f64], h: f64) -> Result<f64, SignalError> {
    let n = samples.len();
    if n < 3 {
        return Err(SignalError::TooFewSamples(n));
    }
    if n % 2 == 0 {
        return Err(SignalError::EvenSampleCount(n));
    }
    let mut acc = samples[0] + samples[n - 1];
    let mut four = 0.0;
    let mut two = 0.0;
    for i in (1..n - 1).step_by(2) {
        four += samples[i];
    }
    for i in (2..n - 1).step_by(2) {
        two += samples[i];
    }
    acc += 4.0 * four + 2.0 * two;
    Ok(acc * h / 3.0)
}

/// Column-wise composite Simpson of an `n x d` sample matrix.
pub fn quadrature_columns(samples: &DMatrix<f64>, h: f64) -> Result<Vec<f64>, SignalError> {
    let n = samples.nrows();
    if n < 3 {
        return Err(SignalError::TooFewSamples(n));
    }
    if n % 2 == 0 {
        return Err(SignalError::EvenSampleCount(n));
    }
    let mut out = vec![0.0; samples.ncols()];
    for (c, val) in out.iter_mut().enumerate() {
        let col: Vec<f64> = samples.column(c).iter().copied().collect();
        *val = quadrature(&col, h)?;
    }
    Ok(out)
}

/// Simpson weight vector: `w_i * h` sums samples into the integral.
pub(crate) fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; n];
    w[0] = h / 3.0;
    w[n - 1] = h / 3.0;
    for (i, wi) in w.iter_mut().enumerate().take(n - 1).skip(1) {
        *wi = if i % 2 == 1 { 4.0 * h / 3.0 } else { 2.0 * h / 3.0 };
    }
    w
}

/// Cumulative integral `F(t_i) = \int_0^{t_i} f` on the sample grid.
///
/// Even nodes carry the composite-Simpson value; odd nodes add the 3-point
/// Newton-Cotes half-panel correction through the forward stencil, so the
/// final node agrees exactly with [`quadrature`].
pub fn cumulative_simpson(samples: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>, SignalError> {
    let n = samples.nrows();
    if n < 3 {
        return Err(SignalError::TooFewSamples(n));
    }
    if n % 2 == 0 {
        return Err(SignalError::EvenSampleCount(n));
    }
    let d = samples.ncols();
    let mut out = DMatrix::zeros(n, d);
    for c in 0..d {
        let mut k = 0;
        while k + 2 < n {
            let f0 = samples[(k, c)];
            let f1 = samples[(k + 1, c)];
            let f2 = samples[(k + 2, c)];
            let base = out[(k, c)];
            out[(k + 1, c)] = base + h / 12.0 * (5.0 * f0 + 8.0 * f1 - f2);
            out[(k + 2, c)] = base + h / 3.0 * (f0 + 4.0 * f1 + f2);
            k += 2;
        }
    }
    Ok(out)
}

/// `order`-fold repeated integral of each column, evaluated at every node.
///
/// Agrees with the kernel form
/// `(1/(j-1)!) \int_0^t (t-s)^{j-1} f(s) ds` up to quadrature error.
pub fn repeated_integral(
    samples: &DMatrix<f64>,
    h: f64,
    order: usize,
) -> Result<DMatrix<f64>, SignalError> {
    if order == 0 {
        return Err(SignalError::ZeroIntegrationOrder);
    }
    let mut acc = cumulative_simpson(samples, h)?;
    for _ in 1..order {
        acc = cumulative_simpson(&acc, h)?;
    }
    Ok(acc)
}

/// Dataset manifest: model order, dimensions, noise intensity and the
/// trajectory files, with paths resolved relative to the manifest location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "L")]
    pub order: usize,
    pub m: usize,
    pub p: usize,
    /// Noise-intensity matrix, row-major `p x p`.
    pub theta: Vec<Vec<f64>>,
    pub trajectories: Vec<String>,
}

impl Manifest {
    pub fn theta_matrix(&self) -> Result<DMatrix<f64>, String> {
        if self.theta.len() != self.p || self.theta.iter().any(|r| r.len() != self.p) {
            return Err(format!(
                "theta must be {p} x {p} (row-major), got {} rows",
                self.theta.len(),
                p = self.p
            ));
        }
        Ok(DMatrix::from_fn(self.p, self.p, |i, j| self.theta[i][j]))
    }
}

/// Reads one trajectory CSV with header `t,u1..um,y1..yp[,v1..vp]`.
pub fn load_trajectory_csv(path: &Path, m: usize, p: usize) -> Result<Trajectory, LoadError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| LoadError::Csv {
            path: path.to_path_buf(),
            source,
        })?;

    let headers = reader
        .headers()
        .map_err(|source| LoadError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let mut expected: Vec<String> = vec!["t".to_string()];
    expected.extend((1..=m).map(|i| format!("u{i}")));
    expected.extend((1..=p).map(|i| format!("y{i}")));
    let with_noise = headers.len() == 1 + m + 2 * p;
    if with_noise {
        expected.extend((1..=p).map(|i| format!("v{i}")));
    }
    let got: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
    if got != expected {
        return Err(LoadError::MalformedHeader {
            path: path.to_path_buf(),
            msg: format!("expected columns {expected:?}, got {got:?}"),
        });
    }

    let mut t = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|source| LoadError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        if record.len() != expected.len() {
            return Err(LoadError::MalformedRow {
                path: path.to_path_buf(),
                row,
                field: String::new(),
                msg: format!("expected {} fields, got {}", expected.len(), record.len()),
            });
        }
        let mut vals = Vec::with_capacity(record.len());
        for (field, raw) in expected.iter().zip(record.iter()) {
            let v: f64 = raw.parse().map_err(|_| LoadError::MalformedRow {
                path: path.to_path_buf(),
                row,
                field: field.clone(),
                msg: format!("cannot parse `{raw}` as a number"),
            })?;
            vals.push(v);
        }
        t.push(vals[0]);
        rows.push(vals[1..].to_vec());
    }

    let n = rows.len();
    let build = |off: usize, width: usize| {
        DMatrix::from_fn(n, width, |r, c| rows[r][off + c])
    };
    let u = build(0, m);
    let y = build(m, p);
    let v = with_noise.then(|| build(m + p, p));
    Trajectory::from_grid(&t, u, y, v).map_err(|source| LoadError::Signal {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a dataset manifest and all referenced trajectory files.
pub fn load_dataset(manifest_path: &Path) -> Result<(Dataset, DMatrix<f64>), LoadError> {
    let raw = std::fs::read_to_string(manifest_path).map_err(|source| LoadError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| LoadError::Manifest {
            path: manifest_path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let theta = manifest
        .theta_matrix()
        .map_err(|msg| LoadError::Manifest {
            path: manifest_path.to_path_buf(),
            msg,
        })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
    for rel in &manifest.trajectories {
        let path = base.join(rel);
        trajectories.push(load_trajectory_csv(&path, manifest.m, manifest.p)?);
    }
    let ds = Dataset::new(trajectories, manifest.order).map_err(|source| LoadError::Signal {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    Ok((ds, theta))
}

/// Writes one trajectory as CSV with 17 significant digits.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let m = traj.input_dim();
    let p = traj.output_dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.extend((1..=p).map(|i| format!("y{i}")));
    if traj.noise().is_some() {
        header.extend((1..=p).map(|i| format!("v{i}")));
    }
    writeln!(f, "{}", header.join(","))?;
    for i in 0..traj.len() {
        let mut fields = vec![format!("{:.16e}", traj.time(i))];
        for c in 0..m {
            fields.push(format!("{:.16e}", traj.input()[(i, c)]));
        }
        for c in 0..p {
            fields.push(format!("{:.16e}", traj.output()[(i, c)]));
        }
        if let Some(v) = traj.noise() {
            for c in 0..p {
                fields.push(format!("{:.16e}", v[(i, c)]));
            }
        }
        writeln!(f, "{}", fields.join(","))?;
    }
    Ok(())
}
