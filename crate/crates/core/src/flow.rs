//! Advection–diffusion weight model: pairwise transition densities, weight
//! matrices for snapshot pairs, and synthetic snapshot generation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this |S| the displacement variance switches to its Taylor series to
/// avoid the 0/0 in the closed form.
const S_SERIES_THRESHOLD: f64 = 1e-6;

/// Parameters of the linear-drift diffusion model.
///
/// Over one frame interval (time rescaled to 1, mean flow subtracted) a
/// particle at `x` moves to `e^S x + η` per axis, with `η` zero-mean Gaussian
/// of variance `σ²(S) = κ (e^{2S} − 1) / (2S)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Velocity gradient S.
    pub s: f64,
    /// Diffusivity κ, strictly positive.
    pub kappa: f64,
    /// Spatial dimension, 1–3; axes are independent and share `s` and `kappa`.
    pub dims: usize,
}

impl FlowParams {
    pub fn new(kappa: f64, s: f64) -> Self {
        FlowParams { s, kappa, dims: 1 }
    }

    pub fn with_dims(kappa: f64, s: f64, dims: usize) -> Self {
        FlowParams { s, kappa, dims }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kappa.is_finite() || self.kappa <= 0.0 {
            return Err(Error::domain("kappa", format!("{} (must be > 0)", self.kappa)));
        }
        if !self.s.is_finite() {
            return Err(Error::domain("S", "must be finite"));
        }
        if !(1..=3).contains(&self.dims) {
            return Err(Error::domain("dims", format!("{} (must be 1, 2 or 3)", self.dims)));
        }
        Ok(())
    }

    /// Deterministic stretch factor e^S applied between frames.
    pub fn drift(&self) -> f64 {
        self.s.exp()
    }

    /// Per-axis displacement variance `σ²(S) = κ (e^{2S} − 1) / (2S)`.
    ///
    /// Near S = 0 the closed form is replaced by its series
    /// `κ (1 + S + 2S²/3 + S³/3 + 2S⁴/15)`, which agrees to machine
    /// precision below the switch point and gives exactly κ at S = 0.
    pub fn displacement_variance(&self) -> f64 {
        let s = self.s;
        if s.abs() < S_SERIES_THRESHOLD {
            self.kappa
                * (1.0 + s * (1.0 + s * (2.0 / 3.0 + s * (1.0 / 3.0 + s * (2.0 / 15.0)))))
        } else {
            self.kappa * (2.0 * s).exp_m1() / (2.0 * s)
        }
    }
}

/// A transition weight in linear and log form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairWeight {
    /// May underflow to zero for large separations.
    pub value: f64,
    /// Always finite.
    pub log_value: f64,
}

/// Gaussian transition density of one particle between frames.
///
/// Per axis this is the normal density with mean `e^S x` and variance
/// `σ²(S)`; axes multiply. The normalization `1/√(2πσ²)` keeps the full κ
/// dependence of the propagator — parameter learning needs the correct
/// κ scaling of the log-likelihood, not just its shape in the exponent.
pub fn pairwise_weight(x: &[f64], y: &[f64], params: &FlowParams) -> Result<PairWeight> {
    params.validate()?;
    if x.len() != params.dims || y.len() != params.dims {
        return Err(Error::domain(
            "position",
            format!("expected {} coordinates, got {}/{}", params.dims, x.len(), y.len()),
        ));
    }
    if !x.iter().chain(y.iter()).all(|c| c.is_finite()) {
        return Err(Error::domain("position", "coordinates must be finite"));
    }
    let log_value = log_weight(x, y, params);
    Ok(PairWeight {
        value: log_value.exp(),
        log_value,
    })
}

fn log_weight(x: &[f64], y: &[f64], params: &FlowParams) -> f64 {
    let drift = params.drift();
    let var = params.displacement_variance();
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let mut log = 0.0;
    for (xa, ya) in x.iter().zip(y.iter()) {
        let r = ya - drift * xa;
        log += -r * r / (2.0 * var) + log_norm;
    }
    log
}

/// Ground truth attached to a synthetic snapshot pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub params: FlowParams,
    /// `perm[i]` is the index in the second frame of the particle that
    /// started at `x[i]`.
    pub perm: Option<Vec<usize>>,
}

/// Positions of N particles in two consecutive frames.
///
/// Coordinates are stored flat, row-major: particle `i` of frame one spans
/// `x[i*dims .. (i+1)*dims]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPair {
    dims: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    pub truth: Option<Truth>,
}

impl SnapshotPair {
    pub fn new(x: Vec<f64>, y: Vec<f64>, dims: usize, truth: Option<Truth>) -> Result<Self> {
        if !(1..=3).contains(&dims) {
            return Err(Error::domain("dims", format!("{dims} (must be 1, 2 or 3)")));
        }
        if x.is_empty() || x.len() % dims != 0 || x.len() != y.len() {
            return Err(Error::domain(
                "snapshot",
                format!(
                    "frames must hold the same positive number of {dims}-dimensional points \
                     (got {} and {} coordinates)",
                    x.len(),
                    y.len()
                ),
            ));
        }
        if !x.iter().chain(y.iter()).all(|c| c.is_finite()) {
            return Err(Error::domain("snapshot", "coordinates must be finite"));
        }
        Ok(SnapshotPair { dims, x, y, truth })
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn x_pos(&self, i: usize) -> &[f64] {
        &self.x[i * self.dims..(i + 1) * self.dims]
    }

    pub fn y_pos(&self, j: usize) -> &[f64] {
        &self.y[j * self.dims..(j + 1) * self.dims]
    }
}

/// The N×N positive matrix of pairwise matching weights. The log entries are
/// the source of truth; the linear entries may underflow to zero for widely
/// separated pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    entries: DMatrix<f64>,
    log_entries: DMatrix<f64>,
}

impl WeightMatrix {
    /// Build from log weights; every entry must be finite.
    pub fn from_log(log_entries: DMatrix<f64>) -> Result<Self> {
        let n = log_entries.nrows();
        if n == 0 || log_entries.ncols() != n {
            return Err(Error::domain(
                "weight matrix",
                format!("must be square and non-empty, got {}x{}", n, log_entries.ncols()),
            ));
        }
        if !log_entries.iter().all(|w| w.is_finite()) {
            return Err(Error::domain("weight matrix", "log entries must be finite"));
        }
        let entries = log_entries.map(f64::exp);
        Ok(WeightMatrix { n, entries, log_entries })
    }

    /// Build from strictly positive linear weights.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::domain("weight matrix", "entries must be finite and > 0"));
        }
        Self::from_log(entries.map(f64::ln))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn log_entry(&self, i: usize, j: usize) -> f64 {
        self.log_entries[(i, j)]
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn log_entries(&self) -> &DMatrix<f64> {
        &self.log_entries
    }

    /// Matrix with row `i` and column `j` deleted.
    pub fn minor(&self, i: usize, j: usize) -> WeightMatrix {
        let rows: Vec<usize> = (0..self.n).filter(|&r| r != i).collect();
        let cols: Vec<usize> = (0..self.n).filter(|&c| c != j).collect();
        self.submatrix(&rows, &cols)
    }

    /// Restriction to the given rows and columns (both non-empty).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> WeightMatrix {
        assert!(!rows.is_empty() && rows.len() == cols.len());
        let log = DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
            self.log_entries[(rows[a], cols[b])]
        });
        WeightMatrix {
            n: rows.len(),
            entries: log.map(f64::exp),
            log_entries: log,
        }
    }

    /// Relabeled copy: entry (i, j) moves to (row_perm[i], col_perm[j]).
    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> WeightMatrix {
        let mut log = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                log[(row_perm[i], col_perm[j])] = self.log_entries[(i, j)];
            }
        }
        WeightMatrix {
            n: self.n,
            entries: log.map(f64::exp),
            log_entries: log,
        }
    }
}

/// Weight matrix of a snapshot pair: entry (i, j) is the transition density
/// from `x_i` to `y_j`. Logs are accumulated directly, never through the
/// linear value.
pub fn build_weight_matrix(snap: &SnapshotPair, params: &FlowParams) -> Result<WeightMatrix> {
    params.validate()?;
    if snap.dims() != params.dims {
        return Err(Error::domain(
            "dims",
            format!("snapshot is {}-dimensional, parameters are {}-dimensional", snap.dims(), params.dims),
        ));
    }
    let n = snap.len();
    let log = DMatrix::from_fn(n, n, |i, j| log_weight(snap.x_pos(i), snap.y_pos(j), params));
    WeightMatrix::from_log(log)
}

/// Draw a synthetic snapshot pair.
///
/// First-frame positions are i.i.d. uniform in `[0, box_scale · n^{1/d})` per
/// axis, so the particle density stays fixed as n grows. Second-frame
/// positions apply the drift and per-axis Gaussian noise of the model and are
/// stored in shuffled order; the shuffle is recorded in `truth`. Fully
/// deterministic for a given seed.
pub fn generate_snapshots(
    n: usize,
    params: &FlowParams,
    box_scale: f64,
    seed: u64,
) -> Result<SnapshotPair> {
    params.validate()?;
    if n == 0 {
        return Err(Error::domain("n", "must be at least 1"));
    }
    if !box_scale.is_finite() || box_scale <= 0.0 {
        return Err(Error::domain("box_scale", "must be finite and > 0"));
    }
    let d = params.dims;
    let side = box_scale * (n as f64).powf(1.0 / d as f64);
    let drift = params.drift();
    let sigma = params.displacement_variance().sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(0.0..side)).collect();
    let moved: Vec<f64> = x
        .iter()
        .map(|&c| drift * c + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut y = vec![0.0; n * d];
    for i in 0..n {
        y[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(&moved[i * d..(i + 1) * d]);
    }

    SnapshotPair::new(
        x,
        y,
        d,
        Some(Truth {
            params: *params,
            perm: Some(perm),
        }),
    )
}
