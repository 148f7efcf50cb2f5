//! Interior stationary points of the Bethe free energy for the matching
//! model, found by a damped fixed-point iteration on the beliefs with
//! doubly stochastic normalization sweeps and chemical-potential updates.
//!
//! The iteration runs on a dual-rescaled copy of the weight matrix (see
//! [`crate::matcher`]); beliefs are invariant under that rescaling and the
//! free energy shifts by a known constant, so results are reported on the
//! original scale.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::WeightMatrix;
use crate::matcher::{equilibrate, Equilibration};

/// Beliefs are kept inside [ε, 1−ε] wherever a log or odds ratio is taken.
pub const BELIEF_CLAMP: f64 = 1e-15;

/// Edges closer to the boundary than this are excluded from the stationarity
/// residual. Below roughly the square root of machine epsilon the distance to
/// the boundary is itself quantized (1−β moves in steps of ulp(1)), so the
/// relative stationarity of such edges is not measurable in f64.
const INTERIOR_CUTOFF: f64 = 1e-8;

/// Acceptance threshold on the constraint/stationarity residual. The damped
/// iteration stops moving (in the max-elementwise sense) before the relative
/// stationarity of the smallest beliefs settles on stiff instances, so the
/// gate floors at 1e-7 rather than scaling with tol all the way down.
fn stationarity_gate(tol: f64) -> f64 {
    (10.0 * tol).max(1e-7)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Unique stationary point of the convexified free energy (entropy sign
    /// flipped), solved by alternating monotone one-dimensional updates.
    Convexified,
    /// Doubly stochastic rescaling of the weight matrix itself.
    Sinkhorn,
}

/// Iteration controls for [`solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpConfig {
    /// Damping λ ∈ [0, 1) of the belief update.
    pub damping: f64,
    /// Convergence threshold on the max elementwise belief change per sweep.
    pub tol: f64,
    pub max_iters: usize,
    pub init: InitMode,
    /// Record the free energy after every sweep (diagnostic; off by default).
    pub track_free_energy: bool,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig {
            damping: 0.45,
            tol: 1e-10,
            max_iters: 100_000,
            init: InitMode::Convexified,
            track_free_energy: false,
        }
    }
}

impl BpConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::domain("damping", format!("{} not in [0, 1)", self.damping)));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::domain("tol", "must be positive and finite"));
        }
        if self.max_iters == 0 {
            return Err(Error::domain("max_iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// A fixed point of the belief iteration.
///
/// At convergence every row and column of `beta` sums to one within
/// `residual`, and `β(1−β) = p·u·v` holds within `residual` (measured in the
/// log domain) on all interior edges. The chemical potentials are stored as
/// logs so that extreme weight scales stay representable; `u()`/`v()`
/// exponentiate on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub beta: DMatrix<f64>,
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    /// Bethe free energy at `beta`; `ln Z_BP = −f_bp`.
    pub f_bp: f64,
    /// Max constraint / stationarity violation at return.
    pub residual: f64,
    pub iterations: usize,
    /// True if any belief had to be clamped away from {0, 1}.
    pub clamped: bool,
    /// Per-sweep free energy when tracking was requested, else empty.
    pub free_energy_trace: Vec<f64>,
}

impl BeliefState {
    pub fn n(&self) -> usize {
        self.beta.nrows()
    }

    /// `ln Z_BP`.
    pub fn ln_z(&self) -> f64 {
        -self.f_bp
    }

    /// Linear chemical potentials e^{μ_i}; may overflow for extreme weights.
    pub fn u(&self) -> Vec<f64> {
        self.log_u.iter().map(|x| x.exp()).collect()
    }

    pub fn v(&self) -> Vec<f64> {
        self.log_v.iter().map(|x| x.exp()).collect()
    }
}

/// Bethe free energy `Σ_{ij} [β ln(β/p) − (1−β) ln(1−β)]`, with the 0·ln 0
/// limit at the boundary.
pub fn bethe_free_energy(beta: &DMatrix<f64>, w: &WeightMatrix) -> f64 {
    free_energy_log(beta, w.log_entries())
}

fn free_energy_log(beta: &DMatrix<f64>, log_entries: &DMatrix<f64>) -> f64 {
    let mut f = 0.0;
    for (b, l) in beta.iter().zip(log_entries.iter()) {
        let b = b.clamp(0.0, 1.0);
        if b > 0.0 {
            f += b * (b.ln() - l);
        }
        if b < 1.0 {
            f -= (1.0 - b) * (1.0 - b).ln();
        }
    }
    f
}

fn boundary_single_edge_state(w: &WeightMatrix) -> BeliefState {
    BeliefState {
        beta: DMatrix::from_element(1, 1, 1.0),
        log_u: vec![0.0],
        log_v: vec![0.0],
        f_bp: -w.log_entry(0, 0),
        residual: 0.0,
        iterations: 0,
        clamped: false,
        free_energy_trace: Vec::new(),
    }
}

/// The unique doubly stochastic solution of the convexified stationarity
/// `β/(1−β) = p·u·v`, used as the starting point of the main iteration.
///
/// In log variables the condition reads `β = sigmoid(ln p + x_i + y_j)`;
/// each potential update is a monotone one-dimensional root-find.
pub fn init_convexified(w: &WeightMatrix) -> Result<BeliefState> {
    if w.n() == 1 {
        return Ok(boundary_single_edge_state(w));
    }
    let eq = equilibrate(w)?;
    let tol = BpConfig::default().tol;
    let (beta, x, y, passes, residual) = convexified_potentials(&eq.scaled_log, tol, 200)?;
    Ok(finalize_state(
        beta, &x, &y, &eq, w, residual, passes, false,
        Vec::new(),
    ))
}

/// Potentials of the convexified problem: a few alternating passes to get
/// into the basin, then Newton ascent on the concave dual
/// `Φ(x, y) = Σx + Σy − Σ_{ij} softplus(l + x_i + y_j)`.
/// The dual is flat along the gauge (x+c, y−c); the Newton system is
/// grounded by fixing the first potential and ridge-protected against
/// disconnected active edges. Returns beliefs, log potentials, iteration
/// count and residual.
fn convexified_potentials(
    scaled_log: &DMatrix<f64>,
    tol: f64,
    max_newton: usize,
) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>, usize, f64)> {
    let n = scaled_log.nrows();
    let mut x = vec![0.0_f64; n];
    let mut y = vec![0.0_f64; n];
    let mut iterations = 0;
    for _ in 0..5 {
        iterations += 1;
        for i in 0..n {
            let cs: Vec<f64> = (0..n).map(|j| scaled_log[(i, j)] + y[j]).collect();
            x[i] = solve_unit_row_sum(&cs, x[i]);
        }
        for j in 0..n {
            let cs: Vec<f64> = (0..n).map(|i| scaled_log[(i, j)] + x[i]).collect();
            y[j] = solve_unit_row_sum(&cs, y[j]);
        }
    }

    let phi = |x: &[f64], y: &[f64]| -> f64 {
        let mut v: f64 = x.iter().sum::<f64>() + y.iter().sum::<f64>();
        for i in 0..n {
            for j in 0..n {
                let a = scaled_log[(i, j)] + x[i] + y[j];
                v -= if a > 0.0 { a + (-a).exp().ln_1p() } else { a.exp().ln_1p() };
            }
        }
        v
    };

    let mut residual = f64::INFINITY;
    for _ in 0..max_newton {
        iterations += 1;
        let beta = DMatrix::from_fn(n, n, |i, j| sigmoid(scaled_log[(i, j)] + x[i] + y[j]));
        let mut g = vec![0.0_f64; 2 * n];
        for i in 0..n {
            g[i] = (0..n).map(|j| beta[(i, j)]).sum::<f64>() - 1.0;
        }
        for j in 0..n {
            g[n + j] = (0..n).map(|i| beta[(i, j)]).sum::<f64>() - 1.0;
        }
        residual = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if residual < tol {
            return Ok((beta, x, y, iterations, residual));
        }

        // Grounded Newton system on (x₁..x_{n−1}, y₀..y_{n−1}),
        // Jacobi-scaled: polarized edges leave rows of the Jacobian many
        // orders smaller than their neighbors.
        let m = 2 * n - 1;
        let mut jac: DMatrix<f64> = DMatrix::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let w = beta[(i, j)] * (1.0 - beta[(i, j)]);
                if i > 0 {
                    jac[(i - 1, i - 1)] += w;
                    jac[(i - 1, n - 1 + j)] += w;
                    jac[(n - 1 + j, i - 1)] += w;
                }
                jac[(n - 1 + j, n - 1 + j)] += w;
            }
        }
        let scale: Vec<f64> = (0..m)
            .map(|k| 1.0 / jac[(k, k)].max(1e-300).sqrt())
            .collect();
        for r in 0..m {
            for c in 0..m {
                jac[(r, c)] *= scale[r] * scale[c];
            }
        }
        for k in 0..m {
            jac[(k, k)] += 1e-13;
        }
        let rhs = nalgebra::DVector::from_fn(m, |k, _| {
            let gk = if k < n - 1 { g[k + 1] } else { g[n + (k - (n - 1))] };
            -gk * scale[k]
        });
        let chol = Cholesky::new(jac).ok_or(Error::InitNonConvergence {
            iterations,
            residual,
        })?;
        let delta = chol.solve(&rhs);

        if residual < 1e-6 {
            // Close enough that Newton contracts on its own; objective
            // comparisons are below f64 resolution here.
            for i in 1..n {
                x[i] += delta[i - 1] * scale[i - 1];
            }
            for j in 0..n {
                y[j] += delta[n - 1 + j] * scale[n - 1 + j];
            }
            continue;
        }
        let phi_now = phi(&x, &y);
        let mut tau = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let mut xc = x.clone();
            let mut yc = y.clone();
            for i in 1..n {
                xc[i] += tau * delta[i - 1] * scale[i - 1];
            }
            for j in 0..n {
                yc[j] += tau * delta[n - 1 + j] * scale[n - 1 + j];
            }
            if phi(&xc, &yc) >= phi_now {
                moved = xc != x || yc != y;
                x = xc;
                y = yc;
                break;
            }
            tau *= 0.5;
        }
        if !moved {
            break; // step fell below representable resolution
        }
    }
    Err(Error::InitNonConvergence {
        iterations,
        residual,
    })
}

/// Root of `Σ_j sigmoid(c_j + x) = 1` in x: safeguarded Newton.
fn solve_unit_row_sum(cs: &[f64], start: f64) -> f64 {
    let g = |x: f64| cs.iter().map(|c| sigmoid(c + x)).sum::<f64>() - 1.0;
    // Bracket the root by doubling steps.
    let (mut lo, mut hi);
    let mut x = start;
    let gx = g(x);
    if gx < 0.0 {
        lo = x;
        let mut step = 1.0;
        loop {
            x += step;
            if g(x) >= 0.0 {
                hi = x;
                break;
            }
            lo = x;
            step *= 2.0;
        }
    } else {
        hi = x;
        let mut step = 1.0;
        loop {
            x -= step;
            if g(x) <= 0.0 {
                lo = x;
                break;
            }
            hi = x;
            step *= 2.0;
        }
    }
    x = 0.5 * (lo + hi);
    for _ in 0..100 {
        let val = g(x);
        if val.abs() < 1e-14 {
            return x;
        }
        if val > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let slope: f64 = cs
            .iter()
            .map(|c| {
                let s = sigmoid(c + x);
                s * (1.0 - s)
            })
            .sum();
        let newton = x - val / slope;
        x = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 * (1.0 + x.abs()) {
            return x;
        }
    }
    x
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Doubly stochastic rescaling of the weights (iterative proportional
/// fitting in the log domain).
fn sinkhorn_beta(scaled_log: &DMatrix<f64>, tol: f64, max_passes: usize) -> Result<DMatrix<f64>> {
    let n = scaled_log.nrows();
    let mut m = scaled_log.clone();
    let mut worst = f64::INFINITY;
    for _ in 0..max_passes {
        for i in 0..n {
            let lse = log_sum_exp_iter((0..n).map(|j| m[(i, j)]));
            for j in 0..n {
                m[(i, j)] -= lse;
            }
        }
        for j in 0..n {
            let lse = log_sum_exp_iter((0..n).map(|i| m[(i, j)]));
            for i in 0..n {
                m[(i, j)] -= lse;
            }
        }
        worst = (0..n)
            .map(|i| log_sum_exp_iter((0..n).map(|j| m[(i, j)])).abs())
            .chain((0..n).map(|j| log_sum_exp_iter((0..n).map(|i| m[(i, j)])).abs()))
            .fold(0.0_f64, f64::max);
        if worst < tol {
            return Ok(m.map(f64::exp));
        }
    }
    Err(Error::InitNonConvergence {
        iterations: max_passes,
        residual: worst,
    })
}

fn log_sum_exp_iter(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Find an interior stationary point of the Bethe free energy under the
/// doubly stochastic constraints.
///
/// Each sweep applies the damped belief update, renormalizes rows then
/// columns, and refreshes the chemical potentials (the second potential
/// update consumes the first's fresh values; the simultaneous variant leaves
/// a two-cycle in the gauge direction on symmetric instances). Iteration
/// stops once the elementwise belief change and the constraint/stationarity
/// residual are both below tolerance.
pub fn solve(w: &WeightMatrix, cfg: &BpConfig) -> Result<BeliefState> {
    cfg.validate()?;
    let n = w.n();
    if n == 1 {
        return Ok(boundary_single_edge_state(w));
    }
    let eq = equilibrate(w)?;
    let p = &eq.scaled;

    // As a starting point the init only needs to be roughly doubly
    // stochastic; a stalled initializer falls through to the next one, and
    // the uniform start always works.
    let initialized = match cfg.init {
        InitMode::Convexified => {
            match convexified_potentials(&eq.scaled_log, cfg.tol.max(1e-5), 200) {
                Ok((beta, x, y, _, _)) => {
                    let u: Vec<f64> = x.iter().map(|&a| a.exp()).collect();
                    let v: Vec<f64> = y.iter().map(|&a| a.exp()).collect();
                    Ok((beta, u, v))
                }
                Err(e) => sinkhorn_start(&eq, cfg).map_err(|_| e),
            }
        }
        InitMode::Sinkhorn => sinkhorn_start(&eq, cfg),
    };
    let (mut beta, mut u, mut v) = initialized.unwrap_or_else(|_| {
        (
            DMatrix::from_element(n, n, 1.0 / n as f64),
            vec![1.0; n],
            vec![1.0; n],
        )
    });

    let lambda = cfg.damping;
    let mut clamped = false;
    let mut trace = Vec::new();
    let mut delta_trace: Vec<f64> = Vec::new();
    let mut last_residual = f64::INFINITY;

    for iter in 1..=cfg.max_iters {
        let mut rs = vec![0.0_f64; n];
        let mut cs = vec![0.0_f64; n];
        for j in 0..n {
            for i in 0..n {
                rs[i] += beta[(i, j)];
                cs[j] += beta[(i, j)];
            }
        }

        let mut next = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                let b = beta[(i, j)];
                let pij = p[(i, j)];
                let t = 0.5 * rs[i] + 0.5 * cs[j] - b;
                let fresh = if pij > 0.0 {
                    pij / (pij + t * t / (u[i] * v[j]))
                } else {
                    0.0
                };
                next[(i, j)] = lambda * b + (1.0 - lambda) * fresh;
            }
        }

        // Normalization: rows first, then columns.
        for i in 0..n {
            let s: f64 = (0..n).map(|j| next[(i, j)]).sum();
            if s > 0.0 {
                for j in 0..n {
                    next[(i, j)] /= s;
                }
            }
        }
        for j in 0..n {
            let s: f64 = (0..n).map(|i| next[(i, j)]).sum();
            if s > 0.0 {
                for i in 0..n {
                    next[(i, j)] /= s;
                }
            }
        }
        for b in next.iter_mut() {
            if *b < BELIEF_CLAMP || *b > 1.0 - BELIEF_CLAMP {
                clamped = true;
                *b = b.clamp(BELIEF_CLAMP, 1.0 - BELIEF_CLAMP);
            }
        }

        let delta = next
            .iter()
            .zip(beta.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        beta = next;

        // Potential updates, sequential.
        for i in 0..n {
            let numer = (1.0 - (0..n).map(|j| beta[(i, j)].powi(2)).sum::<f64>()).max(BELIEF_CLAMP);
            let denom: f64 = (0..n).map(|k| p[(i, k)] * v[k]).sum();
            u[i] = numer / denom;
        }
        for j in 0..n {
            let numer = (1.0 - (0..n).map(|i| beta[(i, j)].powi(2)).sum::<f64>()).max(BELIEF_CLAMP);
            let denom: f64 = (0..n).map(|k| p[(k, j)] * u[k]).sum();
            v[j] = numer / denom;
        }

        if cfg.track_free_energy {
            trace.push(free_energy_log(&beta, &eq.scaled_log) - eq.offset);
        }
        if delta_trace.len() >= 200 {
            delta_trace.remove(0);
        }
        delta_trace.push(delta);

        // Newton polish crushes the stiff tail the damped iteration crawls
        // through; attempted at convergence and periodically once close.
        if delta < cfg.tol || (iter % 100 == 0 && delta < 1e-3) {
            if let Some((beta_p, u_p, v_p, res)) =
                newton_polish(&eq.scaled_log, &beta, &u, &v, stationarity_gate(cfg.tol))
            {
                let x: Vec<f64> = u_p.iter().map(|a| a.ln()).collect();
                let y: Vec<f64> = v_p.iter().map(|a| a.ln()).collect();
                if cfg.track_free_energy {
                    trace.push(free_energy_log(&beta_p, &eq.scaled_log) - eq.offset);
                }
                return Ok(finalize_state(
                    beta_p, &x, &y, &eq, w, res, iter, clamped, trace,
                ));
            }
        }
        if delta < cfg.tol {
            last_residual = scaled_residual(&beta, &eq.scaled_log, &u, &v);
            if last_residual < stationarity_gate(cfg.tol) {
                let x: Vec<f64> = u.iter().map(|a| a.ln()).collect();
                let y: Vec<f64> = v.iter().map(|a| a.ln()).collect();
                return Ok(finalize_state(
                    beta,
                    &x,
                    &y,
                    &eq,
                    w,
                    last_residual,
                    iter,
                    clamped,
                    trace,
                ));
            }
        }
    }

    let x: Vec<f64> = u.iter().map(|a| a.ln()).collect();
    let y: Vec<f64> = v.iter().map(|a| a.ln()).collect();
    let residual = if last_residual.is_finite() {
        last_residual
    } else {
        scaled_residual(&beta, &eq.scaled_log, &u, &v)
    };
    let state = finalize_state(
        beta,
        &x,
        &y,
        &eq,
        w,
        residual,
        cfg.max_iters,
        clamped,
        trace,
    );
    Err(Error::BpNonConvergence {
        iterations: cfg.max_iters,
        residual,
        trace: delta_trace,
        state: Box::new(state),
    })
}

fn sinkhorn_start(eq: &Equilibration, cfg: &BpConfig) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let n = eq.scaled.nrows();
    // A loosely doubly stochastic start is all the damped iteration needs;
    // it renormalizes every sweep anyway.
    let beta = sinkhorn_beta(&eq.scaled_log, cfg.tol.max(1e-6), 5_000)?;
    // One potential pass to seed u, v consistently with these beliefs.
    let mut u = vec![1.0_f64; n];
    let mut v = vec![1.0_f64; n];
    for i in 0..n {
        let numer = (1.0 - (0..n).map(|j| beta[(i, j)].powi(2)).sum::<f64>()).max(BELIEF_CLAMP);
        let denom: f64 = (0..n).map(|k| eq.scaled[(i, k)] * v[k]).sum();
        u[i] = numer / denom;
    }
    for j in 0..n {
        let numer = (1.0 - (0..n).map(|i| beta[(i, j)].powi(2)).sum::<f64>()).max(BELIEF_CLAMP);
        let denom: f64 = (0..n).map(|k| eq.scaled[(k, j)] * u[k]).sum();
        v[j] = numer / denom;
    }
    Ok((beta, u, v))
}

/// Newton polish of the stationarity system at a fixed branch pattern.
///
/// With `m = p·u·v` each edge's belief is a root of `β(1−β) = m`; which root
/// is taken from the current iterate. The unknowns are the log potentials
/// (first one grounded against the gauge), the residuals are the row and
/// column sums minus one (the redundant first row equation is dropped).
/// Returns the polished state when the residual gate is met; `None` hands
/// control back to the damped iteration.
fn newton_polish(
    scaled_log: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    u: &[f64],
    v: &[f64],
    gate: f64,
) -> Option<(DMatrix<f64>, Vec<f64>, Vec<f64>, f64)> {
    let n = scaled_log.nrows();
    let upper: Vec<bool> = beta.iter().map(|b| *b > 0.5).collect();
    let is_upper = |i: usize, j: usize| upper[i + j * n]; // column-major

    let mut x: Vec<f64> = u.iter().map(|a| a.ln()).collect();
    let mut y: Vec<f64> = v.iter().map(|a| a.ln()).collect();
    if !(x.iter().chain(y.iter()).all(|a| a.is_finite())) {
        return None;
    }

    let beta_of = |x: &[f64], y: &[f64]| -> Option<DMatrix<f64>> {
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let m = (scaled_log[(i, j)] + x[i] + y[j]).exp();
                if !(m <= 0.25) {
                    return None; // branch point crossed; not polishable here
                }
                let s = (1.0 - 4.0 * m).sqrt();
                b[(i, j)] = if is_upper(i, j) { (1.0 + s) / 2.0 } else { (1.0 - s) / 2.0 };
            }
        }
        Some(b)
    };
    let residual_vec = |b: &DMatrix<f64>| -> Vec<f64> {
        let mut r = vec![0.0_f64; 2 * n];
        for i in 0..n {
            r[i] = (0..n).map(|j| b[(i, j)]).sum::<f64>() - 1.0;
        }
        for j in 0..n {
            r[n + j] = (0..n).map(|i| b[(i, j)]).sum::<f64>() - 1.0;
        }
        r
    };

    let mut b = beta_of(&x, &y)?;
    for _ in 0..50 {
        let r = residual_vec(&b);
        let worst = r.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if worst < 1e-12 {
            break;
        }
        // Jacobian dβ/d(x_i + y_j) = ±m/√(1−4m); grounded and with the
        // redundant first row equation dropped, it is square of size 2n−1:
        // variables (x_1.., y_0..), equations (row_1.., col_0..).
        let dim = 2 * n - 1;
        let mut jac: DMatrix<f64> = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                let m = (scaled_log[(i, j)] + x[i] + y[j]).exp();
                let s = (1.0 - 4.0 * m).sqrt().max(1e-9);
                let w = if is_upper(i, j) { -m / s } else { m / s };
                if i > 0 {
                    jac[(i - 1, i - 1)] += w;
                    jac[(i - 1, n - 1 + j)] += w;
                    jac[(n - 1 + j, i - 1)] += w;
                }
                jac[(n - 1 + j, n - 1 + j)] += w;
            }
        }
        let rhs = nalgebra::DVector::from_fn(dim, |k, _| {
            if k < n - 1 {
                -r[k + 1]
            } else {
                -r[n + (k - (n - 1))]
            }
        });
        let lu = jac.lu();
        let delta = lu.solve(&rhs)?;
        if !delta.iter().all(|d| d.is_finite()) {
            return None;
        }

        let mut tau = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut xc = x.clone();
            let mut yc = y.clone();
            for i in 1..n {
                xc[i] += tau * delta[i - 1];
            }
            for j in 0..n {
                yc[j] += tau * delta[n - 1 + j];
            }
            if let Some(bc) = beta_of(&xc, &yc) {
                let rc = residual_vec(&bc);
                let worst_c = rc.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                if worst_c < worst {
                    x = xc;
                    y = yc;
                    b = bc;
                    accepted = true;
                    break;
                }
            }
            tau *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    for e in b.iter_mut() {
        *e = e.clamp(BELIEF_CLAMP, 1.0 - BELIEF_CLAMP);
    }
    let u_new: Vec<f64> = x.iter().map(|a| a.exp()).collect();
    let v_new: Vec<f64> = y.iter().map(|a| a.exp()).collect();
    let res = scaled_residual(&b, scaled_log, &u_new, &v_new);
    if res < gate {
        Some((b, u_new, v_new, res))
    } else {
        None
    }
}

/// Max violation of the row/column sums and, on interior edges, of the
/// log-domain stationarity `ln β(1−β) = ln p + ln u + ln v`.
fn scaled_residual(beta: &DMatrix<f64>, scaled_log: &DMatrix<f64>, u: &[f64], v: &[f64]) -> f64 {
    let n = beta.nrows();
    let mut res = 0.0_f64;
    for i in 0..n {
        let s: f64 = (0..n).map(|j| beta[(i, j)]).sum();
        res = res.max((s - 1.0).abs());
    }
    for j in 0..n {
        let s: f64 = (0..n).map(|i| beta[(i, j)]).sum();
        res = res.max((s - 1.0).abs());
    }
    for i in 0..n {
        for j in 0..n {
            let b = beta[(i, j)];
            if b.min(1.0 - b) <= INTERIOR_CUTOFF {
                continue;
            }
            let lhs = (b * (1.0 - b)).ln();
            let rhs = scaled_log[(i, j)] + u[i].ln() + v[j].ln();
            res = res.max((lhs - rhs).abs());
        }
    }
    res
}

#[allow(clippy::too_many_arguments)]
fn finalize_state(
    beta: DMatrix<f64>,
    x_scaled: &[f64],
    y_scaled: &[f64],
    eq: &Equilibration,
    w: &WeightMatrix,
    residual: f64,
    iterations: usize,
    clamped: bool,
    free_energy_trace: Vec<f64>,
) -> BeliefState {
    let log_u: Vec<f64> = x_scaled
        .iter()
        .zip(eq.row_offset.iter())
        .map(|(x, a)| x - a)
        .collect();
    let log_v: Vec<f64> = y_scaled
        .iter()
        .zip(eq.col_offset.iter())
        .map(|(y, b)| y - b)
        .collect();
    let f_bp = bethe_free_energy(&beta, w);
    BeliefState {
        beta,
        log_u,
        log_v,
        f_bp,
        residual,
        iterations,
        clamped,
        free_energy_trace,
    }
}

/// Which edges count as committed matchings when decimating the problem
/// ahead of the saddle-point correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Polarization {
    /// An edge is committed when its belief exceeds `1 − eps`. Default
    /// reading, `eps = 0.01`.
    NearUnity(f64),
    /// An edge is polarized as soon as its belief exceeds the threshold
    /// itself. Aggressive: at 0.01 this decimates nearly every edge and the
    /// correction degenerates to the bare belief estimate. Selectable for
    /// comparison.
    Literal(f64),
}

impl Default for Polarization {
    fn default() -> Self {
        Polarization::NearUnity(0.01)
    }
}

/// Result of decimating committed matchings out of a problem.
#[derive(Debug, Clone)]
pub struct PrunedProblem {
    /// The reduced instance, or `None` when everything was committed.
    pub reduced: Option<WeightMatrix>,
    /// Original row indices that survived, in order.
    pub kept_rows: Vec<usize>,
    /// Original column indices that survived, in order.
    pub kept_cols: Vec<usize>,
    /// Committed edges in original indices.
    pub committed: Vec<(usize, usize)>,
    /// `Σ ln p` over committed edges; additive contribution to ln Z.
    pub committed_log_weight: f64,
}

/// Remove rows and columns involved in committed (polarized) matchings.
///
/// Candidate edges are ranked by belief and committed greedily so the
/// committed set is always a partial matching; under the near-unity
/// criterion with eps < 1/2 the candidates already form one.
pub fn prune_polarized(
    state: &BeliefState,
    w: &WeightMatrix,
    polarization: Polarization,
) -> Result<PrunedProblem> {
    let threshold = match polarization {
        Polarization::NearUnity(eps) => {
            if !(eps > 0.0 && eps < 0.5) {
                return Err(Error::domain("eps", format!("{eps} not in (0, 0.5)")));
            }
            1.0 - eps
        }
        Polarization::Literal(t) => {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::domain("threshold", format!("{t} not in (0, 1)")));
            }
            t
        }
    };
    let n = w.n();
    if state.beta.nrows() != n {
        return Err(Error::domain("beliefs", "size does not match weight matrix"));
    }

    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if state.beta[(i, j)] > threshold {
                candidates.push((i, j));
            }
        }
    }
    candidates.sort_by(|&(i1, j1), &(i2, j2)| {
        state.beta[(i2, j2)]
            .partial_cmp(&state.beta[(i1, j1)])
            .unwrap()
            .then(i1.cmp(&i2))
            .then(j1.cmp(&j2))
    });

    let mut row_used = vec![false; n];
    let mut col_used = vec![false; n];
    let mut committed = Vec::new();
    let mut committed_log_weight = 0.0;
    for (i, j) in candidates {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            committed_log_weight += w.log_entry(i, j);
            committed.push((i, j));
        }
    }

    let kept_rows: Vec<usize> = (0..n).filter(|&i| !row_used[i]).collect();
    let kept_cols: Vec<usize> = (0..n).filter(|&j| !col_used[j]).collect();
    let reduced = if kept_rows.is_empty() {
        None
    } else {
        Some(w.submatrix(&kept_rows, &kept_cols))
    };
    Ok(PrunedProblem {
        reduced,
        kept_rows,
        kept_cols,
        committed,
        committed_log_weight,
    })
}
