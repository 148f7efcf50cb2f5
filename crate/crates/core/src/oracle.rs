//! Exact ground truth at small sizes: permanents, matching marginals, and
//! exhaustive enumeration of the loop-series terms.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bp::BeliefState;
use crate::error::{Error, Result};
use crate::flow::WeightMatrix;
use crate::matcher::equilibrate;

/// Hard cap for Ryser's method. Above n ≈ 20 the inclusion–exclusion sum
/// gradually loses digits to cancellation; results near the cap carry a few
/// units in the 8th digit.
pub const MAX_EXACT_PERMANENT: usize = 24;
/// Cap for exact marginals (n² permanents of size n−1).
pub const MAX_EXACT_MARGINALS: usize = 12;
/// Cap for exhaustive generalized-loop enumeration (2^{n²} subsets).
pub const MAX_LOOP_ENUMERATION: usize = 4;
/// Cap for the permutation-enumeration reference.
pub const MAX_ENUMERATION: usize = 10;

/// `ln per(w)` by Ryser's inclusion–exclusion with Gray-code subset updates.
///
/// The matrix is first rescaled by the assignment duals so its permanent lies
/// in [1, n!]; partial products then stay far from both f64 range limits and
/// the offset is restored at the end.
pub fn permanent_exact(w: &WeightMatrix) -> Result<f64> {
    let n = w.n();
    if n > MAX_EXACT_PERMANENT {
        return Err(Error::TooLarge {
            n,
            max: MAX_EXACT_PERMANENT,
        });
    }
    let eq = equilibrate(w)?;
    let a = &eq.scaled;

    let mut row_sums = vec![0.0_f64; n];
    let mut subset: u64 = 0;
    let mut popcount: usize = 0;
    let mut total = 0.0_f64;
    let mut compensation = 0.0_f64; // Kahan term for the alternating sum
    for k in 1u64..(1u64 << n) {
        let flip = k.trailing_zeros() as usize;
        let mask = 1u64 << flip;
        subset ^= mask;
        if subset & mask != 0 {
            popcount += 1;
            for i in 0..n {
                row_sums[i] += a[(i, flip)];
            }
        } else {
            popcount -= 1;
            for i in 0..n {
                row_sums[i] -= a[(i, flip)];
            }
        }
        let product: f64 = row_sums.iter().product();
        let term = if (n - popcount) % 2 == 0 {
            product
        } else {
            -product
        };
        let y = term - compensation;
        let t = total + y;
        compensation = (t - total) - y;
        total = t;
    }

    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Singular(format!(
            "Ryser sum evaluated to {total}; cancellation exhausted f64 precision"
        )));
    }
    Ok(total.ln() + eq.offset)
}

/// `ln per(w)` by direct summation over all n! permutations, entirely in the
/// log domain. Reference implementation for validating [`permanent_exact`];
/// never used in the estimation pipeline.
pub fn permanent_enumeration(w: &WeightMatrix) -> Result<f64> {
    let n = w.n();
    if n > MAX_ENUMERATION {
        return Err(Error::TooLarge {
            n,
            max: MAX_ENUMERATION,
        });
    }
    let log = w.log_entries();
    let mut terms = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    heap_permutations(&mut perm, n, &mut |p| {
        terms.push((0..n).map(|i| log[(i, p[i])]).sum::<f64>());
    });
    Ok(log_sum_exp(&terms))
}

fn heap_permutations(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == 1 {
        visit(items);
        return;
    }
    for i in 0..k {
        heap_permutations(items, k - 1, visit);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Exact edge marginals: entry (i, j) is the probability that i matches j,
/// `p_i^j · per(minor_ij) / per(w)`. Every row and column sums to one.
pub fn marginals_exact(w: &WeightMatrix) -> Result<DMatrix<f64>> {
    let n = w.n();
    if n > MAX_EXACT_MARGINALS {
        return Err(Error::TooLarge {
            n,
            max: MAX_EXACT_MARGINALS,
        });
    }
    let ln_full = permanent_exact(w)?;
    let mut m = DMatrix::zeros(n, n);
    if n == 1 {
        m[(0, 0)] = 1.0;
        return Ok(m);
    }
    for i in 0..n {
        for j in 0..n {
            let ln_minor = permanent_exact(&w.minor(i, j))?;
            m[(i, j)] = (w.log_entry(i, j) + ln_minor - ln_full).exp();
        }
    }
    Ok(m)
}

/// A generalized loop: an edge subset of the complete bipartite graph in
/// which every touched vertex has degree at least two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneralizedLoop {
    n: usize,
    edges: Vec<(usize, usize)>,
    row_degree: Vec<usize>,
    col_degree: Vec<usize>,
}

impl GeneralizedLoop {
    pub fn from_edges(n: usize, mut edges: Vec<(usize, usize)>) -> Option<Self> {
        edges.sort_unstable();
        edges.dedup();
        let mut row_degree = vec![0usize; n];
        let mut col_degree = vec![0usize; n];
        for &(i, j) in &edges {
            if i >= n || j >= n {
                return None;
            }
            row_degree[i] += 1;
            col_degree[j] += 1;
        }
        if edges.is_empty()
            || row_degree.iter().chain(col_degree.iter()).any(|&d| d == 1)
        {
            return None;
        }
        Some(GeneralizedLoop {
            n,
            edges,
            row_degree,
            col_degree,
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn row_degree(&self, i: usize) -> usize {
        self.row_degree[i]
    }

    pub fn col_degree(&self, j: usize) -> usize {
        self.col_degree[j]
    }

    /// Number of vertices the loop touches.
    pub fn vertex_count(&self) -> usize {
        self.row_degree.iter().filter(|&&d| d > 0).count()
            + self.col_degree.iter().filter(|&&d| d > 0).count()
    }
}

/// All generalized loops of the complete bipartite graph K_{n,n}, by
/// filtering the 2^{n²} edge subsets. Test-scale only.
pub fn enumerate_generalized_loops(n: usize) -> Result<Vec<GeneralizedLoop>> {
    if n > MAX_LOOP_ENUMERATION {
        return Err(Error::TooLarge {
            n,
            max: MAX_LOOP_ENUMERATION,
        });
    }
    let m = n * n;
    let mut loops = Vec::new();
    'subsets: for mask in 1u32..(1u32 << m) {
        let mut row_degree = vec![0usize; n];
        let mut col_degree = vec![0usize; n];
        let mut edges = Vec::new();
        for bit in 0..m {
            if mask & (1 << bit) != 0 {
                let (i, j) = (bit / n, bit % n);
                row_degree[i] += 1;
                col_degree[j] += 1;
                edges.push((i, j));
            }
        }
        for d in row_degree.iter().chain(col_degree.iter()) {
            if *d == 1 {
                continue 'subsets;
            }
        }
        loops.push(GeneralizedLoop {
            n,
            edges,
            row_degree,
            col_degree,
        });
    }
    Ok(loops)
}

/// Random generalized loops built as unions of alternating cycles; used for
/// sampled bound checks at sizes where enumeration is impossible.
pub fn sample_generalized_loops(n: usize, count: usize, seed: u64) -> Vec<GeneralizedLoop> {
    assert!(n >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let cycles = rng.random_range(1..=3usize);
        let mut edges = Vec::new();
        for _ in 0..cycles {
            let k = rng.random_range(2..=n.min(5));
            let rows = sample_distinct(&mut rng, n, k);
            let cols = sample_distinct(&mut rng, n, k);
            for t in 0..k {
                edges.push((rows[t], cols[t]));
                edges.push((rows[(t + 1) % k], cols[t]));
            }
        }
        if let Some(lp) = GeneralizedLoop::from_edges(n, edges) {
            out.push(lp);
        }
    }
    out
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for t in 0..k {
        let pick = rng.random_range(t..n);
        pool.swap(t, pick);
    }
    pool.truncate(k);
    pool
}

/// One loop-series term
/// `r_C = Π_i (1 − q_i) · Π_j (1 − q^j) · Π_{(i,j) ∈ C} β/(1 − β)`.
pub fn loop_term(lp: &GeneralizedLoop, beta: &DMatrix<f64>) -> f64 {
    let mut r = 1.0;
    for (i, &d) in lp.row_degree.iter().enumerate() {
        if d > 0 {
            r *= 1.0 - d as f64;
        }
        let _ = i;
    }
    for &d in &lp.col_degree {
        if d > 0 {
            r *= 1.0 - d as f64;
        }
    }
    for &(i, j) in &lp.edges {
        let b = clamp_unit(beta[(i, j)]);
        r *= b / (1.0 - b);
    }
    r
}

/// Per-vertex split of a loop term:
/// `ψ_{i;C} = (1 − q_i) Π_{j:(i,j)∈C} sqrt(β/(1−β))` and its column analogue.
/// Returns `(row factors, column factors)` for the touched vertices.
pub fn node_factors(
    lp: &GeneralizedLoop,
    beta: &DMatrix<f64>,
) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for (i, &d) in lp.row_degree.iter().enumerate() {
        if d == 0 {
            continue;
        }
        let mut psi = 1.0 - d as f64;
        for &(ei, ej) in &lp.edges {
            if ei == i {
                let b = clamp_unit(beta[(ei, ej)]);
                psi *= (b / (1.0 - b)).sqrt();
            }
        }
        rows.push((i, psi));
    }
    for (j, &d) in lp.col_degree.iter().enumerate() {
        if d == 0 {
            continue;
        }
        let mut psi = 1.0 - d as f64;
        for &(ei, ej) in &lp.edges {
            if ej == j {
                let b = clamp_unit(beta[(ei, ej)]);
                psi *= (b / (1.0 - b)).sqrt();
            }
        }
        cols.push((j, psi));
    }
    (rows, cols)
}

fn clamp_unit(b: f64) -> f64 {
    b.clamp(1e-15, 1.0 - 1e-15)
}

/// The exhaustively enumerated loop series at a belief fixed point.
#[derive(Debug, Clone)]
pub struct LoopSeriesExact {
    /// `z = 1 + Σ_C r_C`; the exact multiplicative correction to Z_BP.
    pub z: f64,
    /// One term per generalized loop, aligned with `loops`.
    pub terms: Vec<f64>,
    pub loops: Vec<GeneralizedLoop>,
}

/// Enumerate every generalized loop and its term at the given fixed point.
pub fn loop_series_exact(beliefs: &BeliefState) -> Result<LoopSeriesExact> {
    let n = beliefs.beta.nrows();
    let loops = enumerate_generalized_loops(n)?;
    let terms: Vec<f64> = loops.iter().map(|lp| loop_term(lp, &beliefs.beta)).collect();
    let z = 1.0 + terms.iter().sum::<f64>();
    Ok(LoopSeriesExact { z, terms, loops })
}
