//! Exact maximum-weight matching (the most probable assignment) and the
//! dual potentials it produces.
//!
//! The duals double as a diagonal equilibration of the weight matrix: with
//! `a_i + b_j ≥ ln p_i^j` (equality on the optimal matching) the rescaled
//! matrix `exp(ln p − a − b)` has entries in (0, 1] and a permanent in
//! [1, n!], which keeps every downstream exact or iterative computation
//! inside f64 range no matter how extreme the raw weights are.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::flow::WeightMatrix;

/// Result of the exact assignment problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `permutation[i]` is the column matched to row `i`.
    pub permutation: Vec<usize>,
    /// Total log-weight of the matching.
    pub log_weight: f64,
}

/// The permutation maximizing the summed log-weights, by shortest augmenting
/// paths with potentials (Jonker–Volgenant family).
///
/// Exact ties are resolved toward the lexicographically smallest permutation
/// by a pairwise exchange pass; improvements that require rotating three or
/// more tied edges at once are not searched.
pub fn max_weight_matching(w: &WeightMatrix) -> Result<Matching> {
    let duals = solve_assignment(w.log_entries())?;
    let mut permutation = duals.permutation.clone();
    lexicographic_polish(w.log_entries(), &mut permutation);
    let log_weight = (0..w.n()).map(|i| w.log_entry(i, permutation[i])).sum();
    Ok(Matching {
        permutation,
        log_weight,
    })
}

/// Assignment solution together with dual potentials satisfying
/// `row[i] + col[j] >= profit[(i, j)]`, with equality on matched edges.
#[derive(Debug, Clone)]
pub(crate) struct AssignmentDuals {
    pub permutation: Vec<usize>,
    pub row: Vec<f64>,
    pub col: Vec<f64>,
}

/// Diagonally rescaled copy of a weight matrix.
#[derive(Debug, Clone)]
pub(crate) struct Equilibration {
    /// `exp(scaled_log)`, entries in (0, 1] up to rounding.
    pub scaled: DMatrix<f64>,
    /// `ln p − a_i − b_j`, all entries ≤ ~0.
    pub scaled_log: DMatrix<f64>,
    pub row_offset: Vec<f64>,
    pub col_offset: Vec<f64>,
    /// `Σ a + Σ b`; `ln per(original) = ln per(scaled) + offset`.
    pub offset: f64,
}

pub(crate) fn equilibrate(w: &WeightMatrix) -> Result<Equilibration> {
    let duals = solve_assignment(w.log_entries())?;
    let n = w.n();
    let scaled_log = DMatrix::from_fn(n, n, |i, j| {
        w.log_entry(i, j) - duals.row[i] - duals.col[j]
    });
    let offset = duals.row.iter().sum::<f64>() + duals.col.iter().sum::<f64>();
    Ok(Equilibration {
        scaled: scaled_log.map(f64::exp),
        scaled_log,
        row_offset: duals.row,
        col_offset: duals.col,
        offset,
    })
}

/// Shortest-augmenting-path assignment on profits (maximization). O(n³).
pub(crate) fn solve_assignment(profit: &DMatrix<f64>) -> Result<AssignmentDuals> {
    let n = profit.nrows();
    // Internally minimize cost = -profit with feasible duals u, v
    // (u[i] + v[j] <= cost[(i, j)]).
    let mut u = vec![0.0_f64; n];
    let mut v = vec![0.0_f64; n];
    let mut row_at_col: Vec<Option<usize>> = vec![None; n];
    let mut col_at_row: Vec<Option<usize>> = vec![None; n];

    for cur_row in 0..n {
        let mut shortest = vec![f64::INFINITY; n];
        let mut path = vec![usize::MAX; n];
        let mut done_col = vec![false; n];
        let mut in_tree_row = vec![false; n];
        let mut min_val = 0.0_f64;
        let mut i = cur_row;
        let mut sink = usize::MAX;

        while sink == usize::MAX {
            in_tree_row[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = usize::MAX;
            for j in 0..n {
                if done_col[j] {
                    continue;
                }
                let reduced = min_val + (-profit[(i, j)]) - u[i] - v[j];
                if reduced < shortest[j] {
                    shortest[j] = reduced;
                    path[j] = i;
                }
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row_at_col[j].is_none() && index != usize::MAX
                        && row_at_col[index].is_some())
                {
                    lowest = shortest[j];
                    index = j;
                }
            }
            if !lowest.is_finite() {
                return Err(Error::Infeasible(
                    "no augmenting path with finite weight".into(),
                ));
            }
            min_val = lowest;
            done_col[index] = true;
            match row_at_col[index] {
                None => sink = index,
                Some(r) => i = r,
            }
        }

        u[cur_row] += min_val;
        for r in 0..n {
            if in_tree_row[r] && r != cur_row {
                u[r] += min_val - shortest[col_at_row[r].unwrap()];
            }
        }
        for j in 0..n {
            if done_col[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row_at_col[j] = Some(r);
            let next = col_at_row[r];
            col_at_row[r] = Some(j);
            if r == cur_row {
                break;
            }
            j = next.unwrap();
        }
    }

    let permutation: Vec<usize> = col_at_row.into_iter().map(|c| c.unwrap()).collect();
    // Back to maximization: profit[(i, j)] <= row[i] + col[j].
    let row: Vec<f64> = u.into_iter().map(|x| -x).collect();
    let col: Vec<f64> = v.into_iter().map(|x| -x).collect();
    Ok(AssignmentDuals {
        permutation,
        row,
        col,
    })
}

/// Exchange pairs of tied edges until the permutation is a 2-swap-local
/// lexicographic minimum among optima. Equality is exact, so only genuine
/// ties move.
fn lexicographic_polish(log: &DMatrix<f64>, perm: &mut [usize]) {
    let n = perm.len();
    loop {
        let mut changed = false;
        for i in 0..n {
            for k in i + 1..n {
                if perm[i] > perm[k] {
                    let keep = log[(i, perm[i])] + log[(k, perm[k])];
                    let swap = log[(i, perm[k])] + log[(k, perm[i])];
                    if keep == swap {
                        perm.swap(i, k);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(log: &DMatrix<f64>) -> (Vec<usize>, f64) {
        let n = log.nrows();
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut perm: Vec<usize> = (0..n).collect();
        permute(&mut perm, 0, &mut |p| {
            let w: f64 = (0..n).map(|i| log[(i, p[i])]).sum();
            if w > best.1 {
                best = (p.to_vec(), w);
            }
        });
        best
    }

    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    fn random_matrix(n: usize, seed: u64) -> WeightMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WeightMatrix::from_log(DMatrix::from_fn(n, n, |_, _| rng.random_range(-5.0..5.0)))
            .unwrap()
    }

    #[test]
    fn diagonal_dominant_picks_identity() {
        let w = WeightMatrix::from_entries(DMatrix::from_fn(4, 4, |i, j| {
            if i == j {
                10.0
            } else {
                0.1
            }
        }))
        .unwrap();
        let m = max_weight_matching(&w).unwrap();
        assert_eq!(m.permutation, vec![0, 1, 2, 3]);
    }

    #[test]
    fn two_by_two_example() {
        let w =
            WeightMatrix::from_entries(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]))
                .unwrap();
        let m = max_weight_matching(&w).unwrap();
        assert_eq!(m.permutation, vec![0, 1]);
        assert_relative_eq!(m.log_weight, 4.0_f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn all_ones_breaks_ties_lexicographically() {
        let w = WeightMatrix::from_entries(DMatrix::from_element(5, 5, 1.0)).unwrap();
        let m = max_weight_matching(&w).unwrap();
        assert_eq!(m.permutation, vec![0, 1, 2, 3, 4]);
        assert_relative_eq!(m.log_weight, 0.0, max_relative = 1e-14);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        for n in 2..=8 {
            for seed in 0..12 {
                let w = random_matrix(n, seed + 100 * n as u64);
                let m = max_weight_matching(&w).unwrap();
                let (_, best) = brute_force(w.log_entries());
                assert_relative_eq!(m.log_weight, best, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn row_scaling_leaves_argmax_unchanged() {
        let w = random_matrix(6, 7);
        let m = max_weight_matching(&w).unwrap();
        let scale = 3.7_f64;
        let mut log = w.log_entries().clone();
        for j in 0..6 {
            log[(2, j)] += scale.ln();
        }
        let scaled = WeightMatrix::from_log(log).unwrap();
        let ms = max_weight_matching(&scaled).unwrap();
        assert_eq!(m.permutation, ms.permutation);
        assert_relative_eq!(ms.log_weight, m.log_weight + scale.ln(), max_relative = 1e-12);
    }

    #[test]
    fn duals_are_feasible_and_tight() {
        for seed in 0..8 {
            let w = random_matrix(7, 500 + seed);
            let eq = equilibrate(&w).unwrap();
            for i in 0..7 {
                for j in 0..7 {
                    assert!(
                        eq.scaled_log[(i, j)] <= 1e-9,
                        "dual feasibility violated at ({i},{j}): {}",
                        eq.scaled_log[(i, j)]
                    );
                }
            }
            // The optimal matching sits on (numerically) zero reduced weights.
            let duals = solve_assignment(w.log_entries()).unwrap();
            for (i, &j) in duals.permutation.iter().enumerate() {
                assert!(eq.scaled_log[(i, j)].abs() < 1e-9);
            }
        }
    }
}
