//! Stochastic reference estimator: annealed importance sampling over
//! permutations.
//!
//! The target at inverse temperature t is ∝ exp(t Σ ln p_{i,π(i)}); at t = 0
//! it is uniform with known ln Z₀ = ln N!. Metropolis moves anneal each chain
//! up a temperature ladder and the telescoped weights give an unbiased
//! estimate of Z/Z₀. Validated against the exact oracle at small sizes; no
//! polynomial-time approximation guarantee is claimed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::WeightMatrix;
use crate::oracle::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoveKind {
    /// Swap the targets of two rows.
    Transposition,
    /// Rotate the targets of three rows.
    ThreeCycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Number of intermediate temperatures (excluding t = 0).
    pub n_temps: usize,
    /// Metropolis sweeps per temperature; one sweep proposes n moves.
    pub sweeps_per_temp: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub move_kind: MoveKind,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_temps: 100,
            sweeps_per_temp: 50,
            n_chains: 16,
            seed: 0,
            move_kind: MoveKind::Transposition,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcResult {
    pub ln_z_mean: f64,
    /// Jackknife standard error over chains.
    pub ln_z_stderr: f64,
    /// Mean acceptance per ladder temperature, index 0 = t = 0.
    pub acceptance_rates: Vec<f64>,
    /// Effective number of chains given the weight spread.
    pub ess_estimate: f64,
}

/// Geometric ladder 0 = t₀ < t₁ < … < t_K = 1 (the nonzero part is
/// geometric from 1e-3).
fn ladder(n_temps: usize) -> Vec<f64> {
    const T_MIN: f64 = 1e-3;
    let mut ts = Vec::with_capacity(n_temps + 1);
    ts.push(0.0);
    if n_temps == 1 {
        ts.push(1.0);
        return ts;
    }
    for k in 0..n_temps {
        let frac = k as f64 / (n_temps - 1) as f64;
        ts.push(T_MIN * (1.0 / T_MIN).powf(frac));
    }
    ts
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Annealed importance sampling estimate of ln per(w).
///
/// Chains run independently (stream-separated generators derived from the
/// seed and chain index) and reduce in chain order, so the result does not
/// depend on the worker count.
pub fn estimate(w: &WeightMatrix, cfg: &McmcConfig) -> Result<McmcResult> {
    let n = w.n();
    if n < 2 {
        return Err(Error::domain("n", "annealing needs at least 2 particles"));
    }
    if cfg.n_temps == 0 || cfg.sweeps_per_temp == 0 || cfg.n_chains == 0 {
        return Err(Error::domain("mcmc config", "all counts must be at least 1"));
    }
    if w
        .log_entries()
        .row_iter()
        .any(|r| r.iter().all(|l| *l == f64::NEG_INFINITY))
    {
        return Err(Error::Infeasible("a row has no finite-weight match".into()));
    }

    let ts = ladder(cfg.n_temps);
    let chains: Vec<ChainOutcome> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(w, cfg, &ts, c as u64))
        .collect();

    let weights: Vec<f64> = chains.iter().map(|c| c.ln_weight).collect();
    let ln_ratio = log_sum_exp(&weights) - (cfg.n_chains as f64).ln();
    let ln_z_mean = ln_factorial(n) + ln_ratio;

    let ln_z_stderr = if cfg.n_chains > 1 {
        let mut jack = Vec::with_capacity(cfg.n_chains);
        for drop in 0..cfg.n_chains {
            let rest: Vec<f64> = weights
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != drop)
                .map(|(_, w)| *w)
                .collect();
            jack.push(log_sum_exp(&rest) - (rest.len() as f64).ln());
        }
        let mean = jack.iter().sum::<f64>() / jack.len() as f64;
        let var =
            jack.iter().map(|j| (j - mean) * (j - mean)).sum::<f64>() * (jack.len() - 1) as f64
                / jack.len() as f64;
        var.sqrt()
    } else {
        f64::INFINITY
    };

    let max_w = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum1: f64 = weights.iter().map(|w| (w - max_w).exp()).sum();
    let sum2: f64 = weights.iter().map(|w| (2.0 * (w - max_w)).exp()).sum();
    let ess_estimate = sum1 * sum1 / sum2;

    let mut acceptance_rates = vec![0.0; ts.len()];
    for c in &chains {
        for (k, rate) in c.acceptance.iter().enumerate() {
            acceptance_rates[k] += rate / cfg.n_chains as f64;
        }
    }

    Ok(McmcResult {
        ln_z_mean,
        ln_z_stderr,
        acceptance_rates,
        ess_estimate,
    })
}

struct ChainOutcome {
    ln_weight: f64,
    acceptance: Vec<f64>,
}

fn run_chain(w: &WeightMatrix, cfg: &McmcConfig, ts: &[f64], chain: u64) -> ChainOutcome {
    let n = w.n();
    let log = w.log_entries();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain + 1);

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut log_like: f64 = (0..n).map(|i| log[(i, perm[i])]).sum();

    let mut ln_weight = 0.0;
    let mut acceptance = Vec::with_capacity(ts.len());
    for (k, &t) in ts.iter().enumerate() {
        if k > 0 {
            // Importance increment uses the state equilibrated at the
            // previous temperature.
            ln_weight += (t - ts[k - 1]) * log_like;
        }
        let mut accepted = 0usize;
        let proposals = cfg.sweeps_per_temp * n;
        for _ in 0..proposals {
            let delta = match cfg.move_kind {
                MoveKind::Transposition => {
                    let a = rng.random_range(0..n);
                    let mut b = rng.random_range(0..n - 1);
                    if b >= a {
                        b += 1;
                    }
                    let d = log[(a, perm[b])] + log[(b, perm[a])]
                        - log[(a, perm[a])]
                        - log[(b, perm[b])];
                    if accept(&mut rng, t * d) {
                        perm.swap(a, b);
                        Some(d)
                    } else {
                        None
                    }
                }
                MoveKind::ThreeCycle => {
                    let (a, b, c) = distinct_triple(&mut rng, n);
                    let d = log[(a, perm[b])] + log[(b, perm[c])] + log[(c, perm[a])]
                        - log[(a, perm[a])]
                        - log[(b, perm[b])]
                        - log[(c, perm[c])];
                    if accept(&mut rng, t * d) {
                        let tmp = perm[a];
                        perm[a] = perm[b];
                        perm[b] = perm[c];
                        perm[c] = tmp;
                        Some(d)
                    } else {
                        None
                    }
                }
            };
            if let Some(d) = delta {
                log_like += d;
                accepted += 1;
            }
        }
        acceptance.push(accepted as f64 / proposals as f64);
    }
    ChainOutcome {
        ln_weight,
        acceptance,
    }
}

fn accept(rng: &mut ChaCha8Rng, log_ratio: f64) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

fn distinct_triple(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize, usize) {
    debug_assert!(n >= 3);
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    let mut c = rng.random_range(0..n - 2);
    for bound in [a.min(b), a.max(b)] {
        if c >= bound {
            c += 1;
        }
    }
    (a, b, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    fn random_instance(n: usize, seed: u64) -> WeightMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WeightMatrix::from_log(DMatrix::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0)))
            .unwrap()
    }

    #[test]
    fn uniform_weights_recover_factorial() {
        let w = WeightMatrix::from_entries(DMatrix::from_element(5, 5, 1.0)).unwrap();
        let cfg = McmcConfig {
            seed: 7,
            ..McmcConfig::default()
        };
        let res = estimate(&w, &cfg).unwrap();
        let truth = (1..=5).map(|k| (k as f64).ln()).sum::<f64>();
        assert!(
            (res.ln_z_mean - truth).abs() <= 3.0 * res.ln_z_stderr.max(1e-12),
            "ln Z {} vs ln 120 {truth} (stderr {})",
            res.ln_z_mean,
            res.ln_z_stderr
        );
    }

    #[test]
    fn stderr_shrinks_with_more_chains() {
        let w = random_instance(5, 17);
        let narrow = estimate(
            &w,
            &McmcConfig {
                n_chains: 8,
                seed: 7,
                ..McmcConfig::default()
            },
        )
        .unwrap();
        let wide = estimate(
            &w,
            &McmcConfig {
                n_chains: 64,
                seed: 7,
                ..McmcConfig::default()
            },
        )
        .unwrap();
        assert!(
            wide.ln_z_stderr < narrow.ln_z_stderr,
            "stderr {} vs {}",
            wide.ln_z_stderr,
            narrow.ln_z_stderr
        );
    }

    #[test]
    fn matches_exact_permanent_within_error_bars() {
        for seed in 0..4 {
            let w = random_instance(10, 40 + seed);
            let cfg = McmcConfig {
                seed: 1000 + seed,
                ..McmcConfig::default()
            };
            let res = estimate(&w, &cfg).unwrap();
            let truth = oracle::permanent_exact(&w).unwrap();
            assert!(
                (res.ln_z_mean - truth).abs() <= 3.0 * res.ln_z_stderr,
                "seed {seed}: {} vs {truth}, stderr {}",
                res.ln_z_mean,
                res.ln_z_stderr
            );
        }
    }

    #[test]
    fn three_cycle_moves_agree() {
        let w = random_instance(8, 3);
        let cfg = McmcConfig {
            move_kind: MoveKind::ThreeCycle,
            seed: 5,
            n_chains: 32,
            ..McmcConfig::default()
        };
        let res = estimate(&w, &cfg).unwrap();
        let truth = oracle::permanent_exact(&w).unwrap();
        assert!((res.ln_z_mean - truth).abs() <= 3.0 * res.ln_z_stderr);
    }

    #[test]
    fn deterministic_given_seed() {
        let w = random_instance(7, 11);
        let cfg = McmcConfig {
            seed: 99,
            n_chains: 8,
            ..McmcConfig::default()
        };
        let a = estimate(&w, &cfg).unwrap();
        let b = estimate(&w, &cfg).unwrap();
        assert_eq!(a.ln_z_mean, b.ln_z_mean);
        assert_eq!(a.ln_z_stderr, b.ln_z_stderr);
        assert_eq!(a.acceptance_rates, b.acceptance_rates);
    }

    #[test]
    fn acceptance_is_total_at_infinite_temperature() {
        let w = random_instance(6, 2);
        let res = estimate(
            &w,
            &McmcConfig {
                seed: 3,
                n_chains: 4,
                n_temps: 20,
                sweeps_per_temp: 10,
                ..McmcConfig::default()
            },
        )
        .unwrap();
        assert_eq!(res.acceptance_rates[0], 1.0);
        assert!(res.ess_estimate >= 1.0);
    }

    #[test]
    fn rejects_tiny_instances() {
        let w = WeightMatrix::from_entries(DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!(estimate(&w, &McmcConfig::default()).is_err());
    }
}
