//! Low- and high-biased price estimates.
//!
//! The lower bound averages the discounted payoff of the learned stopping
//! rule on fresh paths. The upper bound evaluates the dual pathwise maximum
//! `max_n (G_n - m_n)` against the martingale induced by the same rule, where
//! the conditional expectations inside the martingale come from inner
//! simulations branched off each outer path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Grid, Market, MaxCall, Payoff, PathBatch};
use crate::rng::{RngStreamKey, StreamFamily};
use crate::stats::{z_two_sided, Summary};
use crate::stopping::{stop_decision, stopping_times_from, ExerciseRule, EVAL_CHUNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualConfig {
    /// Outer paths `K_U`.
    pub outer_paths: usize,
    /// Inner paths per outer path and date.
    pub inner_paths: usize,
}

impl DualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_paths < 2 {
            return Err(Error::invalid("dual.outer_paths", "need at least 2 outer paths"));
        }
        if self.inner_paths < 2 {
            return Err(Error::invalid("dual.inner_paths", "need at least 2 inner paths"));
        }
        Ok(())
    }
}

/// Result of the dual estimate together with per-date increment diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    /// Mean and sample SD of `max_n (G_n - m_n)` over outer paths.
    pub estimate: Summary,
    /// `increments[n - 1]` summarizes `m_n - m_{n-1}` over outer paths.
    pub increments: Vec<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceEstimate {
    pub l_hat: f64,
    pub sigma_l: f64,
    pub u_hat: f64,
    pub sigma_u: f64,
    pub v_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub k_l: u64,
    pub k_u: u64,
    pub j_inner: usize,
    pub alpha: f64,
}

impl PriceEstimate {
    /// `U + 3 sigma_U / sqrt(K_U) >= L - 3 sigma_L / sqrt(K_L)`.
    pub fn duality_holds(&self) -> bool {
        let se_l = self.sigma_l / (self.k_l as f64).sqrt();
        let se_u = self.sigma_u / (self.k_u as f64).sqrt();
        self.u_hat + 3.0 * se_u >= self.l_hat - 3.0 * se_l
    }

    /// Standard error of `V_hat` treating the two bounds as independent.
    pub fn v_std_error(&self) -> f64 {
        let se_l = self.sigma_l / (self.k_l as f64).sqrt();
        let se_u = self.sigma_u / (self.k_u as f64).sqrt();
        0.5 * (se_l * se_l + se_u * se_u).sqrt()
    }
}

/// Discounted payoff at the rule's stopping time on every path of an exercise-grid batch.
pub fn stopped_payoffs(rule: &dyn ExerciseRule, payoff: &dyn Payoff, batch: &PathBatch) -> Vec<f64> {
    assert_eq!(batch.grid, Grid::Exercise);
    let ids: Vec<usize> = (0..batch.n_paths).collect();
    ids.par_chunks(EVAL_CHUNK)
        .flat_map_iter(|chunk| {
            let tau = stopping_times_from(rule, payoff, 0, chunk.len(), |i, n| batch.state(chunk[i], n));
            chunk
                .iter()
                .zip(tau)
                .map(|(&k, t)| payoff.value(t, batch.state(k, t)))
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn lower_bound_on(rule: &dyn ExerciseRule, payoff: &dyn Payoff, batch: &PathBatch) -> Summary {
    Summary::of(&stopped_payoffs(rule, payoff, batch))
}

/// Low-biased estimate on `k_l` fresh paths; path `k` uses stream `key.index + k`.
///
/// Paths are generated and discarded chunk by chunk, so memory stays flat in `k_l`.
pub fn lower_bound(rule: &dyn ExerciseRule, market: &Market, k_l: usize, key: RngStreamKey) -> Summary {
    let payoff = market.payoff();
    let times = market.exercise_times().to_vec();
    let d = market.dim();
    let starts: Vec<usize> = (0..k_l).step_by(EVAL_CHUNK).collect();
    let values: Vec<f64> = starts
        .par_iter()
        .flat_map_iter(|&start| {
            let rows = EVAL_CHUNK.min(k_l - start);
            let batch = PathBatch {
                values: market.simulate_on(&times, rows, key.with_index(key.index + start as u64)),
                times: times.clone(),
                grid: Grid::Exercise,
                n_paths: rows,
                dim: d,
                extended: false,
            };
            let tau = stopping_times_from(rule, &payoff, 0, rows, |i, n| batch.state(i, n));
            (0..rows).map(|i| payoff.value(tau[i], batch.state(i, tau[i]))).collect::<Vec<_>>()
        })
        .collect();
    Summary::of(&values)
}

/// Left endpoint `L - z_{alpha/2} sigma_L / sqrt(K_L)` of the one-sided interval.
pub fn one_sided_ci(l_hat: f64, sigma_l: f64, k_l: u64, alpha: f64) -> f64 {
    l_hat - z_two_sided(alpha) * sigma_l / (k_l as f64).sqrt()
}

pub fn point_and_interval(lower: &Summary, upper: &Summary, alpha: f64, j_inner: usize) -> PriceEstimate {
    let z = z_two_sided(alpha);
    PriceEstimate {
        l_hat: lower.mean,
        sigma_l: lower.std_dev,
        u_hat: upper.mean,
        sigma_u: upper.std_dev,
        v_hat: 0.5 * (lower.mean + upper.mean),
        ci_low: lower.mean - z * lower.std_error(),
        ci_high: upper.mean + z * upper.std_error(),
        k_l: lower.count,
        k_u: upper.count,
        j_inner,
        alpha,
    }
}

/// Estimates `E[G_{tau_{n+1}} | X_n = x]`, the value of continuing at date `n`
/// and following the rule afterwards.
pub trait ContinuationEstimator: Sync {
    /// `outer` identifies the outer path, so estimates for distinct
    /// `(outer, n)` pairs can draw from independent streams.
    fn estimate(&self, n: usize, x: &[f64], outer: u64) -> f64;
}

/// Inner Monte Carlo: `inner_paths` fresh branches from `x` at date `n`,
/// each followed to its stopping date after `n`.
pub struct NestedSimulation<'a> {
    pub rule: &'a dyn ExerciseRule,
    pub market: &'a Market,
    pub payoff: MaxCall,
    pub inner_paths: usize,
    /// Branches for `(outer, n)` use stream `key.index + outer * N + n`.
    pub key: RngStreamKey,
}

impl<'a> NestedSimulation<'a> {
    pub fn new(rule: &'a dyn ExerciseRule, market: &'a Market, inner_paths: usize, seed: u64) -> Self {
        Self {
            rule,
            market,
            payoff: market.payoff(),
            inner_paths,
            key: RngStreamKey::new(StreamFamily::UpperInner, seed, 0),
        }
    }
}

impl ContinuationEstimator for NestedSimulation<'_> {
    fn estimate(&self, n: usize, x: &[f64], outer: u64) -> f64 {
        let n_dates = self.market.n_dates();
        let d = self.market.dim();
        let times = &self.market.exercise_times()[n..];
        let len = times.len() * d;
        let j = self.inner_paths;
        let mut rng = self.key.with_index(self.key.index + outer * n_dates as u64 + n as u64).rng();
        let mut buf = vec![0.0; j * len];
        for path in buf.chunks_mut(len) {
            self.market.fill_path(x, times, &mut rng, path);
        }
        let state = |i: usize, date: usize| {
            let off = i * len + (date - n) * d;
            &buf[off..off + d]
        };
        let tau = stopping_times_from(self.rule, &self.payoff, n + 1, j, state);
        let total: f64 = tau.iter().enumerate().map(|(i, &t)| self.payoff.value(t, state(i, t))).sum();
        total / j as f64
    }
}

/// Martingale realizations `m_0..m_N` along one exercise-grid path.
///
/// `m_0 = 0` and `m_n - m_{n-1} = f_n G_n + (1 - f_n) C_n - C_{n-1}`, where
/// `f_n` is the rule's exercise decision at `n` (`f_N = 1`) and `C_n` is the
/// estimated value of continuing at `n`. The increment is the change in the
/// conditional expectation of the rule's payoff from `n - 1` to `n`, so `m`
/// is adapted and mean-zero whenever the estimates are conditionally unbiased.
pub fn dual_martingale_path(
    rule: &dyn ExerciseRule,
    payoff: &dyn Payoff,
    path: &[f64],
    dim: usize,
    estimator: &dyn ContinuationEstimator,
    outer: u64,
) -> Vec<f64> {
    let n_dates = rule.n_dates();
    let x = |n: usize| &path[n * dim..(n + 1) * dim];
    let cont: Vec<f64> = (0..n_dates).map(|n| estimator.estimate(n, x(n), outer)).collect();
    let mut m = vec![0.0; n_dates + 1];
    for n in 1..=n_dates {
        let realized = if n == n_dates || stop_decision(rule, payoff, n, x(n)) {
            payoff.value(n, x(n))
        } else {
            cont[n]
        };
        m[n] = m[n - 1] + realized - cont[n - 1];
    }
    m
}

/// Dual estimate over the given outer paths.
pub fn upper_bound_on(
    rule: &dyn ExerciseRule,
    payoff: &dyn Payoff,
    outer: &PathBatch,
    estimator: &dyn ContinuationEstimator,
) -> UpperBound {
    assert_eq!(outer.grid, Grid::Exercise);
    let n_dates = rule.n_dates();
    let dim = outer.dim;
    let per_path: Vec<(f64, Vec<f64>)> = (0..outer.n_paths)
        .into_par_iter()
        .map(|k| {
            let path = outer.path(k);
            let m = dual_martingale_path(rule, payoff, path, dim, estimator, k as u64);
            let max = (0..=n_dates)
                .map(|n| payoff.value(n, &path[n * dim..(n + 1) * dim]) - m[n])
                .fold(f64::NEG_INFINITY, f64::max);
            (max, m)
        })
        .collect();
    let maxima: Vec<f64> = per_path.iter().map(|(v, _)| *v).collect();
    let increments = (1..=n_dates)
        .map(|n| Summary::of(&per_path.iter().map(|(_, m)| m[n] - m[n - 1]).collect::<Vec<_>>()))
        .collect();
    UpperBound {
        estimate: Summary::of(&maxima),
        increments,
    }
}

/// Dual estimate with `UPPER_OUTER` paths and nested `UPPER_INNER` branches.
pub fn upper_bound(rule: &dyn ExerciseRule, market: &Market, config: &DualConfig, seed: u64) -> Result<UpperBound> {
    config.validate()?;
    let outer = crate::market::simulate_paths(
        market,
        Grid::Exercise,
        config.outer_paths,
        RngStreamKey::new(StreamFamily::UpperOuter, seed, 0),
    );
    let nested = NestedSimulation::new(rule, market, config.inner_paths, seed);
    Ok(upper_bound_on(rule, &nested.payoff, &outer, &nested))
}
