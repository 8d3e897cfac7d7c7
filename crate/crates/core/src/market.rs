//! Contract and market model: correlated geometric Brownian motion, the
//! Bermudan max-call payoff and the dividend-adjusted discounted prices of the
//! hedging instruments.
//!
//! All money amounts leaving this module are discounted to time 0.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStreamKey;

/// Market and contract description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Initial prices, one per asset.
    pub s0: Vec<f64>,
    /// Continuously compounded risk-free rate.
    pub rate: f64,
    /// Continuous dividend yields.
    pub dividend: Vec<f64>,
    /// Volatilities.
    pub vol: Vec<f64>,
    /// Instantaneous correlation matrix.
    pub corr: Vec<Vec<f64>>,
    pub strike: f64,
    pub maturity: f64,
    /// Number of exercise intervals `N`; exercise dates are `t_0 = 0 < ... < t_N = T`.
    pub exercise_dates: usize,
    /// Rebalancing steps `M` per exercise interval.
    pub rebalance_steps: usize,
    /// Optional non-uniform exercise times (`N + 1` values from 0 to `T`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exercise_times: Option<Vec<f64>>,
}

impl ModelParams {
    /// Symmetric assets with a constant pairwise correlation.
    #[allow(clippy::too_many_arguments)]
    pub fn symmetric(
        d: usize,
        s0: f64,
        rate: f64,
        dividend: f64,
        vol: f64,
        rho: f64,
        strike: f64,
        maturity: f64,
        exercise_dates: usize,
        rebalance_steps: usize,
    ) -> Self {
        let corr = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { rho }).collect())
            .collect();
        Self {
            s0: vec![s0; d],
            rate,
            dividend: vec![dividend; d],
            vol: vec![vol; d],
            corr,
            strike,
            maturity,
            exercise_dates,
            rebalance_steps,
            exercise_times: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.s0.len()
    }

    fn validate(&self, allow_zero_vol: bool) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::invalid("s0", "at least one asset is required"));
        }
        if self.dividend.len() != d || self.vol.len() != d || self.corr.len() != d {
            return Err(Error::invalid(
                "dividend/vol/corr",
                format!("expected {d} entries per asset"),
            ));
        }
        if let Some(bad) = self.s0.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("s0", format!("initial prices must be positive, got {bad}")));
        }
        if let Some(bad) = self.dividend.iter().find(|q| !(**q >= 0.0 && q.is_finite())) {
            return Err(Error::invalid("dividend", format!("must be >= 0, got {bad}")));
        }
        for s in &self.vol {
            let ok = if allow_zero_vol { *s >= 0.0 } else { *s > 0.0 };
            if !ok || !s.is_finite() {
                return Err(Error::invalid("vol", format!("must be > 0, got {s}")));
            }
        }
        if !self.rate.is_finite() {
            return Err(Error::invalid("rate", "must be finite"));
        }
        if !(self.strike >= 0.0 && self.strike.is_finite()) {
            return Err(Error::invalid("strike", format!("must be >= 0, got {}", self.strike)));
        }
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(Error::invalid("maturity", format!("must be > 0, got {}", self.maturity)));
        }
        if self.exercise_dates == 0 {
            return Err(Error::invalid("exercise_dates", "must be >= 1"));
        }
        if self.rebalance_steps == 0 {
            return Err(Error::invalid("rebalance_steps", "must be >= 1"));
        }
        if let Some(ts) = &self.exercise_times {
            let n = self.exercise_dates;
            if ts.len() != n + 1 {
                return Err(Error::invalid("exercise_times", format!("expected {} values", n + 1)));
            }
            if ts[0] != 0.0 || (ts[n] - self.maturity).abs() > 1e-12 {
                return Err(Error::invalid("exercise_times", "must start at 0 and end at maturity"));
            }
            if ts.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid("exercise_times", "must be strictly increasing"));
            }
        }
        Ok(())
    }

    /// Exercise times `t_0..t_N`.
    pub fn exercise_grid(&self) -> Vec<f64> {
        match &self.exercise_times {
            Some(ts) => ts.clone(),
            None => {
                let n = self.exercise_dates;
                (0..=n)
                    .map(|i| if i == n { self.maturity } else { i as f64 * self.maturity / n as f64 })
                    .collect()
            }
        }
    }

    /// Rebalancing times `u_0..u_{NM}`; `u_{nM} = t_n` exactly.
    pub fn hedge_grid(&self) -> Vec<f64> {
        let t = self.exercise_grid();
        let m = self.rebalance_steps;
        let mut u = Vec::with_capacity(self.exercise_dates * m + 1);
        u.push(0.0);
        for w in t.windows(2) {
            for j in 1..m {
                u.push(w[0] + j as f64 * (w[1] - w[0]) / m as f64);
            }
            u.push(w[1]);
        }
        u
    }
}

/// Lower Cholesky factor `L` with `L L^T = rho`.
///
/// Semi-definite matrices are accepted: a pivot that vanishes up to rounding
/// zeroes its column.
pub fn cholesky_factor(rho: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = rho.len();
    for (i, row) in rho.iter().enumerate() {
        if row.len() != d {
            return Err(Error::invalid("corr", "matrix must be square"));
        }
        if (row[i] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("corr", format!("diagonal entry {i} is {}, not 1", row[i])));
        }
        for j in 0..i {
            if (row[j] - rho[j][i]).abs() > 1e-12 {
                return Err(Error::invalid("corr", format!("not symmetric at ({i},{j})")));
            }
        }
    }
    let tol = 1e-12 * d.max(1) as f64;
    let mut l = vec![vec![0.0; d]; d];
    for j in 0..d {
        let pivot = rho[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if pivot < -tol {
            return Err(Error::NotPositiveSemiDefinite { pivot: j, value: pivot });
        }
        if pivot <= tol {
            // Column is a combination of earlier ones; the remaining entries must agree.
            for i in j + 1..d {
                let resid = rho[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if resid.abs() > 1e-9 {
                    return Err(Error::NotPositiveSemiDefinite { pivot: j, value: pivot });
                }
            }
            continue;
        }
        let ljj = pivot.sqrt();
        l[j][j] = ljj;
        for i in j + 1..d {
            let s = rho[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = s / ljj;
        }
    }
    Ok(l)
}

/// Discounted exercise value `g(n, x)` at exercise date `n`.
pub trait Payoff: Sync {
    fn value(&self, n: usize, x: &[f64]) -> f64;
}

/// `e^{-r t_n} (max_i x_i - K)^+`.
#[derive(Debug, Clone)]
pub struct MaxCall {
    strike: f64,
    discount: Vec<f64>,
}

impl MaxCall {
    pub fn new(strike: f64, rate: f64, exercise_times: &[f64]) -> Self {
        Self {
            strike,
            discount: exercise_times.iter().map(|t| (-rate * t).exp()).collect(),
        }
    }
}

impl Payoff for MaxCall {
    fn value(&self, n: usize, x: &[f64]) -> f64 {
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.discount[n] * (max - self.strike).max(0.0)
    }
}

/// Which time grid a [`PathBatch`] lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// The exercise dates `t_0..t_N`.
    Exercise,
    /// The rebalancing times `u_0..u_{NM}`.
    Hedge,
}

/// Simulated paths, stored as `[path][step][coordinate]` in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub values: Vec<f64>,
    pub times: Vec<f64>,
    pub grid: Grid,
    pub n_paths: usize,
    pub dim: usize,
    /// Whether the last coordinate is the appended discounted payoff.
    pub extended: bool,
}

impl PathBatch {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// The whole path `k` as `(n_steps + 1) * dim` values.
    pub fn path(&self, k: usize) -> &[f64] {
        let len = self.times.len() * self.dim;
        &self.values[k * len..(k + 1) * len]
    }

    pub fn state(&self, k: usize, step: usize) -> &[f64] {
        let len = self.times.len() * self.dim;
        let off = k * len + step * self.dim;
        &self.values[off..off + self.dim]
    }

    /// Keep every `stride`-th time point (hedge grid to exercise grid with `stride = M`).
    pub fn restrict(&self, stride: usize, grid: Grid) -> PathBatch {
        assert!(stride >= 1 && self.n_steps() % stride == 0);
        let steps: Vec<usize> = (0..=self.n_steps()).step_by(stride).collect();
        let mut values = Vec::with_capacity(self.n_paths * steps.len() * self.dim);
        for k in 0..self.n_paths {
            for &s in &steps {
                values.extend_from_slice(self.state(k, s));
            }
        }
        PathBatch {
            values,
            times: steps.iter().map(|&s| self.times[s]).collect(),
            grid,
            n_paths: self.n_paths,
            dim: self.dim,
            extended: self.extended,
        }
    }

    /// One row per path-step: `path,step,time,x_1..x_dim`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "path,step,time")?;
        for i in 1..=self.dim {
            write!(out, ",x_{i}")?;
        }
        writeln!(out)?;
        for k in 0..self.n_paths {
            for (s, t) in self.times.iter().enumerate() {
                write!(out, "{k},{s},{t}")?;
                for v in self.state(k, s) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// A validated model with its correlation factor.
#[derive(Debug, Clone)]
pub struct Market {
    params: ModelParams,
    chol: Vec<Vec<f64>>,
    exercise_times: Vec<f64>,
}

impl Market {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate(false)?;
        Self::build(params)
    }

    /// Test hook: like [`Market::new`] but accepts zero volatilities.
    #[doc(hidden)]
    pub fn with_degenerate_volatility(params: ModelParams) -> Result<Self> {
        params.validate(true)?;
        Self::build(params)
    }

    fn build(params: ModelParams) -> Result<Self> {
        let chol = cholesky_factor(&params.corr)?;
        let exercise_times = params.exercise_grid();
        Ok(Self {
            params,
            chol,
            exercise_times,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn n_dates(&self) -> usize {
        self.params.exercise_dates
    }

    pub fn exercise_times(&self) -> &[f64] {
        &self.exercise_times
    }

    pub fn grid_times(&self, grid: Grid) -> Vec<f64> {
        match grid {
            Grid::Exercise => self.exercise_times.clone(),
            Grid::Hedge => self.params.hedge_grid(),
        }
    }

    pub fn payoff(&self) -> MaxCall {
        MaxCall::new(self.params.strike, self.params.rate, &self.exercise_times)
    }

    /// Factor turning a price at time `u` into the discounted, dividend-reinvested price.
    pub fn instrument_factor(&self, u: f64) -> Vec<f64> {
        self.params
            .dividend
            .iter()
            .map(|q| (-(self.params.rate - q) * u).exp())
            .collect()
    }

    /// Advance `x` by one exact lognormal step of length `dt` using draws from `rng`.
    pub fn step<R: Rng + ?Sized>(&self, x: &mut [f64], dt: f64, rng: &mut R, z: &mut [f64]) {
        let d = self.dim();
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let sdt = dt.sqrt();
        for i in 0..d {
            let w: f64 = (0..=i).map(|k| self.chol[i][k] * z[k]).sum();
            let s = self.params.vol[i];
            let drift = (self.params.rate - self.params.dividend[i] - 0.5 * s * s) * dt;
            x[i] *= (drift + s * sdt * w).exp();
        }
    }

    /// Fill one path over `times` starting from `x0`.
    pub(crate) fn fill_path<R: Rng + ?Sized>(&self, x0: &[f64], times: &[f64], rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let mut z = vec![0.0; d];
        out[..d].copy_from_slice(x0);
        for j in 1..times.len() {
            let (prev, next) = out.split_at_mut(j * d);
            let cur = &mut next[..d];
            cur.copy_from_slice(&prev[(j - 1) * d..]);
            self.step(cur, times[j] - times[j - 1], rng, &mut z);
        }
    }

    /// Simulate `n_paths` paths over arbitrary `times` (starting at `s0`);
    /// path `k` uses stream `key.index + k`.
    pub(crate) fn simulate_on(&self, times: &[f64], n_paths: usize, key: RngStreamKey) -> Vec<f64> {
        let len = times.len() * self.dim();
        let mut values = vec![0.0; n_paths * len];
        values.par_chunks_mut(len).enumerate().for_each(|(k, out)| {
            let mut rng = key.with_index(key.index + k as u64).rng();
            self.fill_path(&self.params.s0, times, &mut rng, out);
        });
        values
    }
}

/// Simulate paths on the exercise or hedging grid with exact lognormal steps.
///
/// Path `k` draws from the stream `key.index + k`, so a path can be
/// regenerated in isolation and results do not depend on the worker count.
pub fn simulate_paths(market: &Market, grid: Grid, n_paths: usize, key: RngStreamKey) -> PathBatch {
    let times = market.grid_times(grid);
    let values = market.simulate_on(&times, n_paths, key);
    PathBatch {
        values,
        times,
        grid,
        n_paths,
        dim: market.dim(),
        extended: false,
    }
}

/// Append the discounted payoff `g(n, x_n)` as an extra coordinate.
pub fn extend_state(batch: &PathBatch, payoff: &dyn Payoff) -> PathBatch {
    assert_eq!(batch.grid, Grid::Exercise, "extended state is defined on the exercise grid");
    assert!(!batch.extended, "batch is already extended");
    let d = batch.dim;
    let steps = batch.times.len();
    let mut values = Vec::with_capacity(batch.n_paths * steps * (d + 1));
    for k in 0..batch.n_paths {
        for n in 0..steps {
            let x = batch.state(k, n);
            values.extend_from_slice(x);
            values.push(payoff.value(n, x));
        }
    }
    PathBatch {
        values,
        times: batch.times.clone(),
        grid: batch.grid,
        n_paths: batch.n_paths,
        dim: d + 1,
        extended: true,
    }
}

/// Dividend-adjusted discounted prices `P^i_u = e^{-(r - delta_i) u} S^i_u`.
pub fn hedge_instrument_prices(market: &Market, batch: &PathBatch) -> PathBatch {
    assert!(!batch.extended);
    let d = batch.dim;
    let factors: Vec<Vec<f64>> = batch.times.iter().map(|&u| market.instrument_factor(u)).collect();
    let mut values = batch.values.clone();
    let len = batch.times.len() * d;
    for path in values.chunks_mut(len) {
        for (s, f) in factors.iter().enumerate() {
            for i in 0..d {
                path[s * d + i] *= f[i];
            }
        }
    }
    PathBatch {
        values,
        ..batch.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamFamily;
    use crate::stats::Summary;

    fn bench_params(d: usize) -> ModelParams {
        ModelParams::symmetric(d, 100.0, 0.05, 0.10, 0.20, 0.0, 100.0, 3.0, 9, 12)
    }

    #[test]
    fn cholesky_identity() {
        let eye: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| (i == j) as u8 as f64).collect()).collect();
        assert_eq!(cholesky_factor(&eye).unwrap(), eye);
    }

    #[test]
    fn cholesky_two_by_two() {
        let l = cholesky_factor(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        assert_eq!(l[0], vec![1.0, 0.0]);
        assert!((l[1][0] - 0.5).abs() < 1e-15);
        assert!((l[1][1] - 0.75f64.sqrt()).abs() < 1e-15);
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| l[i][k] * l[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.5 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_invalid_correlation() {
        let err = cholesky_factor(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap_err();
        assert!(matches!(err, Error::NotPositiveSemiDefinite { .. }));
    }

    #[test]
    fn cholesky_accepts_perfect_correlation() {
        let l = cholesky_factor(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(l, vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn payoff_examples() {
        let m = Market::new(bench_params(3)).unwrap();
        let g = m.payoff();
        assert_eq!(g.value(0, &[90.0, 90.0, 90.0]), 0.0);
        assert_eq!(g.value(0, &[110.0, 90.0, 90.0]), 10.0);
        let v = g.value(9, &[120.0, 80.0, 100.0]);
        assert!((v - 20.0 * (-0.15f64).exp()).abs() < 1e-12);
        assert!((v - 17.21416).abs() < 1e-5);
    }

    #[test]
    fn zero_volatility_paths_follow_the_drift() {
        let mut p = bench_params(2);
        p.vol = vec![0.0, 0.0];
        assert!(Market::new(p.clone()).is_err());
        let m = Market::with_degenerate_volatility(p).unwrap();
        let batch = simulate_paths(&m, Grid::Exercise, 4, RngStreamKey::new(StreamFamily::Train, 1, 0));
        for k in 0..4 {
            for (n, t) in batch.times.iter().enumerate() {
                for &x in batch.state(k, n) {
                    let want = 100.0 * ((0.05f64 - 0.10) * t).exp();
                    assert!((x - want).abs() < 1e-10 * want);
                }
            }
        }
    }

    #[test]
    fn same_key_reproduces_paths() {
        let m = Market::new(bench_params(1)).unwrap();
        let key = RngStreamKey::new(StreamFamily::Lower, 99, 0);
        let a = simulate_paths(&m, Grid::Exercise, 50, key);
        let b = simulate_paths(&m, Grid::Exercise, 50, key);
        assert_eq!(a, b);
        let c = simulate_paths(&m, Grid::Exercise, 50, RngStreamKey::new(StreamFamily::UpperOuter, 99, 0));
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn paths_can_be_regenerated_in_pieces() {
        let m = Market::new(bench_params(2)).unwrap();
        let key = RngStreamKey::new(StreamFamily::Lower, 3, 0);
        let all = simulate_paths(&m, Grid::Exercise, 10, key);
        let tail = simulate_paths(&m, Grid::Exercise, 4, key.with_index(6));
        assert_eq!(all.path(7), tail.path(1));
    }

    #[test]
    fn discounted_reinvested_price_is_a_martingale() {
        let m = Market::new(bench_params(5)).unwrap();
        let batch = simulate_paths(&m, Grid::Exercise, 1_000_000, RngStreamKey::new(StreamFamily::Train, 5, 0));
        let t = 3.0;
        let f = (-(0.05f64 - 0.10) * t).exp();
        let xs: Vec<f64> = (0..batch.n_paths).map(|k| f * batch.state(k, 9)[0]).collect();
        let s = Summary::of(&xs);
        assert!((s.mean - 100.0).abs() <= 3.0 * s.std_error(), "{s:?}");
    }

    #[test]
    fn hedge_grid_restricts_to_exercise_grid() {
        let p = bench_params(3);
        let m = Market::new(p.clone()).unwrap();
        let key = RngStreamKey::new(StreamFamily::HedgeEval, 11, 0);
        let fine = simulate_paths(&m, Grid::Hedge, 20, key);
        assert_eq!(fine.times.len(), 9 * 12 + 1);
        let coarse = fine.restrict(12, Grid::Exercise);
        assert_eq!(coarse.times, m.exercise_times());
        for k in 0..20 {
            for n in 0..=9 {
                assert_eq!(coarse.state(k, n), fine.state(k, n * 12));
            }
        }
        // with one rebalance per interval the two grids consume identical draws
        let mut p1 = p;
        p1.rebalance_steps = 1;
        let m1 = Market::new(p1).unwrap();
        assert_eq!(
            simulate_paths(&m1, Grid::Hedge, 20, key).values,
            simulate_paths(&m1, Grid::Exercise, 20, key).values
        );
    }

    #[test]
    fn extended_state_appends_payoff() {
        let m = Market::new(bench_params(2)).unwrap();
        let g = m.payoff();
        let batch = simulate_paths(&m, Grid::Exercise, 30, RngStreamKey::new(StreamFamily::Train, 2, 0));
        let ext = extend_state(&batch, &g);
        assert_eq!(ext.dim, 3);
        for k in 0..30 {
            assert_eq!(ext.state(k, 0)[2], g.value(0, &[100.0, 100.0]));
            for n in 0..=9 {
                let x = batch.state(k, n);
                assert_eq!(&ext.state(k, n)[..2], x);
                let max = x[0].max(x[1]);
                let want = (-0.05f64 * n as f64 / 3.0).exp() * (max - 100.0).max(0.0);
                assert!((ext.state(k, n)[2] - want).abs() < 1e-12);
            }
        }
        let mut deep = bench_params(2);
        deep.strike = 1e6;
        let md = Market::new(deep).unwrap();
        let ext = extend_state(&simulate_paths(&md, Grid::Exercise, 5, RngStreamKey::new(StreamFamily::Train, 2, 0)), &md.payoff());
        assert!((0..5).all(|k| (0..=9).all(|n| ext.state(k, n)[2] == 0.0)));
    }

    #[test]
    fn instrument_prices_match_brownian_formula() {
        let p = bench_params(2);
        let m = Market::new(p).unwrap();
        let s = simulate_paths(&m, Grid::Hedge, 3, RngStreamKey::new(StreamFamily::HedgeEval, 4, 0));
        let pp = hedge_instrument_prices(&m, &s);
        for k in 0..3 {
            assert_eq!(pp.state(k, 0), &[100.0, 100.0]);
            for (j, &u) in s.times.iter().enumerate() {
                for i in 0..2 {
                    let sig = 0.2;
                    let w = ((s.state(k, j)[i] / 100.0).ln() - (0.05 - 0.10 - 0.5 * sig * sig) * u) / sig;
                    let direct = 100.0 * (sig * w - 0.5 * sig * sig * u).exp();
                    assert!((pp.state(k, j)[i] - direct).abs() <= 1e-12 * direct);
                }
            }
        }
    }

    #[test]
    fn instrument_prices_are_martingales() {
        let m = Market::new(ModelParams::symmetric(2, 100.0, 0.05, 0.1, 0.2, 0.3, 100.0, 1.0, 2, 3)).unwrap();
        let s = simulate_paths(&m, Grid::Hedge, 100_000, RngStreamKey::new(StreamFamily::HedgeEval, 8, 0));
        let pp = hedge_instrument_prices(&m, &s);
        for j in 0..pp.times.len() {
            for i in 0..2 {
                let xs: Vec<f64> = (0..pp.n_paths).map(|k| pp.state(k, j)[i]).collect();
                let st = Summary::of(&xs);
                assert!((st.mean - 100.0).abs() <= 3.0 * st.std_error() + 1e-12, "step {j} asset {i}: {st:?}");
            }
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = bench_params(2);
        p.exercise_dates = 0;
        assert!(Market::new(p).is_err());
        let mut p = bench_params(2);
        p.corr = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(Market::new(p), Err(Error::NotPositiveSemiDefinite { .. })));
    }

    #[test]
    fn hedge_grid_hits_exercise_dates() {
        let mut p = bench_params(1);
        p.exercise_dates = 3;
        p.rebalance_steps = 4;
        p.exercise_times = Some(vec![0.0, 0.5, 2.0, 3.0]);
        let m = Market::new(p.clone()).unwrap();
        let u = p.hedge_grid();
        assert_eq!(u.len(), 13);
        for (n, t) in m.exercise_times().iter().enumerate() {
            assert_eq!(u[4 * n], *t);
        }
        assert!(u.windows(2).all(|w| w[1] > w[0]));
    }

    proptest::proptest! {
        #[test]
        fn payoff_nonnegative_and_monotone_in_strike(x in proptest::collection::vec(0.0f64..300.0, 1..6), k1 in 0.0f64..200.0, dk in 0.0f64..50.0, n in 0usize..4) {
            let times = [0.0, 1.0, 2.0, 3.0];
            let lo = MaxCall::new(k1, 0.05, &times).value(n, &x);
            let hi = MaxCall::new(k1 + dk, 0.05, &times).value(n, &x);
            proptest::prop_assert!(lo >= 0.0 && hi >= 0.0 && hi <= lo);
        }
    }
}
