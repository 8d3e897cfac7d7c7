//! Dynamic hedging between exercise dates.
//!
//! Rebalancing time `u_m` has its own network `h_m` mapping the discounted,
//! dividend-adjusted instrument prices `P_{u_m}` to holdings. Over the
//! exercise interval `(t_{n-1}, t_n]` the `M` networks are trained jointly to
//! minimize the mean squared replication error of a target value at `t_n`
//! from a starting capital at `t_{n-1}`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Grid, Market, Payoff};
use crate::nn::{AdamState, Mlp, MlpSpec, StepSchedule};
use crate::rng::{RngStreamKey, StreamFamily};
use crate::stats::Summary;
use crate::stopping::{stopping_times_from, ExerciseRule, MinibatchSampler, NetConfig, EVAL_CHUNK};

/// Offset separating hedge stream indices from those used by policy training.
const HEDGE_INDEX_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HedgeMode {
    /// Hedge over `[0, t_1]` only.
    Interval,
    /// Hedge every interval up to the exercise time.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HedgeConfig {
    /// Training paths `K_H` per interval.
    pub train_paths: usize,
    /// Evaluation paths `K_E`.
    pub eval_paths: usize,
    pub batch_size: usize,
    /// Adam steps for the first interval.
    pub steps_first: u64,
    /// Adam steps for later intervals.
    pub steps_rest: u64,
    /// Start `h_m` from the trained `h_{m-M}`.
    pub warm_start: bool,
    pub learning_rates: Vec<f64>,
    pub net: NetConfig,
    pub histogram_bins: usize,
    /// Histogram range is the mean plus or minus this many sample SDs.
    pub histogram_sds: f64,
}

impl HedgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_paths < 2 || self.batch_size < 2 || self.batch_size > self.train_paths {
            return Err(Error::invalid("hedge.batch_size", "need 2 <= batch_size <= train_paths"));
        }
        if self.eval_paths == 0 {
            return Err(Error::invalid("hedge.eval_paths", "must be >= 1"));
        }
        if self.steps_first == 0 || self.steps_rest == 0 {
            return Err(Error::invalid("hedge.steps_first/steps_rest", "must be >= 1"));
        }
        if self.learning_rates.is_empty() {
            return Err(Error::invalid("hedge.learning_rates", "at least one step size"));
        }
        if self.histogram_bins == 0 || !(self.histogram_sds > 0.0) {
            return Err(Error::invalid("hedge.histogram", "need bins >= 1 and a positive range"));
        }
        Ok(())
    }
}

/// Hedging networks `h_0, h_1, ...` indexed by rebalancing step.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgeStrategy {
    pub mode: HedgeMode,
    /// Rebalancing steps per exercise interval.
    pub steps_per_interval: usize,
    pub nets: Vec<Mlp>,
}

impl HedgeStrategy {
    /// Holdings at step `m` for `rows` instrument-price states.
    pub fn holdings(&self, m: usize, prices: &[f64], rows: usize) -> Vec<f64> {
        self.nets[m].predict(prices, rows)
    }
}

/// Starting capital of an interval's replication problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Capital {
    Fixed(f64),
    /// `C(n-1, X_{t_{n-1}})`, the clipped continuation value.
    ClippedContinuation,
}

/// `v(n, x) = max(g(n, x), c(n, x))`, with `v(N, x) = g(N, x)`.
pub fn target_value(rule: &dyn ExerciseRule, payoff: &dyn Payoff, n: usize, x: &[f64]) -> f64 {
    let g = payoff.value(n, x);
    if n >= rule.n_dates() {
        return g;
    }
    g.max(rule.continuation(n, x, 1, &[g])[0])
}

/// `C(n, x) = max(0, c(n, x))`.
pub fn clipped_continuation(rule: &dyn ExerciseRule, payoff: &dyn Payoff, n: usize, x: &[f64]) -> f64 {
    let g = payoff.value(n, x);
    rule.continuation(n, x, 1, &[g])[0].max(0.0)
}

/// Batched [`target_value`] over `rows` states.
fn target_values(rule: &dyn ExerciseRule, payoff: &dyn Payoff, n: usize, xs: &[f64], rows: usize) -> Vec<f64> {
    let d = xs.len() / rows.max(1);
    let g: Vec<f64> = xs.chunks(d.max(1)).take(rows).map(|x| payoff.value(n, x)).collect();
    if n >= rule.n_dates() {
        return g;
    }
    let c = rule.continuation(n, xs, rows, &g);
    g.iter().zip(c).map(|(g, c)| g.max(c)).collect()
}

fn clipped_continuations(rule: &dyn ExerciseRule, payoff: &dyn Payoff, n: usize, xs: &[f64], rows: usize) -> Vec<f64> {
    let d = xs.len() / rows.max(1);
    let g: Vec<f64> = xs.chunks(d.max(1)).take(rows).map(|x| payoff.value(n, x)).collect();
    rule.continuation(n, xs, rows, &g).into_iter().map(|c| c.max(0.0)).collect()
}

/// Discounted gains `sum_{j=a}^{b-1} h_j(P_j) . (P_{j+1} - P_j)` along one
/// path of instrument prices (`(steps + 1) * d` values).
pub fn gains(strategy: &HedgeStrategy, prices: &[f64], dim: usize, a: usize, b: usize) -> f64 {
    assert!(a <= b && b <= strategy.nets.len());
    (a..b)
        .map(|j| {
            let p = &prices[j * dim..(j + 1) * dim];
            let next = &prices[(j + 1) * dim..(j + 2) * dim];
            let h = strategy.holdings(j, p, 1);
            h.iter().zip(next.iter().zip(p)).map(|(h, (q, p))| h * (q - p)).sum::<f64>()
        })
        .sum()
}

/// Training data for one interval, stored step-major for mini-batch gathering.
struct IntervalData {
    /// `prices[j]` holds the instrument prices at local step `j` for all paths.
    prices: Vec<Vec<f64>>,
    capital: Vec<f64>,
    target: Vec<f64>,
}

/// Interval `n` training paths. Path `k` starts from one exact lognormal step
/// `0 -> t_{n-1}` and then follows the `M` rebalancing steps of the interval;
/// it draws from stream `HEDGE_TRAIN(seed, (n-1) K_H + k)`.
fn interval_data(
    rule: &dyn ExerciseRule,
    market: &Market,
    n: usize,
    capital: Capital,
    paths: usize,
    seed: u64,
) -> IntervalData {
    let d = market.dim();
    let m_steps = market.params().rebalance_steps;
    let grid = market.grid_times(Grid::Hedge);
    let local = &grid[(n - 1) * m_steps..=n * m_steps];
    let mut times = vec![0.0];
    if n > 1 {
        times.push(local[0]);
    }
    times.extend_from_slice(&local[1..]);
    let skip = times.len() - local.len();
    let key = RngStreamKey::new(StreamFamily::HedgeTrain, seed, (n as u64 - 1) * paths as u64);
    let raw = market.simulate_on(&times, paths, key);
    let len = times.len() * d;
    let state = |k: usize, j: usize| {
        let off = k * len + (j + skip) * d;
        &raw[off..off + d]
    };
    let payoff = market.payoff();
    let ids: Vec<usize> = (0..paths).collect();
    let (capital, target): (Vec<f64>, Vec<f64>) = ids
        .par_chunks(EVAL_CHUNK)
        .flat_map_iter(|chunk| {
            let rows = chunk.len();
            let gather = |j: usize| chunk.iter().flat_map(|&k| state(k, j).iter().copied()).collect::<Vec<f64>>();
            let cap = match capital {
                Capital::Fixed(v) => vec![v; rows],
                Capital::ClippedContinuation => clipped_continuations(rule, &payoff, n - 1, &gather(0), rows),
            };
            let tgt = target_values(rule, &payoff, n, &gather(m_steps), rows);
            cap.into_iter().zip(tgt).collect::<Vec<_>>()
        })
        .unzip();
    let prices = (0..=m_steps)
        .map(|j| {
            let f = market.instrument_factor(local[j]);
            let mut out = Vec::with_capacity(paths * d);
            for k in 0..paths {
                out.extend(state(k, j).iter().zip(&f).map(|(s, f)| s * f));
            }
            out
        })
        .collect();
    IntervalData { prices, capital, target }
}

fn check_not_stopped_at_zero(rule: &dyn ExerciseRule, market: &Market) -> Result<()> {
    let payoff = market.payoff();
    let s0 = &market.params().s0;
    let g = payoff.value(0, s0);
    let c = rule.continuation(0, s0, 1, &[g])[0];
    if g >= c {
        return Err(Error::NothingToHedge { payoff: g, continuation: c });
    }
    Ok(())
}

/// Network shape for global rebalancing step `m`. Every path sits at `s0` at
/// step 0, where batch statistics are degenerate (zero variance), so that
/// network is built without batch normalization.
fn hedge_net_spec(config: &HedgeConfig, d: usize, m: usize) -> MlpSpec {
    let mut spec = config.net.spec(d, d, d);
    if m == 0 {
        spec.batch_norm = false;
        spec.input_batch_norm = false;
    }
    spec
}

/// Train the `M` networks of interval `n` jointly. `init` supplies warm-start
/// networks; otherwise they are freshly initialized.
pub fn train_hedge_segment(
    rule: &dyn ExerciseRule,
    market: &Market,
    n: usize,
    capital: Capital,
    init: Option<&[Mlp]>,
    steps: u64,
    config: &HedgeConfig,
    seed: u64,
) -> Result<Vec<Mlp>> {
    config.validate()?;
    if n == 0 || n > market.n_dates() {
        return Err(Error::DateOutOfRange { date: n, max: market.n_dates() });
    }
    let d = market.dim();
    let m_steps = market.params().rebalance_steps;
    let data = interval_data(rule, market, n, capital, config.train_paths, seed);
    let first = (n - 1) * m_steps;
    let mut nets: Vec<Mlp> = (0..m_steps)
        .map(|j| {
            let spec = hedge_net_spec(config, d, first + j);
            match init {
                Some(init) if init[j].spec() == &spec => Ok(init[j].clone()),
                _ => Mlp::xavier(spec, RngStreamKey::new(StreamFamily::NetInit, seed, HEDGE_INDEX_BASE + (first + j) as u64)),
            }
        })
        .collect::<Result<_>>()?;
    let schedule = StepSchedule::equal_parts(steps, &config.learning_rates);
    let mut adam: Vec<AdamState> = nets.iter().map(|net| AdamState::new(net.params().len(), schedule.clone())).collect();
    let mut rng = RngStreamKey::new(StreamFamily::Minibatch, seed, HEDGE_INDEX_BASE + n as u64).rng();
    let b = config.batch_size;
    let mut idx = vec![0usize; b];
    let mut x = vec![vec![0.0; b * d]; m_steps + 1];
    let mut grad: Vec<Vec<f64>> = nets.iter().map(|net| vec![0.0; net.params().len()]).collect();
    let mut dout = vec![0.0; b * d];
    let mut sampler = MinibatchSampler::new(config.train_paths);
    for _ in 0..steps {
        idx.copy_from_slice(sampler.draw(b, &mut rng));
        for (j, xj) in x.iter_mut().enumerate() {
            for (r, &k) in idx.iter().enumerate() {
                xj[r * d..(r + 1) * d].copy_from_slice(&data.prices[j][k * d..(k + 1) * d]);
            }
        }
        let mut resid: Vec<f64> = idx.iter().map(|&k| data.capital[k] - data.target[k]).collect();
        let mut caches = Vec::with_capacity(m_steps);
        for (j, net) in nets.iter_mut().enumerate() {
            let cache = net.forward_train(&x[j], b)?;
            for r in 0..b {
                resid[r] += (0..d).map(|i| cache.output[r * d + i] * (x[j + 1][r * d + i] - x[j][r * d + i])).sum::<f64>();
            }
            caches.push(cache);
        }
        let scale = 2.0 / b as f64;
        for j in 0..m_steps {
            for r in 0..b {
                for i in 0..d {
                    dout[r * d + i] = scale * resid[r] * (x[j + 1][r * d + i] - x[j][r * d + i]);
                }
            }
            nets[j].backward_into(&caches[j], &dout, &mut grad[j]);
            adam[j].step(nets[j].params_mut(), &grad[j]);
        }
    }
    Ok(nets)
}

/// Hedge over `[0, t_1]` from capital `v_hat` against `v(1, X_1)`.
pub fn train_interval_hedge(rule: &dyn ExerciseRule, v_hat: f64, market: &Market, config: &HedgeConfig, seed: u64) -> Result<HedgeStrategy> {
    check_not_stopped_at_zero(rule, market)?;
    let nets = train_hedge_segment(rule, market, 1, Capital::Fixed(v_hat), None, config.steps_first, config, seed)?;
    Ok(HedgeStrategy {
        mode: HedgeMode::Interval,
        steps_per_interval: market.params().rebalance_steps,
        nets,
    })
}

/// Hedge every interval: interval 1 starts from `theta_0`, interval `n >= 2`
/// from `C(n-1, X_{t_{n-1}})`, each against `v(n, X_{t_n})`.
///
/// `on_interval` is called after each interval with its index.
pub fn train_full_hedge_with(
    rule: &dyn ExerciseRule,
    market: &Market,
    config: &HedgeConfig,
    seed: u64,
    mut on_interval: impl FnMut(usize),
) -> Result<HedgeStrategy> {
    check_not_stopped_at_zero(rule, market)?;
    let m_steps = market.params().rebalance_steps;
    let mut nets: Vec<Mlp> = Vec::with_capacity(market.n_dates() * m_steps);
    for n in 1..=market.n_dates() {
        let (capital, steps) = if n == 1 {
            let s0 = &market.params().s0;
            (Capital::Fixed(clipped_continuation(rule, &market.payoff(), 0, s0)), config.steps_first)
        } else {
            (Capital::ClippedContinuation, config.steps_rest)
        };
        let init = (n > 1 && config.warm_start).then(|| &nets[(n - 2) * m_steps..]);
        let trained = train_hedge_segment(rule, market, n, capital, init, steps, config, seed)?;
        nets.extend(trained);
        on_interval(n);
    }
    Ok(HedgeStrategy {
        mode: HedgeMode::Full,
        steps_per_interval: m_steps,
        nets,
    })
}

pub fn train_full_hedge(rule: &dyn ExerciseRule, market: &Market, config: &HedgeConfig, seed: u64) -> Result<HedgeStrategy> {
    train_full_hedge_with(rule, market, config, seed, |_| {})
}

/// Equal-width histogram with one underflow and one overflow bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub low: f64,
    pub high: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    /// `bins` bins over `mean +- sds * sample SD` of `values`.
    pub fn build(values: &[f64], bins: usize, sds: f64) -> Self {
        let s = Summary::of(values);
        let half = if s.std_dev > 0.0 { sds * s.std_dev } else { 1.0 };
        let (low, high) = (s.mean - half, s.mean + half);
        let width = (high - low) / bins as f64;
        let mut h = Histogram {
            low,
            high,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
        };
        for &v in values {
            if v < low {
                h.underflow += 1;
            } else if v >= high {
                h.overflow += 1;
            } else {
                let b = (((v - low) / width) as usize).min(bins - 1);
                h.counts[b] += 1;
            }
        }
        h
    }

    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.counts.iter().sum::<u64>()
    }

    /// `edge_low,edge_high,count`; the overflow rows use infinite outer edges.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "edge_low,edge_high,count")?;
        writeln!(out, "-inf,{},{}", self.low, self.underflow)?;
        let width = (self.high - self.low) / self.counts.len() as f64;
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.low + i as f64 * width;
            let hi = if i + 1 == self.counts.len() { self.high } else { lo + width };
            writeln!(out, "{lo},{hi},{c}")?;
        }
        writeln!(out, "{},inf,{}", self.high, self.overflow)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgeReport {
    pub mode: HedgeMode,
    pub v_hat: f64,
    /// Errors `V + gains over [0, t_1] - v(1, X_1)`.
    pub ihe: Summary,
    /// Negative parts of the same errors, reported as a positive number.
    pub ihs: Summary,
    /// Errors `V + gains up to the exercise time - g(tau, X_tau)`.
    pub he: Option<Summary>,
    pub hs: Option<Summary>,
    /// Histogram of total errors (interval errors in interval mode).
    pub histogram: Histogram,
}

impl HedgeReport {
    pub fn ihs_over_v(&self) -> f64 {
        self.ihs.mean / self.v_hat
    }

    pub fn hs_over_v(&self) -> Option<f64> {
        self.hs.map(|s| s.mean / self.v_hat)
    }
}

/// Evaluate on `k_e` fresh `HEDGE_EVAL` paths. Interval metrics are always
/// computed; total metrics need a full strategy.
pub fn evaluate(
    strategy: &HedgeStrategy,
    rule: &dyn ExerciseRule,
    v_hat: f64,
    market: &Market,
    k_e: usize,
    seed: u64,
    config: &HedgeConfig,
) -> HedgeReport {
    let d = market.dim();
    let m_steps = strategy.steps_per_interval;
    let full = strategy.mode == HedgeMode::Full;
    let times = market.grid_times(Grid::Hedge);
    let times = if full { times } else { times[..=m_steps].to_vec() };
    let factors: Vec<Vec<f64>> = times.iter().map(|&u| market.instrument_factor(u)).collect();
    let payoff = market.payoff();
    let key = RngStreamKey::new(StreamFamily::HedgeEval, seed, 0);
    let len = times.len() * d;
    let starts: Vec<usize> = (0..k_e).step_by(EVAL_CHUNK).collect();
    let errors: Vec<(f64, f64)> = starts
        .par_iter()
        .flat_map_iter(|&start| {
            let rows = EVAL_CHUNK.min(k_e - start);
            let spot = market.simulate_on(&times, rows, key.with_index(start as u64));
            let mut prices = spot.clone();
            for path in prices.chunks_mut(len) {
                for (j, f) in factors.iter().enumerate() {
                    path[j * d..(j + 1) * d].iter_mut().zip(f).for_each(|(p, f)| *p *= f);
                }
            }
            let at = |k: usize, j: usize| k * len + j * d..k * len + (j + 1) * d;
            let tau: Vec<usize> = if full {
                stopping_times_from(rule, &payoff, 0, rows, |k, n| &spot[at(k, n * m_steps)])
            } else {
                vec![1; rows]
            };
            let horizon: Vec<usize> = tau.iter().map(|&t| t * m_steps).collect();
            let mut gain = vec![0.0; rows];
            let mut interval_gain = vec![0.0; rows];
            let last = horizon.iter().copied().max().unwrap_or(0).max(m_steps);
            for j in 0..last {
                let alive: Vec<usize> = (0..rows).filter(|&k| j < horizon[k] || j < m_steps).collect();
                if alive.is_empty() {
                    break;
                }
                let xs: Vec<f64> = alive.iter().flat_map(|&k| prices[at(k, j)].iter().copied()).collect();
                let h = strategy.holdings(j, &xs, alive.len());
                for (r, &k) in alive.iter().enumerate() {
                    let p = &prices[at(k, j)];
                    let q = &prices[at(k, j + 1)];
                    let inc: f64 = (0..d).map(|i| h[r * d + i] * (q[i] - p[i])).sum();
                    if j < horizon[k] {
                        gain[k] += inc;
                    }
                    if j < m_steps {
                        interval_gain[k] += inc;
                    }
                }
            }
            let x1: Vec<f64> = (0..rows).flat_map(|k| spot[at(k, m_steps)].iter().copied()).collect();
            let v1 = target_values(rule, &payoff, 1, &x1, rows);
            (0..rows)
                .map(|k| {
                    let ie = v_hat + interval_gain[k] - v1[k];
                    let te = if full {
                        let t = tau[k];
                        v_hat + gain[k] - payoff.value(t, &spot[at(k, t * m_steps)])
                    } else {
                        f64::NAN
                    };
                    (ie, te)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let ie: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let neg = |v: &[f64]| v.iter().map(|e| (-e).max(0.0)).collect::<Vec<f64>>();
    let (he, hs, hist_src) = if full {
        let te: Vec<f64> = errors.iter().map(|e| e.1).collect();
        (Some(Summary::of(&te)), Some(Summary::of(&neg(&te))), te)
    } else {
        (None, None, ie.clone())
    };
    HedgeReport {
        mode: strategy.mode,
        v_hat,
        ihe: Summary::of(&ie),
        ihs: Summary::of(&neg(&ie)),
        he,
        hs,
        histogram: Histogram::build(&hist_src, config.histogram_bins, config.histogram_sds),
    }
}

pub fn evaluate_interval(
    strategy: &HedgeStrategy,
    rule: &dyn ExerciseRule,
    v_hat: f64,
    market: &Market,
    config: &HedgeConfig,
    seed: u64,
) -> HedgeReport {
    let interval = HedgeStrategy {
        mode: HedgeMode::Interval,
        steps_per_interval: strategy.steps_per_interval,
        nets: strategy.nets[..strategy.steps_per_interval].to_vec(),
    };
    evaluate(&interval, rule, v_hat, market, config.eval_paths, seed, config)
}

pub fn evaluate_full(
    strategy: &HedgeStrategy,
    rule: &dyn ExerciseRule,
    v_hat: f64,
    market: &Market,
    config: &HedgeConfig,
    seed: u64,
) -> HedgeReport {
    assert_eq!(strategy.mode, HedgeMode::Full, "total errors need a strategy for every interval");
    evaluate(strategy, rule, v_hat, market, config.eval_paths, seed, config)
}
