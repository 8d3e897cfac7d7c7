//! Continuation-value regression by backward induction and the stopping rule
//! it induces.
//!
//! Training walks the exercise dates from `N - 1` down to 1. At each date a
//! network is fitted by Adam to the pathwise payoff collected at the current
//! stopping label, then the labels are moved to the current date wherever the
//! immediate payoff is at least the fitted continuation value. The value at
//! date 0 is the plain average of the labelled payoffs.

use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Grid, Payoff, PathBatch};
use crate::nn::{AdamState, Mlp, MlpSpec, StepSchedule};
use crate::rng::{RngStreamKey, StreamFamily};

/// Rows per work unit when evaluating networks over many paths.
pub(crate) const EVAL_CHUNK: usize = 4096;

/// Shape and normalization settings shared by the regression and hedging networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Number of affine layers `I` (hidden layers + 1).
    pub depth: usize,
    /// Hidden width is `d + hidden_extra` for `d` assets.
    pub hidden_extra: usize,
    pub batch_norm: bool,
    pub input_batch_norm: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            hidden_extra: 50,
            batch_norm: true,
            input_batch_norm: false,
            bn_eps: 1e-6,
            bn_momentum: 0.99,
        }
    }
}

impl NetConfig {
    pub fn spec(&self, assets: usize, input: usize, output: usize) -> MlpSpec {
        let mut spec = MlpSpec::uniform(input, assets + self.hidden_extra, self.depth, output);
        spec.batch_norm = self.batch_norm;
        spec.input_batch_norm = self.input_batch_norm;
        spec.bn_eps = self.bn_eps;
        spec.bn_momentum = self.bn_momentum;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of training paths `K`.
    pub paths: usize,
    pub batch_size: usize,
    /// Adam steps at date `N - 1`.
    pub steps_first: u64,
    /// Adam steps at dates `n <= N - 2`.
    pub steps_rest: u64,
    /// Start date `n` from the trained network of date `n + 1`.
    pub warm_start: bool,
    /// Append the discounted payoff to the network input.
    pub extended_state: bool,
    /// Step sizes, spread over equal parts of each date's step budget.
    pub learning_rates: Vec<f64>,
    pub net: NetConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 || self.batch_size == 0 || self.batch_size > self.paths {
            return Err(Error::invalid("train.batch_size", "need 1 <= batch_size <= paths"));
        }
        if self.steps_first == 0 || self.steps_rest == 0 {
            return Err(Error::invalid("train.steps_first/steps_rest", "must be >= 1"));
        }
        if self.learning_rates.is_empty() {
            return Err(Error::invalid("train.learning_rates", "at least one step size"));
        }
        Ok(())
    }
}

/// Continuation values `c(n, x)` for a set of states at one exercise date.
///
/// `payoffs[i]` is `g(n, x_i)`, supplied so implementations can use it as a
/// feature without knowing the payoff function.
pub trait ExerciseRule: Sync {
    /// Number of exercise intervals `N`.
    fn n_dates(&self) -> usize;

    fn continuation(&self, n: usize, states: &[f64], rows: usize, payoffs: &[f64]) -> Vec<f64>;
}

/// `theta_0` plus one continuation network per date `1..N-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingPolicy {
    pub theta0: f64,
    /// `nets[n - 1]` approximates the continuation value at date `n`.
    pub nets: Vec<Mlp>,
    pub n_dates: usize,
    pub uses_extended_state: bool,
}

impl StoppingPolicy {
    /// Network input rows for price states at one date.
    fn features(&self, states: &[f64], rows: usize, payoffs: &[f64]) -> Vec<f64> {
        if !self.uses_extended_state {
            return states.to_vec();
        }
        let d = states.len() / rows.max(1);
        let mut f = Vec::with_capacity(rows * (d + 1));
        for (x, g) in states.chunks(d).zip(payoffs) {
            f.extend_from_slice(x);
            f.push(*g);
        }
        f
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "policy n_dates={} theta0={} extended_state={} nets={}",
            self.n_dates,
            self.theta0,
            self.uses_extended_state as u8,
            self.nets.len()
        )?;
        for net in &self.nets {
            net.write_snapshot(&mut w)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Snapshot("empty policy file".into()))??;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("policy") {
            return Err(Error::Snapshot(format!("expected policy header, found `{header}`")));
        }
        let (mut n_dates, mut theta0, mut extended, mut count) = (None, None, None, None);
        for kv in fields {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Snapshot(format!("malformed field `{kv}`")))?;
            let bad = |e: &dyn std::fmt::Display| Error::Snapshot(format!("{k}: {e}"));
            match k {
                "n_dates" => n_dates = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
                "theta0" => theta0 = Some(v.parse::<f64>().map_err(|e| bad(&e))?),
                "extended_state" => extended = Some(v == "1"),
                "nets" => count = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
                _ => return Err(Error::Snapshot(format!("unknown field `{k}`"))),
            }
        }
        let missing = || Error::Snapshot("incomplete policy header".into());
        let n_dates = n_dates.ok_or_else(missing)?;
        let count = count.ok_or_else(missing)?;
        if count != n_dates.saturating_sub(1) {
            return Err(Error::Snapshot(format!("{count} networks for {n_dates} dates")));
        }
        let nets = (0..count).map(|_| Mlp::read_snapshot(&mut lines)).collect::<Result<_>>()?;
        Ok(Self {
            theta0: theta0.ok_or_else(missing)?,
            nets,
            n_dates,
            uses_extended_state: extended.ok_or_else(missing)?,
        })
    }
}

impl ExerciseRule for StoppingPolicy {
    fn n_dates(&self) -> usize {
        self.n_dates
    }

    fn continuation(&self, n: usize, states: &[f64], rows: usize, payoffs: &[f64]) -> Vec<f64> {
        if n == 0 {
            vec![self.theta0; rows]
        } else if n >= self.n_dates {
            vec![0.0; rows]
        } else if rows == 0 {
            Vec::new()
        } else {
            self.nets[n - 1].predict(&self.features(states, rows, payoffs), rows)
        }
    }
}

/// Continuation values of `rows` price states at date `n`.
pub fn continuation_value(rule: &dyn ExerciseRule, payoff: &dyn Payoff, n: usize, states: &[f64], rows: usize) -> Result<Vec<f64>> {
    if n > rule.n_dates() {
        return Err(Error::DateOutOfRange { date: n, max: rule.n_dates() });
    }
    let d = if rows == 0 { 0 } else { states.len() / rows };
    let g: Vec<f64> = states.chunks(d.max(1)).take(rows).map(|x| payoff.value(n, x)).collect();
    Ok(rule.continuation(n, states, rows, &g))
}

/// Exercise at date `n` iff `g(n, x) >= c(n, x)`; always at maturity.
pub fn stop_decision(rule: &dyn ExerciseRule, payoff: &dyn Payoff, n: usize, x: &[f64]) -> bool {
    if n >= rule.n_dates() {
        return true;
    }
    let g = payoff.value(n, x);
    g >= rule.continuation(n, x, 1, &[g])[0]
}

/// First exercise date along one exercise-grid path (`(N + 1) * d` values).
pub fn apply_policy(rule: &dyn ExerciseRule, payoff: &dyn Payoff, path: &[f64], dim: usize) -> usize {
    let n_dates = rule.n_dates();
    (0..n_dates)
        .find(|&n| stop_decision(rule, payoff, n, &path[n * dim..(n + 1) * dim]))
        .unwrap_or(n_dates)
}

/// [`apply_policy`] for every path of an exercise-grid batch, evaluating each
/// date's network once per chunk of paths.
pub fn stopping_times(rule: &dyn ExerciseRule, payoff: &dyn Payoff, batch: &PathBatch) -> Vec<usize> {
    assert_eq!(batch.grid, Grid::Exercise);
    assert!(!batch.extended, "pass price paths; features are built by the rule");
    let ids: Vec<usize> = (0..batch.n_paths).collect();
    ids.par_chunks(EVAL_CHUNK)
        .flat_map_iter(|chunk| stopping_times_from(rule, payoff, 0, chunk.len(), |i, n| batch.state(chunk[i], n)))
        .collect()
}

/// Stopping dates `min{n >= from : stop}` for `rows` paths whose date-`n`
/// state is `state(i, n)`.
pub(crate) fn stopping_times_from<'a, F>(rule: &dyn ExerciseRule, payoff: &dyn Payoff, from: usize, rows: usize, state: F) -> Vec<usize>
where
    F: Fn(usize, usize) -> &'a [f64],
{
    let n_dates = rule.n_dates();
    let mut tau = vec![n_dates; rows];
    let mut alive: Vec<usize> = (0..rows).collect();
    for n in from..n_dates {
        if alive.is_empty() {
            break;
        }
        let mut xs = Vec::new();
        let mut gs = Vec::with_capacity(alive.len());
        for &i in &alive {
            let x = state(i, n);
            xs.extend_from_slice(x);
            gs.push(payoff.value(n, x));
        }
        let c = rule.continuation(n, &xs, alive.len(), &gs);
        let mut still = Vec::with_capacity(alive.len());
        for (j, &i) in alive.iter().enumerate() {
            if gs[j] >= c[j] {
                tau[i] = n;
            } else {
                still.push(i);
            }
        }
        alive = still;
    }
    tau
}

/// Draws mini-batches of distinct path indices; successive batches are
/// independent, so a path can reappear in later steps.
pub(crate) struct MinibatchSampler {
    perm: Vec<usize>,
}

impl MinibatchSampler {
    pub(crate) fn new(n: usize) -> Self {
        Self { perm: (0..n).collect() }
    }

    /// Partial Fisher-Yates shuffle: the first `size` entries become a uniform sample.
    pub(crate) fn draw<R: Rng>(&mut self, size: usize, rng: &mut R) -> &[usize] {
        let n = self.perm.len();
        for i in 0..size {
            let j = rng.random_range(i..n);
            self.perm.swap(i, j);
        }
        &self.perm[..size]
    }
}

/// Per-date labels and losses recorded during training.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// `labels[n][k]` is the stopping label `s^k_n` for `n = 1..=N` (index 0 unused).
    pub labels: Vec<Vec<usize>>,
    /// Mini-batch loss of the last Adam step at each date (index 0 unused).
    pub final_loss: Vec<f64>,
}

/// Fit the continuation networks on an exercise-grid batch (price or extended state).
pub fn train_policy(batch: &PathBatch, payoff: &dyn Payoff, config: &TrainConfig, seed: u64) -> Result<StoppingPolicy> {
    train_policy_traced(batch, payoff, config, seed).map(|(p, _)| p)
}

pub fn train_policy_traced(batch: &PathBatch, payoff: &dyn Payoff, config: &TrainConfig, seed: u64) -> Result<(StoppingPolicy, TrainTrace)> {
    assert_eq!(batch.grid, Grid::Exercise, "training paths live on the exercise grid");
    let k_paths = batch.n_paths;
    if k_paths == 0 {
        return Err(Error::invalid("train.paths", "no training paths"));
    }
    let n_dates = batch.n_steps();
    let feat_dim = batch.dim;
    let assets = if batch.extended { feat_dim - 1 } else { feat_dim };
    let batch_size = config.batch_size.min(k_paths);
    let spec = config.net.spec(assets, feat_dim, 1);

    // discounted payoffs g(n, x^k_n)
    let stride = n_dates + 1;
    let g: Vec<f64> = (0..k_paths)
        .into_par_iter()
        .flat_map_iter(|k| (0..=n_dates).map(move |n| payoff.value(n, &batch.state(k, n)[..assets])))
        .collect();

    let mut label: Vec<usize> = vec![n_dates; k_paths];
    let mut label_value: Vec<f64> = (0..k_paths).map(|k| g[k * stride + n_dates]).collect();
    let mut trace = TrainTrace {
        labels: vec![Vec::new(); n_dates + 1],
        final_loss: vec![f64::NAN; n_dates + 1],
    };
    trace.labels[n_dates] = label.clone();

    let mut nets: Vec<Option<Mlp>> = vec![None; n_dates.saturating_sub(1)];
    for n in (1..n_dates).rev() {
        let warm = config.warm_start && n + 1 < n_dates;
        let (mut net, steps) = if warm {
            (nets[n].clone().expect("later date trained first"), config.steps_rest)
        } else {
            let steps = if n + 1 == n_dates { config.steps_first } else { config.steps_rest };
            (Mlp::xavier(spec.clone(), RngStreamKey::new(StreamFamily::NetInit, seed, n as u64))?, steps)
        };
        let mut adam = AdamState::new(net.params().len(), StepSchedule::equal_parts(steps, &config.learning_rates));
        let mut rng = RngStreamKey::new(StreamFamily::Minibatch, seed, n as u64).rng();
        let mut x = vec![0.0; batch_size * feat_dim];
        let mut y = vec![0.0; batch_size];
        let mut dout = vec![0.0; batch_size];
        let mut grad = vec![0.0; net.params().len()];
        let mut loss = f64::NAN;
        let mut sampler = MinibatchSampler::new(k_paths);
        for _ in 0..steps {
            for (b, &k) in sampler.draw(batch_size, &mut rng).iter().enumerate() {
                x[b * feat_dim..(b + 1) * feat_dim].copy_from_slice(batch.state(k, n));
                y[b] = label_value[k];
            }
            let cache = net.forward_train(&x, batch_size)?;
            let scale = 2.0 / batch_size as f64;
            let mut acc = 0.0;
            for b in 0..batch_size {
                let r = cache.output[b] - y[b];
                acc += r * r;
                dout[b] = scale * r;
            }
            loss = acc / batch_size as f64;
            net.backward_into(&cache, &dout, &mut grad);
            adam.step(net.params_mut(), &grad);
        }
        trace.final_loss[n] = loss;

        let ids: Vec<usize> = (0..k_paths).collect();
        let cont: Vec<f64> = ids
            .par_chunks(EVAL_CHUNK)
            .flat_map_iter(|chunk| {
                let mut xs = Vec::with_capacity(chunk.len() * feat_dim);
                for &k in chunk {
                    xs.extend_from_slice(batch.state(k, n));
                }
                net.predict(&xs, chunk.len())
            })
            .collect();
        for k in 0..k_paths {
            let gn = g[k * stride + n];
            if gn >= cont[k] {
                label[k] = n;
                label_value[k] = gn;
            }
        }
        trace.labels[n] = label.clone();
        nets[n - 1] = Some(net);
    }

    let theta0 = label_value.iter().sum::<f64>() / k_paths as f64;
    let policy = StoppingPolicy {
        theta0,
        nets: nets.into_iter().map(|n| n.expect("every date trained")).collect(),
        n_dates,
        uses_extended_state: batch.extended,
    };
    Ok((policy, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{extend_state, simulate_paths, Market, ModelParams};

    struct ZeroPayoff;
    impl Payoff for ZeroPayoff {
        fn value(&self, _: usize, _: &[f64]) -> f64 {
            0.0
        }
    }

    /// Continuation fixed per date, independent of the state.
    struct ConstRule(Vec<f64>);
    impl ExerciseRule for ConstRule {
        fn n_dates(&self) -> usize {
            self.0.len()
        }
        fn continuation(&self, n: usize, _: &[f64], rows: usize, _: &[f64]) -> Vec<f64> {
            vec![self.0.get(n).copied().unwrap_or(0.0); rows]
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            paths: 2000,
            batch_size: 128,
            steps_first: 60,
            steps_rest: 30,
            warm_start: true,
            extended_state: true,
            learning_rates: vec![1e-1, 1e-2, 1e-3, 1e-4],
            net: NetConfig { hidden_extra: 6, ..NetConfig::default() },
        }
    }

    fn market(n: usize) -> Market {
        Market::new(ModelParams::symmetric(2, 100.0, 0.05, 0.1, 0.2, 0.0, 100.0, 1.0, n, 1)).unwrap()
    }

    #[test]
    fn minibatches_hold_distinct_paths() {
        let mut s = MinibatchSampler::new(50);
        let mut rng = RngStreamKey::new(StreamFamily::Minibatch, 0, 0).rng();
        for size in [1, 17, 50] {
            let mut b = s.draw(size, &mut rng).to_vec();
            b.sort_unstable();
            b.dedup();
            assert_eq!(b.len(), size);
            assert!(b.iter().all(|&k| k < 50));
        }
        let mut full = s.draw(50, &mut rng).to_vec();
        full.sort_unstable();
        assert_eq!(full, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn zero_payoff_gives_zero_value() {
        let m = market(3);
        let batch = simulate_paths(&m, Grid::Exercise, 500, RngStreamKey::new(StreamFamily::Train, 1, 0));
        let ext = extend_state(&batch, &ZeroPayoff);
        let (policy, trace) = train_policy_traced(&ext, &ZeroPayoff, &small_config(), 1).unwrap();
        assert_eq!(policy.theta0, 0.0);
        // g = 0 >= c only where the fitted continuation is <= 0; labels stay in range
        assert!(trace.labels[1].iter().all(|&s| (1..=3).contains(&s)));
    }

    #[test]
    fn single_interval_needs_no_networks() {
        let m = market(1);
        let g = m.payoff();
        let batch = simulate_paths(&m, Grid::Exercise, 1000, RngStreamKey::new(StreamFamily::Train, 2, 0));
        let policy = train_policy(&extend_state(&batch, &g), &g, &small_config(), 2).unwrap();
        assert!(policy.nets.is_empty());
        let mean = (0..1000).map(|k| g.value(1, batch.state(k, 1))).sum::<f64>() / 1000.0;
        assert!((policy.theta0 - mean).abs() < 1e-12);
        // X_0 is at the money: g(0) = 0 < theta0, so the rule continues to date 1
        assert_eq!(apply_policy(&policy, &g, batch.path(0), 2), 1);
    }

    #[test]
    fn labels_follow_the_recursion() {
        let m = market(4);
        let g = m.payoff();
        let batch = simulate_paths(&m, Grid::Exercise, 2000, RngStreamKey::new(StreamFamily::Train, 3, 0));
        let ext = extend_state(&batch, &g);
        let (policy, trace) = train_policy_traced(&ext, &g, &small_config(), 3).unwrap();
        for n in 1..4 {
            for k in 0..2000 {
                let s = trace.labels[n][k];
                assert!((n..=4).contains(&s));
                assert!(s == n || s == trace.labels[n + 1][k]);
            }
        }
        let mean = (0..2000).map(|k| {
            let s = trace.labels[1][k];
            g.value(s, batch.state(k, s))
        });
        let theta = mean.sum::<f64>() / 2000.0;
        assert!((policy.theta0 - theta).abs() < 1e-12);
        assert!(policy.theta0 >= 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let m = market(3);
        let g = m.payoff();
        let ext = extend_state(&simulate_paths(&m, Grid::Exercise, 1000, RngStreamKey::new(StreamFamily::Train, 4, 0)), &g);
        let a = train_policy(&ext, &g, &small_config(), 4).unwrap();
        let b = train_policy(&ext, &g, &small_config(), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn continuation_conventions() {
        let m = market(3);
        let g = m.payoff();
        let ext = extend_state(&simulate_paths(&m, Grid::Exercise, 500, RngStreamKey::new(StreamFamily::Train, 5, 0)), &g);
        let p = train_policy(&ext, &g, &small_config(), 5).unwrap();
        let xs = [90.0, 120.0, 130.0, 80.0];
        assert_eq!(continuation_value(&p, &g, 0, &xs, 2).unwrap(), vec![p.theta0; 2]);
        assert_eq!(continuation_value(&p, &g, 3, &xs, 2).unwrap(), vec![0.0; 2]);
        assert!(matches!(continuation_value(&p, &g, 4, &xs, 2), Err(Error::DateOutOfRange { date: 4, max: 3 })));
        let both = continuation_value(&p, &g, 1, &xs, 2).unwrap();
        let second = continuation_value(&p, &g, 1, &xs[2..], 1).unwrap();
        assert_eq!(both[1], second[0]);
        assert!(stop_decision(&p, &g, 3, &[1.0, 1.0]));
    }

    #[test]
    fn stop_decision_edge_cases() {
        let g = market(2).payoff();
        // zero payoff against positive continuation: continue
        assert!(!stop_decision(&ConstRule(vec![1.0, 1.0]), &g, 1, &[50.0, 50.0]));
        // tie stops
        let at = g.value(1, &[110.0, 90.0]);
        assert!(stop_decision(&ConstRule(vec![0.0, at]), &g, 1, &[110.0, 90.0]));
        // theta0 = 0 and g(0, X_0) > 0 stops immediately
        let path = [110.0, 100.0, 120.0, 100.0, 130.0, 100.0];
        assert_eq!(apply_policy(&ConstRule(vec![0.0, 5.0]), &g, &path, 2), 0);
        // huge continuation everywhere: min of the empty set is N
        assert_eq!(apply_policy(&ConstRule(vec![1e300, 1e300]), &g, &path, 2), 2);
    }

    #[test]
    fn batched_stopping_times_match_single_paths() {
        let m = market(4);
        let g = m.payoff();
        let batch = simulate_paths(&m, Grid::Exercise, 300, RngStreamKey::new(StreamFamily::Train, 6, 0));
        let p = train_policy(&extend_state(&batch, &g), &g, &small_config(), 6).unwrap();
        let fresh = simulate_paths(&m, Grid::Exercise, 300, RngStreamKey::new(StreamFamily::Lower, 6, 0));
        let tau = stopping_times(&p, &g, &fresh);
        for k in 0..300 {
            assert_eq!(tau[k], apply_policy(&p, &g, fresh.path(k), 2));
        }
    }

    #[test]
    fn decisions_ignore_the_future() {
        let m = market(4);
        let g = m.payoff();
        let batch = simulate_paths(&m, Grid::Exercise, 400, RngStreamKey::new(StreamFamily::Train, 7, 0));
        let p = train_policy(&extend_state(&batch, &g), &g, &small_config(), 7).unwrap();
        let a = simulate_paths(&m, Grid::Exercise, 50, RngStreamKey::new(StreamFamily::Lower, 7, 0));
        let b = simulate_paths(&m, Grid::Exercise, 50, RngStreamKey::new(StreamFamily::Lower, 8, 0));
        for k in 0..50 {
            // splice b's tail after date 2 onto a's head
            let mut spliced = a.path(k).to_vec();
            spliced[3 * 2..].copy_from_slice(&b.path(k)[3 * 2..]);
            let ta = apply_policy(&p, &g, a.path(k), 2);
            let ts = apply_policy(&p, &g, &spliced, 2);
            if ta <= 2 {
                assert_eq!(ta, ts);
            } else {
                assert!(ts > 2);
            }
        }
    }

    #[test]
    fn policy_file_roundtrip() {
        let m = market(3);
        let g = m.payoff();
        let ext = extend_state(&simulate_paths(&m, Grid::Exercise, 500, RngStreamKey::new(StreamFamily::Train, 9, 0)), &g);
        let p = train_policy(&ext, &g, &small_config(), 9).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(StoppingPolicy::read_from(&buf[..]).unwrap(), p);
    }
}
