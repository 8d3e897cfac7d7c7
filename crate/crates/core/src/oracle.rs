//! Independent reference pricers: Black–Scholes, a CRR binomial tree with
//! Bermudan exercise, and brute-force enumeration of stopping rules on small
//! trees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    Call,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsQuote {
    pub price: f64,
    /// Spot delta `dV/dS`.
    pub delta: f64,
}

/// Black–Scholes price and delta with a continuous dividend yield.
pub fn bs_european(s0: f64, strike: f64, rate: f64, dividend: f64, vol: f64, maturity: f64, kind: OptionKind) -> BsQuote {
    let df_q = (-dividend * maturity).exp();
    let df_r = (-rate * maturity).exp();
    if strike <= 0.0 {
        return match kind {
            OptionKind::Call => BsQuote { price: s0 * df_q, delta: df_q },
            OptionKind::Put => BsQuote { price: 0.0, delta: 0.0 },
        };
    }
    let sd = vol * maturity.sqrt();
    let d1 = ((s0 / strike).ln() + (rate - dividend + 0.5 * vol * vol) * maturity) / sd;
    let d2 = d1 - sd;
    match kind {
        OptionKind::Call => BsQuote {
            price: s0 * df_q * normal_cdf(d1) - strike * df_r * normal_cdf(d2),
            delta: df_q * normal_cdf(d1),
        },
        OptionKind::Put => BsQuote {
            price: strike * df_r * normal_cdf(-d2) - s0 * df_q * normal_cdf(-d1),
            delta: -df_q * normal_cdf(-d1),
        },
    }
}

/// Recombining CRR tree with exercise allowed at a subset of levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub s0: f64,
    pub rate: f64,
    pub dividend: f64,
    pub vol: f64,
    pub maturity: f64,
    pub steps: usize,
    /// Levels at which exercise is allowed; the last level is always exercisable.
    pub exercise_levels: Vec<usize>,
}

impl TreeSpec {
    pub fn new(s0: f64, rate: f64, dividend: f64, vol: f64, maturity: f64, steps: usize, exercise_levels: Vec<usize>) -> Result<Self> {
        let mut levels = exercise_levels;
        levels.push(steps);
        levels.sort_unstable();
        levels.dedup();
        let spec = Self { s0, rate, dividend, vol, maturity, steps, exercise_levels: levels };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.maturity > 0.0) || !(self.vol > 0.0) || !(self.s0 > 0.0) {
            return Err(Error::invalid("tree", "steps, maturity, vol and s0 must be positive"));
        }
        if self.exercise_levels.iter().any(|&l| l > self.steps) {
            return Err(Error::invalid("exercise_levels", "level beyond the tree depth"));
        }
        let (u, d, p) = (self.up(), self.down(), self.prob_up());
        let growth = ((self.rate - self.dividend) * self.dt()).exp();
        if !(0.0 < d && d < growth && growth < u) || !(0.0 < p && p < 1.0) {
            return Err(Error::invalid("tree", "no-arbitrage condition d < e^{(r-q)dt} < u violated"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.steps as f64
    }

    pub fn up(&self) -> f64 {
        (self.vol * self.dt().sqrt()).exp()
    }

    pub fn down(&self) -> f64 {
        1.0 / self.up()
    }

    pub fn prob_up(&self) -> f64 {
        let g = ((self.rate - self.dividend) * self.dt()).exp();
        (g - self.down()) / (self.up() - self.down())
    }

    pub fn discount(&self) -> f64 {
        (-self.rate * self.dt()).exp()
    }

    /// Spot at `level` after `ups` up-moves.
    pub fn spot(&self, level: usize, ups: usize) -> f64 {
        self.s0 * self.up().powi(2 * ups as i32 - level as i32)
    }

    fn is_exercise(&self, level: usize) -> bool {
        self.exercise_levels.binary_search(&level).is_ok()
    }

    /// Backward induction with an arbitrary exercise decision at exercise nodes.
    /// `decide(level, ups, payoff, continuation)` returns the node value.
    fn induct<F, D>(&self, payoff: &F, mut decide: D) -> f64
    where
        F: Fn(usize, f64) -> f64,
        D: FnMut(usize, usize, f64, f64) -> f64,
    {
        let n = self.steps;
        let (p, disc) = (self.prob_up(), self.discount());
        let mut values: Vec<f64> = (0..=n).map(|j| payoff(n, self.spot(n, j))).collect();
        for level in (0..n).rev() {
            for j in 0..=level {
                let cont = disc * (p * values[j + 1] + (1.0 - p) * values[j]);
                values[j] = if self.is_exercise(level) {
                    decide(level, j, payoff(level, self.spot(level, j)), cont)
                } else {
                    cont
                };
            }
        }
        values[0]
    }
}

/// Bermudan value by backward induction. `payoff(level, spot)` is undiscounted.
pub fn crr_bermudan<F: Fn(usize, f64) -> f64>(spec: &TreeSpec, payoff: F) -> f64 {
    spec.induct(&payoff, |_, _, g, c| g.max(c))
}

/// Maximum over every stopping rule of the expected discounted payoff.
///
/// A rule labels each node of each non-terminal exercise level "stop" or
/// "continue"; the terminal level always stops. Refuses instances with more
/// than `2^max_bits` rules.
pub fn exhaustive_optimal_stop<F: Fn(usize, f64) -> f64>(spec: &TreeSpec, payoff: F, max_bits: usize) -> Result<f64> {
    let decision_levels: Vec<usize> = spec.exercise_levels.iter().copied().filter(|&l| l < spec.steps).collect();
    let mut offsets = vec![0usize; spec.steps + 1];
    let mut bits = 0;
    for &l in &decision_levels {
        offsets[l] = bits;
        bits += l + 1;
    }
    if bits > max_bits || bits >= 63 {
        return Err(Error::TooLarge { bits, limit: max_bits });
    }
    let mut best = f64::NEG_INFINITY;
    for rule in 0u64..(1u64 << bits) {
        let v = spec.induct(&payoff, |level, j, g, c| {
            if rule >> (offsets[level] + j) & 1 == 1 {
                g
            } else {
                c
            }
        });
        best = best.max(v);
    }
    Ok(best)
}

/// Outcome of one consistency check between the reference pricers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Random Bermudan put on a small tree: at most 3 decision levels plus maturity.
pub fn random_small_tree<R: rand::Rng>(rng: &mut R) -> (TreeSpec, f64) {
    let steps = rng.random_range(2..=6);
    let mut levels: Vec<usize> = (0..steps).filter(|_| rng.random_bool(0.5)).collect();
    levels.truncate(3);
    let spec = TreeSpec::new(
        rng.random_range(80.0..120.0),
        rng.random_range(0.0..0.08),
        rng.random_range(0.0..0.1),
        rng.random_range(0.1..0.5),
        rng.random_range(0.5..3.0),
        steps,
        levels,
    )
    .expect("parameters are inside the no-arbitrage range");
    (spec, rng.random_range(80.0..120.0))
}

/// Cross-check the reference pricers against each other.
pub fn self_check(seed: u64, trees: usize) -> Vec<OracleCheck> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trees {
        let (spec, k) = random_small_tree(&mut rng);
        let put = move |_: usize, s: f64| (k - s).max(0.0);
        let a = crr_bermudan(&spec, put);
        let b = exhaustive_optimal_stop(&spec, put, 24).expect("small tree");
        worst = worst.max((a - b).abs());
    }
    let mut out = vec![OracleCheck {
        name: "enumeration vs induction".into(),
        passed: worst < 1e-12,
        detail: format!("{trees} trees, max |diff| = {worst:e}"),
    }];

    let bs = bs_european(100.0, 100.0, 0.05, 0.0, 0.2, 1.0, OptionKind::Call).price;
    let spec = TreeSpec::new(100.0, 0.05, 0.0, 0.2, 1.0, 2000, vec![]).expect("valid tree");
    let tree = crr_bermudan(&spec, |_, s| (s - 100.0).max(0.0));
    out.push(OracleCheck {
        name: "tree European limit".into(),
        passed: (tree - bs).abs() < 1e-2,
        detail: format!("tree {tree:.6}, closed form {bs:.6}"),
    });

    let (c, p) = (
        bs_european(100.0, 90.0, 0.05, 0.1, 0.2, 3.0, OptionKind::Call).price,
        bs_european(100.0, 90.0, 0.05, 0.1, 0.2, 3.0, OptionKind::Put).price,
    );
    let parity = 100.0 * (-0.3f64).exp() - 90.0 * (-0.15f64).exp();
    out.push(OracleCheck {
        name: "put-call parity".into(),
        passed: (c - p - parity).abs() < 1e-10,
        detail: format!("C - P - parity = {:e}", c - p - parity),
    });
    out
}
