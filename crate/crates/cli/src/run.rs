//! Train, price, hedge and evaluate one configured experiment.

use std::time::Instant;

use bermudan_core::hedging::{evaluate, train_full_hedge_with, train_interval_hedge, HedgeMode, HedgeReport, HedgeStrategy};
use bermudan_core::market::{extend_state, simulate_paths, Grid, Market};
use bermudan_core::pricing::{lower_bound, point_and_interval, upper_bound, PriceEstimate, UpperBound};
use bermudan_core::rng::{RngStreamKey, StreamFamily};
use bermudan_core::stopping::{train_policy, StoppingPolicy};
use bermudan_core::Error;

use crate::config::ExperimentConfig;

/// A trained policy with its price bounds.
#[derive(Debug, Clone)]
pub struct PriceRun {
    pub policy: StoppingPolicy,
    pub estimate: PriceEstimate,
    pub upper: UpperBound,
    /// Training plus lower-bound evaluation.
    pub t_lower: f64,
    pub t_upper: f64,
}

pub fn run_price(config: &ExperimentConfig) -> Result<PriceRun, Error> {
    let market = Market::new(config.model.params())?;
    let payoff = market.payoff();
    let seed = config.seed;

    let start = Instant::now();
    let paths = simulate_paths(&market, Grid::Exercise, config.train.paths, RngStreamKey::new(StreamFamily::Train, seed, 0));
    let paths = if config.train.extended_state { extend_state(&paths, &payoff) } else { paths };
    let policy = train_policy(&paths, &payoff, &config.train, seed)?;
    drop(paths);
    let lower = lower_bound(&policy, &market, config.lower_paths, RngStreamKey::new(StreamFamily::Lower, seed, 0));
    let t_lower = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let upper = upper_bound(&policy, &market, &config.dual, seed)?;
    let t_upper = start.elapsed().as_secs_f64();

    let estimate = point_and_interval(&lower, &upper.estimate, config.alpha, config.dual.inner_paths);
    Ok(PriceRun {
        policy,
        estimate,
        upper,
        t_lower,
        t_upper,
    })
}

#[derive(Debug, Clone)]
pub enum HedgeOutcome {
    Hedged {
        strategy: HedgeStrategy,
        report: HedgeReport,
        /// Training time of the first interval.
        t1: f64,
        /// Training time of all intervals (full mode).
        t2: Option<f64>,
    },
    /// The policy exercises at time 0.
    NothingToHedge { payoff: f64, continuation: f64 },
}

/// Hedge the option priced in `price`, capital `V_hat`.
pub fn run_hedge(config: &ExperimentConfig, mode: HedgeMode, price: &PriceRun) -> Result<HedgeOutcome, Error> {
    let market = Market::new(config.model.params())?;
    let v_hat = price.estimate.v_hat;
    let seed = config.seed;
    let start = Instant::now();
    let trained = match mode {
        HedgeMode::Interval => train_interval_hedge(&price.policy, v_hat, &market, &config.hedge, seed).map(|s| (s, start.elapsed().as_secs_f64(), None)),
        HedgeMode::Full => {
            let mut t1 = 0.0;
            train_full_hedge_with(&price.policy, &market, &config.hedge, seed, |n| {
                if n == 1 {
                    t1 = start.elapsed().as_secs_f64();
                }
            })
            .map(|s| (s, t1, Some(start.elapsed().as_secs_f64())))
        }
    };
    let (strategy, t1, t2) = match trained {
        Ok(t) => t,
        Err(Error::NothingToHedge { payoff, continuation }) => return Ok(HedgeOutcome::NothingToHedge { payoff, continuation }),
        Err(e) => return Err(e),
    };
    let report = evaluate(&strategy, &price.policy, v_hat, &market, config.hedge.eval_paths, seed, &config.hedge);
    Ok(HedgeOutcome::Hedged { strategy, report, t1, t2 })
}
