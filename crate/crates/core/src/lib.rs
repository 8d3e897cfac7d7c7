//! Pricing and hedging of Bermudan options with per-date neural regressions.
//!
//! The pipeline is:
//!
//! 1. [`market`] simulates correlated GBM paths and evaluates discounted payoffs.
//! 2. [`stopping`] fits one continuation-value network per exercise date by
//!    backward induction (a neural Longstaff–Schwartz) and exposes the induced
//!    stopping rule.
//! 3. [`pricing`] turns the stopping rule into a low-biased estimate, a
//!    nested-simulation dual upper bound and a confidence interval.
//! 4. [`hedging`] learns rebalancing strategies between exercise dates and
//!    reports hedging errors and shortfalls.
//!
//! [`oracle`] holds independent closed-form and lattice pricers used for
//! validation.

pub mod error;
pub mod hedging;
mod linalg;
pub mod market;
pub mod nn;
pub mod oracle;
pub mod pricing;
pub mod rng;
pub mod stats;
pub mod stopping;

pub use error::{Error, Result};
