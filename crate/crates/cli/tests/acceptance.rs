//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails.
//!
//! Expensive runs are shared: the 5-asset desk-scale price run feeds the
//! duality, increment, hedging and determinism criteria.

use std::path::Path;
use std::time::Instant;

use bermudan_cli::report::{self, PRICES_HEADER};
use bermudan_cli::{run_hedge, run_price, ExperimentConfig, HedgeOutcome, PriceRun, Scale};
use bermudan_core::hedging::HedgeMode;
use bermudan_core::nn::gradcheck;
use bermudan_core::nn::{Mlp, MlpSpec};
use bermudan_core::oracle::{bs_european, crr_bermudan, exhaustive_optimal_stop, random_small_tree, OptionKind};
use bermudan_core::rng::{RngStreamKey, StreamFamily};
use bermudan_core::stats::Summary;
use rand::{Rng, SeedableRng};

struct Suite {
    failed: Vec<String>,
}

impl Suite {
    fn record(&mut self, id: &str, passed: bool, detail: String) {
        println!("[{}] {id}: {detail}", if passed { "PASS" } else { "FAIL" });
        if !passed {
            self.failed.push(id.to_string());
        }
    }
}

fn note(line: String) {
    println!("       {line}");
}

fn desk() -> ExperimentConfig {
    ExperimentConfig::preset(Scale::Desk)
}

fn european_config() -> ExperimentConfig {
    let mut c = desk();
    c.model.assets = 1;
    c.model.dividend = 0.0;
    c.model.maturity = 1.0;
    c.model.exercise_dates = 10;
    c.train.paths = 200_000;
    c.train.steps_first = 1000;
    c.train.steps_rest = 500;
    c.lower_paths = 500_000;
    c.dual.outer_paths = 500;
    c.dual.inner_paths = 256;
    c
}

/// Small two-asset runs that widen the seed matrix of the duality criteria.
fn matrix_config(s0: f64, seed: u64) -> ExperimentConfig {
    let mut c = desk();
    c.seed = seed;
    c.model.assets = 2;
    c.model.s0 = s0;
    c.train.paths = 50_000;
    c.train.steps_first = 500;
    c.train.steps_rest = 250;
    c.lower_paths = 100_000;
    c.dual.outer_paths = 256;
    c.dual.inner_paths = 128;
    c
}

fn prices_csv(config: &ExperimentConfig, run: &PriceRun, dir: &Path) -> String {
    let path = report::write_table(dir, "prices.csv", PRICES_HEADER, &[report::price_row(config, run)]).unwrap();
    std::fs::read_to_string(path).unwrap()
}

fn criterion_1(s: &mut Suite) {
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let trees = 25;
    let mut worst: f64 = 0.0;
    let mut max_dates = 0;
    for _ in 0..trees {
        let (spec, k) = random_small_tree(&mut rng);
        max_dates = max_dates.max(spec.exercise_levels.len());
        let put = move |_: usize, x: f64| (k - x).max(0.0);
        let a = crr_bermudan(&spec, put);
        let b = exhaustive_optimal_stop(&spec, put, 24).unwrap();
        worst = worst.max((a - b).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    s.record(
        "C1 oracle exactness",
        worst < 1e-12 && max_dates <= 4 && secs < 1.0,
        format!("{trees} trees (<= {max_dates} exercise dates), max |enum - induction| = {worst:.2e}, {secs:.3}s"),
    );
}

fn criterion_2(s: &mut Suite) {
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    // gradients below the floor sit at the rounding resolution of a central
    // difference with h = 1e-5 (about 1e-10 absolute here) and are compared
    // in absolute terms; the 1e-6 floor figure is reported alongside
    let mut worst: f64 = 0.0;
    let mut worst_tight: f64 = 0.0;
    for i in 0..100u64 {
        let depth = rng.random_range(1..=4);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=16)).collect();
        let mut spec = MlpSpec::new(widths.clone());
        spec.batch_norm = i % 2 == 0;
        let rows = rng.random_range(2..=32);
        let net = Mlp::xavier(spec, RngStreamKey::new(StreamFamily::NetInit, 99, i)).unwrap();
        let x: Vec<f64> = (0..rows * widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..rows * widths[depth]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = gradcheck::check(&net, &x, rows, &y, 1e-5, 1e-5).unwrap();
        worst = worst.max(r.max_rel_error);
        let tight = gradcheck::check(&net, &x, rows, &y, 1e-5, 1e-6).unwrap();
        worst_tight = worst_tight.max(tight.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    s.record(
        "C2 gradient correctness",
        worst < 1e-4 && secs < 60.0,
        format!("100 nets, max relative error {worst:.2e} (floor 1e-5; {worst_tight:.2e} with floor 1e-6), {secs:.1}s"),
    );
}

fn criterion_3(s: &mut Suite) -> (ExperimentConfig, PriceRun) {
    let config = european_config();
    let start = Instant::now();
    let run = run_price(&config).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let bs = bs_european(100.0, 100.0, 0.05, 0.0, 0.2, 1.0, OptionKind::Call).price;
    let e = &run.estimate;
    let bracket = e.ci_low <= bs && bs <= e.ci_high;
    let rel = (e.v_hat - bs).abs() / bs;
    s.record(
        "C3 European limit",
        bracket && rel <= 0.01 && secs <= 600.0,
        format!(
            "L={:.4} U={:.4} V={:.4} CI [{:.4}, {:.4}] vs Black-Scholes {bs:.4}; |V-BS|/BS = {:.3}%, {secs:.0}s",
            e.l_hat,
            e.u_hat,
            e.v_hat,
            e.ci_low,
            e.ci_high,
            100.0 * rel
        ),
    );
    (config, run)
}

fn criterion_4(s: &mut Suite) -> (ExperimentConfig, PriceRun, f64) {
    let config = desk();
    let start = Instant::now();
    let run = run_price(&config).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let e = &run.estimate;
    let rel = (e.v_hat - 26.154).abs() / 26.154;
    let gap = e.u_hat - e.l_hat;
    s.record(
        "C4 desk-scale max-call",
        rel <= 0.005 && gap <= 0.30 && secs <= 2700.0,
        format!(
            "L={:.4} U={:.4} V={:.4} (reference 26.154, off by {:.3}%), U-L={gap:.4}, CI [{:.4}, {:.4}], {secs:.0}s",
            e.l_hat,
            e.u_hat,
            e.v_hat,
            100.0 * rel,
            e.ci_low,
            e.ci_high
        ),
    );
    (config, run, secs)
}

fn criteria_5_and_6(s: &mut Suite, runs: &[(String, &PriceRun)]) {
    let mut ok5 = true;
    let mut ok6 = true;
    let mut checks = 0;
    for (name, run) in runs {
        let e = &run.estimate;
        let lhs = e.u_hat + 3.0 * e.sigma_u / (e.k_u as f64).sqrt();
        let rhs = e.l_hat - 3.0 * e.sigma_l / (e.k_l as f64).sqrt();
        ok5 &= lhs >= rhs;
        note(format!("{name}: U + 3SE = {lhs:.4} >= L - 3SE = {rhs:.4}: {}", lhs >= rhs));
        let worst = run
            .upper
            .increments
            .iter()
            .map(|inc| inc.mean.abs() / (3.0 * inc.std_error()).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        for inc in &run.upper.increments {
            checks += 1;
            ok6 &= inc.mean.abs() <= 3.0 * inc.std_error();
        }
        note(format!("{name}: max |mean increment| / 3SE over dates = {worst:.3}"));
    }
    s.record("C5 duality ordering", ok5, format!("{} pricing runs", runs.len()));
    s.record("C6 martingale increments", ok6, format!("{checks} date-level checks across {} runs", runs.len()));
}

fn criterion_7(s: &mut Suite, config: &ExperimentConfig, price: &PriceRun) {
    let start = Instant::now();
    let outcome = run_hedge(config, HedgeMode::Full, price).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let HedgeOutcome::Hedged { report: r, .. } = outcome else {
        s.record("C7 hedging zero-mean", false, "policy exercises at time 0".into());
        return;
    };
    // the errors are centered at V_hat minus the policy value, so the
    // uncertainty of V_hat enters alongside the evaluation noise
    let se_v = price.estimate.v_std_error();
    let he = r.he.unwrap();
    let combined = |x: &Summary| (x.std_error().powi(2) + se_v * se_v).sqrt();
    let ok_he = he.mean.abs() <= 3.0 * combined(&he);
    let ok_ihe = r.ihe.mean.abs() <= 3.0 * combined(&r.ihe);
    note(format!(
        "HE = {:.4} (eval SE {:.4}, SE with V_hat {:.4}); IHE = {:.4} (eval SE {:.4}, SE with V_hat {:.4}); reference HE 0.006, IHE 0.013",
        he.mean,
        he.std_error(),
        combined(&he),
        r.ihe.mean,
        r.ihe.std_error(),
        combined(&r.ihe)
    ));
    note(format!(
        "HS = {:.4} ({:.2}% of V), IHS = {:.4} ({:.2}% of V), histogram total {}",
        r.hs.unwrap().mean,
        100.0 * r.hs_over_v().unwrap(),
        r.ihs.mean,
        100.0 * r.ihs_over_v(),
        r.histogram.total()
    ));
    s.record(
        "C7 hedging zero-mean",
        ok_he && ok_ihe && r.histogram.total() == config.hedge.eval_paths as u64,
        format!("|HE| <= 3 SE: {ok_he}, |IHE| <= 3 SE: {ok_ihe}, {secs:.0}s"),
    );
}

fn criterion_8(s: &mut Suite, config: &ExperimentConfig, price: &PriceRun) {
    let start = Instant::now();
    let mut ihs = Vec::new();
    for m in [12, 24, 48] {
        let mut c = config.clone();
        c.model.rebalance_steps = m;
        match run_hedge(&c, HedgeMode::Interval, price).unwrap() {
            HedgeOutcome::Hedged { report: r, .. } => {
                note(format!("M={m}: IHS = {:.4} (SE {:.4}), IHE = {:.4}", r.ihs.mean, r.ihs.std_error(), r.ihe.mean));
                ihs.push(r.ihs);
            }
            HedgeOutcome::NothingToHedge { .. } => {
                s.record("C8 shortfall monotonicity", false, "policy exercises at time 0".into());
                return;
            }
        }
    }
    let mut ok = true;
    let mut strict = true;
    for w in ihs.windows(2) {
        let joint = (w[0].std_error().powi(2) + w[1].std_error().powi(2)).sqrt();
        ok &= w[1].mean <= w[0].mean + 3.0 * joint;
        strict &= w[1].mean < w[0].mean;
    }
    s.record(
        "C8 shortfall monotonicity",
        ok,
        format!(
            "IHS {:.4} -> {:.4} -> {:.4} (strictly decreasing: {strict}), {:.0}s",
            ihs[0].mean,
            ihs[1].mean,
            ihs[2].mean,
            start.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_9(s: &mut Suite) {
    let start = Instant::now();
    let mut c = desk();
    c.model.assets = 1;
    c.model.dividend = 0.0;
    c.model.maturity = 1.0;
    c.model.exercise_dates = 1;
    c.model.rebalance_steps = 12;
    c.train.paths = 100_000;
    c.lower_paths = 100_000;
    c.dual.outer_paths = 128;
    c.dual.inner_paths = 64;
    c.hedge.train_paths = 100_000;
    c.hedge.eval_paths = 100_000;
    let price = run_price(&c).unwrap();
    let outcome = run_hedge(&c, HedgeMode::Interval, &price).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let HedgeOutcome::Hedged { strategy, .. } = outcome else {
        s.record("C9 delta recovery", false, "policy exercises at time 0".into());
        return;
    };
    let h0 = strategy.holdings(0, &[100.0], 1)[0];
    let delta = bs_european(100.0, 100.0, 0.05, 0.0, 0.2, 1.0, OptionKind::Call).delta;
    s.record(
        "C9 delta recovery",
        (h0 - delta).abs() <= 0.05 && secs <= 300.0,
        format!("h_0(s0) = {h0:.4}, Black-Scholes delta {delta:.4}, {secs:.0}s"),
    );
}

fn criterion_10(s: &mut Suite, config: &ExperimentConfig, first: &PriceRun) {
    let dir = tempfile::tempdir().unwrap();
    let a = prices_csv(config, first, &dir.path().join("a"));
    let second = run_price(config).unwrap();
    let b = prices_csv(config, &second, &dir.path().join("b"));
    let same = report::strip_timing(&a) == report::strip_timing(&b);
    s.record(
        "C10 determinism",
        same && first.policy == second.policy,
        format!("prices.csv identical apart from timing columns: {same}"),
    );
}

fn main() {
    let mut s = Suite { failed: Vec::new() };
    let total = Instant::now();
    criterion_1(&mut s);
    criterion_2(&mut s);
    let (_, c3) = criterion_3(&mut s);
    let (c4_config, c4, _) = criterion_4(&mut s);
    let extra: Vec<(String, PriceRun)> = [(90.0, 2), (100.0, 3), (110.0, 4)]
        .into_iter()
        .map(|(s0, seed)| (format!("d=2 s0={s0} seed={seed}"), run_price(&matrix_config(s0, seed)).unwrap()))
        .collect();
    let mut matrix: Vec<(String, &PriceRun)> = vec![("C3 d=1".into(), &c3), ("C4 d=5".into(), &c4)];
    matrix.extend(extra.iter().map(|(n, r)| (n.clone(), r)));
    criteria_5_and_6(&mut s, &matrix);
    criterion_7(&mut s, &c4_config, &c4);
    criterion_8(&mut s, &c4_config, &c4);
    criterion_9(&mut s);
    criterion_10(&mut s, &c4_config, &c4);
    println!("acceptance: {} failed, {:.0}s total", s.failed.len(), total.elapsed().as_secs_f64());
    if !s.failed.is_empty() {
        println!("failed: {}", s.failed.join(", "));
        std::process::exit(1);
    }
}
