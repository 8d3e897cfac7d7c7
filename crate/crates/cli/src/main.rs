use std::path::PathBuf;
use std::process::ExitCode;

use bermudan_cli::config::{load, Overrides, Scale};
use bermudan_cli::report::{self, HEDGE_HEADER, PRICES_HEADER};
use bermudan_cli::{exit, run_hedge, run_price, ExperimentConfig, HedgeOutcome};
use bermudan_core::hedging::HedgeMode;
use bermudan_core::market::{simulate_paths, Grid, Market};
use bermudan_core::oracle::self_check;
use bermudan_core::rng::{RngStreamKey, StreamFamily};
use clap::{Parser, Subcommand, ValueEnum};

/// Price and hedge Bermudan max-call options with neural continuation values.
#[derive(Parser)]
#[command(name = "bermudan", version)]
struct Cli {
    /// TOML file merged over the scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    scale: Option<Scale>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the stopping policy and report lower/upper bounds.
    Price,
    /// Price, then train and evaluate a hedging strategy.
    Hedge {
        #[arg(long, value_enum, default_value = "interval")]
        mode: ModeArg,
    },
    /// Cross-check the reference pricers.
    OracleCheck,
    /// Write simulated paths as CSV.
    SimulateDump {
        #[arg(long, default_value_t = 10)]
        paths: usize,
        #[arg(long, value_enum, default_value = "exercise")]
        grid: GridArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Interval,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Exercise,
    Hedge,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("BERMUDAN_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // results never depend on the worker count; this only sizes the pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let overrides = Overrides {
        scale: cli.scale,
        seed: cli.seed,
        output_dir: cli.out.clone(),
    };
    let config = match load(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    };
    let code = match dispatch(&cli.command, &config) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit::FAILURE
        }
    };
    ExitCode::from(code as u8)
}

type Outcome = Result<i32, Box<dyn std::error::Error>>;

fn dispatch(command: &Command, config: &ExperimentConfig) -> Outcome {
    match command {
        Command::Price => price(config),
        Command::Hedge { mode } => hedge(
            config,
            match mode {
                ModeArg::Interval => HedgeMode::Interval,
                ModeArg::Full => HedgeMode::Full,
            },
        ),
        Command::OracleCheck => oracle(config),
        Command::SimulateDump { paths, grid } => dump(
            config,
            *paths,
            match grid {
                GridArg::Exercise => Grid::Exercise,
                GridArg::Hedge => Grid::Hedge,
            },
        ),
    }
}

fn price(config: &ExperimentConfig) -> Outcome {
    let run = run_price(config)?;
    let e = &run.estimate;
    println!(
        "L = {:.4} ({:.1}s)  U = {:.4} ({:.1}s)  V = {:.4}  {:.0}% CI [{:.4}, {:.4}]",
        e.l_hat,
        run.t_lower,
        e.u_hat,
        run.t_upper,
        e.v_hat,
        100.0 * (1.0 - e.alpha),
        e.ci_low,
        e.ci_high
    );
    let dir = &config.output_dir;
    let prices = report::write_table(dir, "prices.csv", PRICES_HEADER, &[report::price_row(config, &run)])?;
    report::write_manifest(dir, "price", config, &[prices])?;
    Ok(duality_status(&run))
}

fn duality_status(run: &bermudan_cli::PriceRun) -> i32 {
    if run.estimate.duality_holds() {
        exit::OK
    } else {
        eprintln!("validation failed: upper bound lies below the lower bound beyond 3 standard errors");
        exit::VALIDATION
    }
}

fn hedge(config: &ExperimentConfig, mode: HedgeMode) -> Outcome {
    let run = run_price(config)?;
    let dir = &config.output_dir;
    let mut outputs = vec![report::write_table(dir, "prices.csv", PRICES_HEADER, &[report::price_row(config, &run)])?];
    println!("V = {:.4}", run.estimate.v_hat);
    match run_hedge(config, mode, &run)? {
        HedgeOutcome::NothingToHedge { payoff, continuation } => {
            println!("exercised at time 0 (payoff {payoff:.4} >= continuation {continuation:.4}); nothing to hedge");
        }
        HedgeOutcome::Hedged { report: r, t1, t2, .. } => {
            println!(
                "IHE = {:.4}  IHS = {:.4} ({:.2}% of V)",
                r.ihe.mean,
                r.ihs.mean,
                100.0 * r.ihs_over_v()
            );
            if let (Some(he), Some(hs)) = (r.he, r.hs) {
                println!("HE = {:.4}  HS = {:.4} ({:.2}% of V)", he.mean, hs.mean, 100.0 * hs.mean / r.v_hat);
            }
            outputs.push(report::write_table(dir, "hedge.csv", HEDGE_HEADER, &[report::hedge_row(config, &r, t1, t2)])?);
            outputs.push(report::write_histogram(dir, &report::histogram_tag(config, mode), &r)?);
        }
    }
    report::write_manifest(dir, "hedge", config, &outputs)?;
    Ok(duality_status(&run))
}

fn oracle(config: &ExperimentConfig) -> Outcome {
    let checks = self_check(config.seed, 25);
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if checks.iter().all(|c| c.passed) { exit::OK } else { exit::VALIDATION })
}

fn dump(config: &ExperimentConfig, paths: usize, grid: Grid) -> Outcome {
    let market = Market::new(config.model.params())?;
    let batch = simulate_paths(&market, grid, paths, RngStreamKey::new(StreamFamily::Train, config.seed, 0));
    std::fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join("paths.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    batch.write_csv(&mut f)?;
    drop(f);
    report::write_manifest(&config.output_dir, "simulate-dump", config, &[path.clone()])?;
    println!("wrote {}", path.display());
    Ok(exit::OK)
}
