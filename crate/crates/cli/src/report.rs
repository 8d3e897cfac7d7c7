//! CSV rows, histogram files and the run manifest.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use bermudan_core::hedging::{HedgeMode, HedgeReport};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::run::PriceRun;

pub const PRICES_HEADER: &str = "d,s0,L_hat,t_L_seconds,U_hat,t_U_seconds,V_hat,ci_low,ci_high,K_L,K_U,J_inner,seed";
pub const HEDGE_HEADER: &str = "d,s0,M,ihe,ihs,ihs_over_V,t1_seconds,he,hs,hs_over_V,t2_seconds";

/// Columns holding wall-clock times; everything else is reproducible.
pub const TIMING_COLUMNS: [&str; 4] = ["t_L_seconds", "t_U_seconds", "t1_seconds", "t2_seconds"];

pub fn price_row(config: &ExperimentConfig, run: &PriceRun) -> String {
    let e = &run.estimate;
    format!(
        "{},{},{},{:.3},{},{:.3},{},{},{},{},{},{},{}",
        config.model.assets,
        config.model.s0,
        e.l_hat,
        run.t_lower,
        e.u_hat,
        run.t_upper,
        e.v_hat,
        e.ci_low,
        e.ci_high,
        e.k_l,
        e.k_u,
        e.j_inner,
        config.seed
    )
}

/// Interval mode leaves the total-error columns empty.
pub fn hedge_row(config: &ExperimentConfig, report: &HedgeReport, t1: f64, t2: Option<f64>) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{:.3},{},{},{},{}",
        config.model.assets,
        config.model.s0,
        config.model.rebalance_steps,
        report.ihe.mean,
        report.ihs.mean,
        report.ihs_over_v(),
        t1,
        opt(report.he.map(|s| s.mean)),
        opt(report.hs.map(|s| s.mean)),
        opt(report.hs_over_v()),
        t2.map(|t| format!("{t:.3}")).unwrap_or_default(),
    )
}

pub fn histogram_tag(config: &ExperimentConfig, mode: HedgeMode) -> String {
    let mode = match mode {
        HedgeMode::Interval => "interval",
        HedgeMode::Full => "full",
    };
    format!("d{}_s{}_M{}_{mode}", config.model.assets, config.model.s0, config.model.rebalance_steps)
}

/// Write `header` and `rows` to `dir/name`, replacing any previous file.
pub fn write_table(dir: &Path, name: &str, header: &str, rows: &[String]) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut f = io::BufWriter::new(fs::File::create(&path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(path)
}

pub fn write_histogram(dir: &Path, tag: &str, report: &HedgeReport) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("hist_{tag}.csv"));
    let mut f = io::BufWriter::new(fs::File::create(&path)?);
    report.histogram.write_csv(&mut f)?;
    f.flush()?;
    Ok(path)
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub config_sha256: String,
    pub seed: u64,
    pub scale: crate::config::Scale,
    pub version: &'static str,
    pub outputs: Vec<String>,
    pub config: &'a ExperimentConfig,
}

pub fn write_manifest(dir: &Path, command: &str, config: &ExperimentConfig, outputs: &[PathBuf]) -> io::Result<PathBuf> {
    let manifest = RunManifest {
        command,
        config_sha256: config.hash(),
        seed: config.seed,
        scale: config.scale,
        version: env!("CARGO_PKG_VERSION"),
        outputs: outputs
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
        config,
    };
    fs::create_dir_all(dir)?;
    let path = dir.join("run_manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Drop the timing columns of a CSV so two runs can be compared.
pub fn strip_timing(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let keep: Vec<bool> = header.split(',').map(|c| !TIMING_COLUMNS.contains(&c)).collect();
    let filter = |line: &str| {
        line.split(',')
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(v, _)| v)
            .collect::<Vec<_>>()
            .join(",")
    };
    std::iter::once(header).chain(lines).map(filter).collect::<Vec<_>>().join("\n")
}
