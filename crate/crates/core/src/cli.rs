//! Command-line front end: config loading, the four subcommands, CSV
//! emission, and the run manifest with content checksums.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::{calibrate, ImpactSeries};
use crate::error::{Error, Result};
use crate::model::{EtaKind, ExecutionProblem, ImpactModel, SignalModel, TimeGrid};
use crate::pdeverify::{epsilon_scaling_study, PdeGrid};
use crate::riccati::solve_riccati;
use crate::sim::{inventory_quantiles, savings_bps, simulate, SimBatch, SimConfig};
use crate::signal::StrategyTables;
use crate::strategy::PolicyKind;

/// JSON configuration file: problem / impact / signal sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: ProblemSection,
    pub impact: ImpactSection,
    pub signal: SignalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub gamma: Vec<f64>,
    pub b: f64,
    pub sigma: f64,
    pub phi: f64,
    pub varphi: f64,
    pub horizon: f64,
    pub s0: f64,
    pub x0: f64,
    pub q0: f64,
    pub mu0: Vec<f64>,
}

fn default_eta_clamp() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactSection {
    pub kappa: Vec<f64>,
    pub eta_kind: EtaKind,
    pub eps: f64,
    pub beta_param: f64,
    #[serde(default = "default_eta_clamp")]
    pub eta_clamp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub mu_bar: Vec<f64>,
    pub rho: Vec<f64>,
}

fn matrix_from_rows(rows: &[Vec<f64>], key: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::Config(format!("signal.{key} must be a nonempty matrix")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("signal.{key} has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Build and validate the three model objects.
    pub fn build(&self) -> Result<(ExecutionProblem, ImpactModel, SignalModel)> {
        let problem = ExecutionProblem {
            gamma: DVector::from_column_slice(&self.problem.gamma),
            b: self.problem.b,
            sigma: self.problem.sigma,
            phi: self.problem.phi,
            varphi: self.problem.varphi,
            horizon: self.problem.horizon,
            s0: self.problem.s0,
            x0: self.problem.x0,
            q0: self.problem.q0,
            mu0: DVector::from_column_slice(&self.problem.mu0),
        };
        problem
            .validate()
            .map_err(|e| Error::Config(format!("problem section: {e}")))?;
        let impact = ImpactModel::new(
            self.impact.kappa.clone(),
            self.impact.eta_kind,
            self.impact.eps,
            self.impact.beta_param,
            self.impact.eta_clamp,
        )
        .map_err(|e| Error::Config(format!("impact section: {e}")))?;
        let signal = SignalModel::new(
            matrix_from_rows(&self.signal.a, "a")?,
            matrix_from_rows(&self.signal.b, "b")?,
            DVector::from_column_slice(&self.signal.mu_bar),
            DVector::from_column_slice(&self.signal.rho),
        )
        .map_err(|e| Error::Config(format!("signal section: {e}")))?;
        if problem.dim() != signal.dim() {
            return Err(Error::Config(format!(
                "problem.gamma has dimension {} but signal.a is {}-dimensional",
                problem.dim(),
                signal.dim()
            )));
        }
        Ok((problem, impact, signal))
    }
}

/// Run manifest: written (without checksums) before outputs, finalized after.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub out_dir: String,
    pub runtime_seconds: f64,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seed: Option<u64>, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            out_dir: out_dir.display().to_string(),
            runtime_seconds: 0.0,
            outputs: Vec::new(),
        }
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        fs::write(out_dir.join("manifest.json"), text)?;
        Ok(())
    }

    fn finalize(&mut self, out_dir: &Path, files: &[String], started: Instant) -> Result<()> {
        self.runtime_seconds = started.elapsed().as_secs_f64();
        self.outputs = files
            .iter()
            .map(|f| -> Result<OutputEntry> {
                let bytes = fs::read(out_dir.join(f))?;
                let digest = Sha256::digest(&bytes);
                Ok(OutputEntry { file: f.clone(), sha256: format!("{digest:x}") })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write(out_dir)
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        let _ = writeln!(text, "{}", row.join(","));
    }
    fs::write(path, text)?;
    Ok(())
}

fn parse_policy(name: &str) -> Result<PolicyKind> {
    match name.trim() {
        "ac" => Ok(PolicyKind::Ac),
        "ts" => Ok(PolicyKind::Ts),
        "first_order" => Ok(PolicyKind::FirstOrder { apply_impact_modulation: true }),
        "first_order_flat" => Ok(PolicyKind::FirstOrder { apply_impact_modulation: false }),
        other => Err(Error::Config(format!(
            "unknown policy {other:?}; expected ac, ts, first_order, or first_order_flat"
        ))),
    }
}

fn policy_name(policy: PolicyKind) -> &'static str {
    match policy {
        PolicyKind::Ac => "ac",
        PolicyKind::Ts => "ts",
        PolicyKind::FirstOrder { apply_impact_modulation: true } => "first_order",
        PolicyKind::FirstOrder { apply_impact_modulation: false } => "first_order_flat",
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fmr-exec",
    about = "Optimal execution under fast mean-reverting stochastic price impact",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the diurnal impact curve and OU factor parameters from a CSV series.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the Riccati system and emit strategy tables for a phi sweep.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// phi values as multiples of the permanent impact b.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 5.0, 10.0])]
        phi_multiples: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
    },
    /// Simulate coupled batches under several policies and compare costs.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// First policy is the benchmark for quantiles and histograms.
        #[arg(long, value_delimiter = ',', default_value = "ac,ts,first_order")]
        policies: Vec<String>,
        #[arg(long, default_value_t = 2_000)]
        paths: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override phi with multiple * b.
        #[arg(long)]
        phi_multiple: Option<f64>,
        #[arg(long, default_value_t = 23_400)]
        steps: usize,
        #[arg(long, default_value_t = 10_000)]
        table_steps: usize,
        /// Trajectory subsampling stride (steps per stored sample).
        #[arg(long, default_value_t = 60)]
        stride: usize,
        /// Also dump subsampled trajectories to paths.csv.
        #[arg(long, default_value_t = false)]
        dump_paths: bool,
    },
    /// Solve the full (t, y) PDE across an eps ladder and report the scaling.
    VerifyAccuracy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.1, 0.05, 0.025])]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 400)]
        y_nodes: usize,
    },
}

/// Entry point used by `main`; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Calibrate { input, order, out } => cmd_calibrate(&input, order, &out),
        Command::Solve { config, out, phi_multiples, steps } => {
            cmd_solve(&config, &out, &phi_multiples, steps)
        }
        Command::Compare {
            config,
            out,
            policies,
            paths,
            seed,
            phi_multiple,
            steps,
            table_steps,
            stride,
            dump_paths,
        } => cmd_compare(
            &config,
            &out,
            &policies,
            paths,
            seed,
            phi_multiple,
            steps,
            table_steps,
            stride,
            dump_paths,
        ),
        Command::VerifyAccuracy { config, out, eps, y_nodes } => {
            cmd_verify_accuracy(&config, &out, &eps, y_nodes)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_)
                | Error::Parse { .. }
                | Error::InvalidParameter(_)
                | Error::DimensionMismatch { .. }
                | Error::Io(_) => 2,
                _ => 3,
            }
        }
    }
}

pub fn cmd_calibrate(input: &Path, order: usize, out: &Path) -> Result<()> {
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let text = fs::read_to_string(input)?;
    let series = ImpactSeries::from_csv(&text)?;
    let dt = 1.0 / series.len() as f64;

    let mut manifest = RunManifest::new(
        "calibrate",
        serde_json::json!({"input": input.display().to_string(), "order": order, "dt": dt}),
        None,
        out,
    );
    manifest.write(out)?;

    let result = calibrate(&series, order, dt)?;
    let report = serde_json::json!({
        "alpha": result.alpha,
        "eps_hat": result.ou.eps_hat,
        "beta_hat": result.ou.beta_hat,
        "eps_ci": [result.ou.eps_ci.0, result.ou.eps_ci.1],
        "beta_ci": [result.ou.beta_ci.0, result.ou.beta_ci.1],
        "slope": result.ou.slope,
        "boundary": result.ou.boundary,
        "mean_eta": result.mean_eta,
        "r_squared": result.r_squared,
        "fit_positive": result.fit_positive,
        "n_samples": series.len(),
    });
    fs::write(
        out.join("calibration.json"),
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?,
    )?;
    let rows: Vec<Vec<String>> = result
        .eta_path
        .iter()
        .enumerate()
        .map(|(i, &e)| vec![fmt_num(series.time(i)), fmt_num(e)])
        .collect();
    write_csv(&out.join("eta_path.csv"), "t,eta", &rows)?;

    manifest.finalize(out, &["calibration.json".into(), "eta_path.csv".into()], started)
}

pub fn cmd_solve(config_path: &Path, out: &Path, phi_multiples: &[f64], steps: usize) -> Result<()> {
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let config = ConfigFile::load(config_path)?;
    let (base_problem, impact, signal) = config.build()?;

    let mut manifest = RunManifest::new(
        "solve",
        serde_json::json!({
            "config": serde_json::to_value(&config).unwrap(),
            "phi_multiples": phi_multiples,
            "steps": steps,
        }),
        None,
        out,
    );
    manifest.write(out)?;

    let d = signal.dim();
    let grid = TimeGrid::new(base_problem.horizon, steps)?;
    let mut files = Vec::new();
    for (idx, &mult) in phi_multiples.iter().enumerate() {
        let problem = ExecutionProblem { phi: mult * base_problem.b, ..base_problem.clone() };
        problem.validate()?;
        let riccati = solve_riccati(&problem, &impact, &grid)?;
        let tables = StrategyTables::build(&problem, &impact, &signal, &riccati)?;

        let mut header = String::from("t,chi,chi_over_kappa,log_g");
        for tag in ["Phi0", "Phi1", "Phi2"] {
            for i in 0..d {
                for j in 0..d {
                    let _ = write!(header, ",{tag}_{i}{j}");
                }
            }
        }
        for i in 0..d {
            let _ = write!(header, ",C1_{i}");
        }
        let mut rows = Vec::with_capacity(steps + 1);
        for n in 0..=steps {
            let mut row = vec![
                fmt_num(grid.t[n]),
                fmt_num(riccati.chi[n]),
                fmt_num(riccati.chi[n] / riccati.kappa[n]),
                fmt_num(riccati.log_g[n]),
            ];
            for table in [&tables.phi0, &tables.phi1, &tables.phi2] {
                for i in 0..d {
                    for j in 0..d {
                        row.push(fmt_num(table[n][(i, j)]));
                    }
                }
            }
            for i in 0..d {
                row.push(fmt_num(tables.c1[n][i]));
            }
            rows.push(row);
        }
        let name = format!("tables_phi_{idx}.csv");
        write_csv(&out.join(&name), &header, &rows)?;
        files.push(name);
    }
    manifest.finalize(out, &files, started)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_compare(
    config_path: &Path,
    out: &Path,
    policy_names: &[String],
    n_paths: usize,
    seed: u64,
    phi_multiple: Option<f64>,
    steps: usize,
    table_steps: usize,
    stride: usize,
    dump_paths: bool,
) -> Result<()> {
    let started = Instant::now();
    fs::create_dir_all(out)?;
    if policy_names.len() < 2 {
        return Err(Error::Config("compare needs at least 2 policies".into()));
    }
    let policies: Vec<PolicyKind> =
        policy_names.iter().map(|p| parse_policy(p)).collect::<Result<_>>()?;
    let config = ConfigFile::load(config_path)?;
    let (mut problem, impact, signal) = config.build()?;
    if let Some(mult) = phi_multiple {
        problem.phi = mult * problem.b;
        problem.validate()?;
    }

    let mut manifest = RunManifest::new(
        "compare",
        serde_json::json!({
            "config": serde_json::to_value(&config).unwrap(),
            "policies": policy_names,
            "paths": n_paths,
            "phi_multiple": phi_multiple,
            "steps": steps,
            "table_steps": table_steps,
            "stride": stride,
        }),
        Some(seed),
        out,
    );
    manifest.write(out)?;

    let grid = TimeGrid::new(problem.horizon, table_steps)?;
    let riccati = solve_riccati(&problem, &impact, &grid)?;
    let tables = StrategyTables::build(&problem, &impact, &signal, &riccati)?;

    // Coupled batches: same seed, per-path RNG derived identically.
    let mut batches: Vec<(PolicyKind, SimBatch)> = Vec::with_capacity(policies.len());
    for &policy in &policies {
        let cfg = SimConfig { n_paths, n_steps: steps, seed, policy, store_stride: Some(stride) };
        batches.push((policy, simulate(&tables, &cfg)?));
    }
    let benchmark = &batches[0].1;

    // summary.csv
    let mut summary_rows = Vec::new();
    for (policy, batch) in &batches {
        let bps = savings_bps(batch, benchmark)?;
        let mean_cost =
            batch.terminal.iter().map(|r| r.cost).sum::<f64>() / batch.terminal.len() as f64;
        let mut q: Vec<f64> = batch.terminal.iter().map(|r| r.q_t).collect();
        q.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quant = |lv: f64| -> f64 {
            let pos = lv * (q.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let w = pos - lo as f64;
            if lo + 1 < q.len() { (1.0 - w) * q[lo] + w * q[lo + 1] } else { q[lo] }
        };
        summary_rows.push(vec![
            policy_name(*policy).to_string(),
            fmt_num(problem.phi),
            fmt_num(mean_cost),
            fmt_num(bps.median),
            bps.excluded.to_string(),
            fmt_num(quant(0.1)),
            fmt_num(quant(0.5)),
            fmt_num(quant(0.9)),
        ]);
    }
    write_csv(
        &out.join("summary.csv"),
        "policy,phi,mean_cost,median_bps_vs_benchmark,excluded_paths,q10_terminal_inventory,q50_terminal_inventory,q90_terminal_inventory",
        &summary_rows,
    )?;

    // quantiles.csv: inventory deviation of each non-benchmark policy
    let levels = [0.1, 0.5, 0.9];
    let mut quantile_rows = Vec::new();
    for (policy, batch) in batches.iter().skip(1) {
        let curves = inventory_quantiles(batch, benchmark, &levels)?;
        for (t, qs) in curves {
            for (lv, v) in levels.iter().zip(qs) {
                quantile_rows.push(vec![
                    policy_name(*policy).to_string(),
                    fmt_num(t),
                    fmt_num(*lv),
                    fmt_num(v),
                ]);
            }
        }
    }
    write_csv(&out.join("quantiles.csv"), "policy,t,level,deviation", &quantile_rows)?;

    // bps_histogram.csv
    let mut hist_rows = Vec::new();
    for (policy, batch) in batches.iter().skip(1) {
        let bps = savings_bps(batch, benchmark)?;
        for (lo, hi, count) in bps.histogram(40) {
            hist_rows.push(vec![
                policy_name(*policy).to_string(),
                fmt_num(lo),
                fmt_num(hi),
                count.to_string(),
            ]);
        }
    }
    write_csv(&out.join("bps_histogram.csv"), "policy,bin_lo,bin_hi,count", &hist_rows)?;

    let mut files = vec!["summary.csv".into(), "quantiles.csv".into(), "bps_histogram.csv".into()];

    if dump_paths {
        let d = signal.dim();
        let mut header = String::from("policy,path_id,t,S,X,Q,nu");
        for i in 0..d {
            let _ = write!(header, ",mu_{i}");
        }
        header.push_str(",Y");
        let mut rows = Vec::new();
        for (policy, batch) in &batches {
            if let Some(trajs) = &batch.trajectories {
                for (pid, tr) in trajs.iter().enumerate() {
                    for n in 0..tr.t.len() {
                        let mut row = vec![
                            policy_name(*policy).to_string(),
                            pid.to_string(),
                            fmt_num(tr.t[n]),
                            fmt_num(tr.s[n]),
                            fmt_num(tr.x[n]),
                            fmt_num(tr.q[n]),
                            fmt_num(tr.nu[n]),
                        ];
                        for i in 0..d {
                            row.push(fmt_num(tr.mu[n][i]));
                        }
                        row.push(fmt_num(tr.y[n]));
                        rows.push(row);
                    }
                }
            }
        }
        write_csv(&out.join("paths.csv"), &header, &rows)?;
        files.push("paths.csv".into());
    }

    manifest.finalize(out, &files, started)
}

pub fn cmd_verify_accuracy(
    config_path: &Path,
    out: &Path,
    eps_list: &[f64],
    y_nodes: usize,
) -> Result<()> {
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let config = ConfigFile::load(config_path)?;
    let (problem, impact, _signal) = config.build()?;

    let mut manifest = RunManifest::new(
        "verify-accuracy",
        serde_json::json!({
            "config": serde_json::to_value(&config).unwrap(),
            "eps": eps_list,
            "y_nodes": y_nodes,
        }),
        None,
        out,
    );
    manifest.write(out)?;

    if eps_list.len() < 2 {
        eprintln!("warning: a single eps yields no convergence ratios");
    }
    let rows_data = epsilon_scaling_study(&problem, &impact, eps_list, y_nodes)?;
    let rows: Vec<Vec<String>> = rows_data
        .iter()
        .map(|r| {
            vec![
                fmt_num(r.eps),
                fmt_num(r.sup_error),
                if r.ratio.is_nan() { String::new() } else { fmt_num(r.ratio) },
                fmt_num(r.c_hat),
                if r.sup_error < 1e-6 { "PASS".into() } else { String::new() },
            ]
        })
        .collect();
    write_csv(&out.join("accuracy.csv"), "eps,sup_error,ratio,C_hat,flag", &rows)?;
    let _ = PdeGrid::standard(&impact, problem.horizon); // default grid documented in manifest config
    manifest.finalize(out, &["accuracy.csv".into()], started)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_config_json() -> String {
        serde_json::json!({
            "problem": {
                "gamma": [0.1],
                "b": 1.4275e-6,
                "sigma": 0.1,
                "phi": 1.4275e-6,
                "varphi": 1.4275e-3,
                "horizon": 1.0,
                "s0": 100.0,
                "x0": 0.0,
                "q0": 1.0e4,
                "mu0": [1.0]
            },
            "impact": {
                "kappa": [2.5e-6, -3.0e-6, 2.0e-6],
                "eta_kind": "identity",
                "eps": 0.0035,
                "beta_param": 0.26984
            },
            "signal": {
                "a": [[-10.0]],
                "b": [[1.0]],
                "mu_bar": [0.0],
                "rho": [-0.5]
            }
        })
        .to_string()
    }

    #[test]
    fn config_round_trip() {
        let cfg: ConfigFile = serde_json::from_str(&sample_config_json()).unwrap();
        let (problem, impact, signal) = cfg.build().unwrap();
        assert_eq!(problem.dim(), 1);
        assert_eq!(impact.kappa.len(), 3);
        assert_eq!(signal.dim(), 1);
    }

    #[test]
    fn missing_section_names_key() {
        let text = r#"{"problem": {}, "impact": {}}"#;
        let err = serde_json::from_str::<ConfigFile>(text).unwrap_err().to_string();
        assert!(err.contains("signal") || err.contains("missing field"), "{err}");
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(parse_policy("ac").unwrap(), PolicyKind::Ac);
        assert_eq!(parse_policy(" ts ").unwrap(), PolicyKind::Ts);
        assert!(matches!(
            parse_policy("first_order").unwrap(),
            PolicyKind::FirstOrder { apply_impact_modulation: true }
        ));
        assert!(parse_policy("bogus").is_err());
    }

    #[test]
    fn number_format_round_trips() {
        for &v in &[1.0, -2.5e-6, std::f64::consts::PI, 1.4275e-6] {
            let s = fmt_num(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }
}
