//! Command-line front end. Every subcommand maps onto a [`TaskSpec`]; a
//! scenario file bundles an environment, a task and an output path so the
//! same runs can be replayed with `revrisk run --config`.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Deserializer};

use crate::asym_fixed_point::{pi_payment_rule, solve_fixed_point, FixedPointOptions};
use crate::environment::{AuctionEnvironment, EnvSpec, Outcome};
use crate::error::{Error, Result};
use crate::expectation::ProfileSampler;
use crate::expost_qp::{build_qp, qp_rule, solve_qp, QpOptions};
use crate::multi_unit::{compute_psi, verify_psi_bounds, zero_variance_rule};
use crate::payment_rules::{make_rule, verify_ret_report, PaymentRule, RetMethod, RuleKind};
use crate::risk::{
    compare_discriminatory_uniform, compare_rules, mc_stats, parse_risk_list, quadrature_stats,
    revenue_histogram, RevenueStats, RiskMeasure, VarianceComparison,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VERIFICATION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

/// Default acceptance threshold for residuals of solved rules.
const RULE_RESIDUAL_THRESHOLD: f64 = 1e-4;
/// Monte Carlo RET checks pass within this many standard errors.
const RET_Z_SCORE: f64 = 4.0;

#[derive(Debug, Parser)]
#[command(
    name = "revrisk",
    version,
    about = "Revenue-risk laboratory for auctions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Revenue mean, variance and risk measures of one rule.
    Simulate {
        #[command(flatten)]
        env: EnvArg,
        #[command(flatten)]
        task: SimulateTask,
    },
    /// Pairwise revenue-variance comparison on common draws.
    Compare {
        #[command(flatten)]
        env: EnvArg,
        #[command(flatten)]
        task: CompareTask,
    },
    /// Revenue histogram of one rule.
    Histogram {
        #[command(flatten)]
        env: EnvArg,
        #[command(flatten)]
        task: HistogramTask,
    },
    /// Solve the asymmetric single-item fixed point.
    SolveAsymmetric {
        #[command(flatten)]
        env: EnvArg,
        #[command(flatten)]
        task: AsymmetricTask,
    },
    /// Evaluate the constant-revenue multi-unit rule.
    SolvePsi {
        #[command(flatten)]
        env: EnvArg,
        #[command(flatten)]
        task: PsiTask,
    },
    /// Solve the ex-post IR quadratic program.
    SolveQp {
        #[command(flatten)]
        env: EnvArg,
        #[command(flatten)]
        task: QpTask,
    },
    /// Check revenue equivalence and the participation flags of a rule.
    Verify {
        #[command(flatten)]
        env: EnvArg,
        #[command(flatten)]
        task: VerifyTask,
    },
    /// Run a scenario file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct EnvArg {
    /// Environment JSON file.
    #[arg(long = "env")]
    pub env: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Scenario file: one environment, one task, one output path.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub env: EnvSpec,
    pub task: TaskSpec,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    Simulate(SimulateTask),
    Compare(CompareTask),
    Histogram(HistogramTask),
    SolveAsymmetric(AsymmetricTask),
    SolvePsi(PsiTask),
    SolveQp(QpTask),
    Verify(VerifyTask),
}

/// Parameters of the solved rules when they are requested by name.
#[derive(Debug, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    /// Grid of the asymmetric fixed point.
    #[arg(long, default_value_t = 2048)]
    pub pi_grid: usize,
    /// Grid of the multi-unit psi curve.
    #[arg(long, default_value_t = 4096)]
    pub psi_grid: usize,
    /// Resolution of the ex-post QP.
    #[arg(long, default_value_t = 80)]
    pub qp_m: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            pi_grid: 2048,
            psi_grid: 4096,
            qp_m: 80,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mc,
    Quadrature,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateTask {
    #[arg(long)]
    pub rule: RuleKind,
    #[arg(long, default_value = "1000000", value_parser = parse_count)]
    #[serde(default = "default_samples", deserialize_with = "de_count")]
    pub samples: usize,
    /// Comma-separated risk measures, e.g. `power:2,exp:1.0,hinge:0.5`.
    #[arg(long, default_value = "power:2")]
    #[serde(default = "default_risk")]
    pub risk: String,
    #[arg(long, value_enum, default_value_t = Method::Mc)]
    #[serde(default = "default_method")]
    pub method: Method,
    #[command(flatten)]
    #[serde(default)]
    pub solver: SolverParams,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareTask {
    /// The first format is compared against each of the others.
    #[arg(long, default_value = "wpb,uniform_kplus1")]
    #[serde(default = "default_formats")]
    pub formats: String,
    #[arg(long, default_value = "1000000", value_parser = parse_count)]
    #[serde(default = "default_samples", deserialize_with = "de_count")]
    pub samples: usize,
    #[command(flatten)]
    #[serde(default)]
    pub solver: SolverParams,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramTask {
    #[arg(long)]
    pub rule: RuleKind,
    #[arg(long, default_value_t = 60)]
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[arg(long, default_value = "1000000", value_parser = parse_count)]
    #[serde(default = "default_samples", deserialize_with = "de_count")]
    pub samples: usize,
    #[command(flatten)]
    #[serde(default)]
    pub solver: SolverParams,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymmetricTask {
    #[arg(long, default_value_t = 2048)]
    #[serde(default = "default_pi_grid")]
    pub grid: usize,
    #[arg(long, default_value_t = 0.5)]
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[arg(long, default_value_t = 1e-6)]
    #[serde(default = "default_pi_tol")]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiTask {
    #[arg(long, default_value_t = 4096)]
    #[serde(default = "default_psi_grid")]
    pub grid: usize,
    /// Add the H, K, Y diagnostic columns.
    #[arg(long)]
    #[serde(default)]
    pub debug_bounds: bool,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpTask {
    #[arg(long, default_value_t = 80)]
    #[serde(default = "default_qp_m")]
    pub m: usize,
    #[arg(long, default_value_t = 1e-8)]
    #[serde(default = "default_qp_tol")]
    pub tol: f64,
    #[arg(long, default_value_t = 200_000)]
    #[serde(default = "default_qp_iter")]
    pub max_iter: usize,
    /// Also write `P1` and `P2` as matrices next to the output file.
    #[arg(long)]
    #[serde(default)]
    pub surface: bool,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyTask {
    #[arg(long)]
    pub rule: RuleKind,
    /// Verification points per bidder.
    #[arg(long, default_value_t = 21)]
    #[serde(default = "default_verify_grid")]
    pub grid: usize,
    /// Profiles for Monte Carlo checks.
    #[arg(long, default_value = "100000", value_parser = parse_count)]
    #[serde(default = "default_verify_samples", deserialize_with = "de_count")]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-6)]
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[command(flatten)]
    #[serde(default)]
    pub solver: SolverParams,
}

fn default_samples() -> usize {
    1_000_000
}
fn default_verify_samples() -> usize {
    100_000
}
fn default_risk() -> String {
    "power:2".into()
}
fn default_method() -> Method {
    Method::Mc
}
fn default_formats() -> String {
    "wpb,uniform_kplus1".into()
}
fn default_bins() -> usize {
    60
}
fn default_pi_grid() -> usize {
    2048
}
fn default_damping() -> f64 {
    0.5
}
fn default_pi_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    500
}
fn default_psi_grid() -> usize {
    4096
}
fn default_qp_m() -> usize {
    80
}
fn default_qp_tol() -> f64 {
    1e-8
}
fn default_qp_iter() -> usize {
    200_000
}
fn default_verify_grid() -> usize {
    21
}
fn default_threshold() -> f64 {
    1e-6
}

/// Accepts `1000000`, `1e6` or `2.5e5`; the value must be a whole number.
pub fn parse_count(s: &str) -> std::result::Result<usize, String> {
    if let Ok(n) = s.parse::<usize>() {
        return Ok(n);
    }
    let x: f64 = s.parse().map_err(|_| format!("'{s}' is not a count"))?;
    count_from_f64(x)
}

fn count_from_f64(x: f64) -> std::result::Result<usize, String> {
    if x.is_finite() && x >= 0.0 && x.fract() == 0.0 && x <= u64::MAX as f64 {
        Ok(x as usize)
    } else {
        Err(format!("{x} is not a non-negative whole number"))
    }
}

fn de_count<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<usize, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Count {
        Int(u64),
        Float(f64),
        Text(String),
    }
    match Count::deserialize(d)? {
        Count::Int(n) => Ok(n as usize),
        Count::Float(x) => count_from_f64(x).map_err(serde::de::Error::custom),
        Count::Text(s) => parse_count(&s).map_err(serde::de::Error::custom),
    }
}

/// How a task ended when it did not fail outright.
#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Ok,
    VerificationFailed(String),
    NotConverged(String),
}

impl Status {
    pub fn exit_code(&self) -> i32 {
        match self {
            Status::Ok => EXIT_OK,
            Status::VerificationFailed(_) => EXIT_VERIFICATION,
            Status::NotConverged(_) => EXIT_NOT_CONVERGED,
        }
    }
}

/// Task result: CSV tables to write and a summary for standard output.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: Table,
    /// Extra tables written next to the main output (suffix, table).
    pub extra: Vec<(String, Table)>,
    pub summary: Vec<String>,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.header)?;
        for r in &self.rows {
            wr.write_record(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
    }
}

/// Float cell with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x + 0.0)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Builds any named rule, solving for it when needed.
pub fn build_rule(
    env: &Arc<AuctionEnvironment>,
    kind: RuleKind,
    params: &SolverParams,
) -> Result<Arc<dyn PaymentRule>> {
    match kind {
        RuleKind::PiRule => {
            let opts = FixedPointOptions {
                grid_size: params.pi_grid,
                ..Default::default()
            };
            let profile = solve_fixed_point(env, opts)?;
            if !profile.converged {
                return Err(Error::NotConverged(format!(
                    "pi fixed point did not converge in {} iterations",
                    profile.iterations
                )));
            }
            Ok(Arc::new(pi_payment_rule(
                Arc::new(profile),
                RULE_RESIDUAL_THRESHOLD,
            )?))
        }
        RuleKind::PsiRule => {
            let sol = compute_psi(env, params.psi_grid)?;
            Ok(Arc::new(zero_variance_rule(Arc::new(sol))?))
        }
        RuleKind::QpRule => {
            let problem = build_qp(env, params.qp_m)?;
            let sol = solve_qp(&problem, QpOptions::default());
            if !sol.converged {
                return Err(Error::NotConverged(format!(
                    "QP did not converge (KKT residual {:e})",
                    sol.kkt_residual
                )));
            }
            Ok(Arc::new(qp_rule(env, &problem, sol)?))
        }
        other => make_rule(env, other),
    }
}

pub fn load_env(path: &Path) -> Result<Arc<AuctionEnvironment>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let spec: EnvSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(Arc::new(AuctionEnvironment::from_spec(&spec)?))
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Runs one task on an environment.
pub fn execute(env: &Arc<AuctionEnvironment>, task: &TaskSpec, seed: u64) -> Result<Report> {
    match task {
        TaskSpec::Simulate(t) => simulate(env, t, seed),
        TaskSpec::Compare(t) => compare(env, t, seed),
        TaskSpec::Histogram(t) => histogram(env, t, seed),
        TaskSpec::SolveAsymmetric(t) => solve_asymmetric(env, t),
        TaskSpec::SolvePsi(t) => solve_psi(env, t),
        TaskSpec::SolveQp(t) => solve_qp_task(env, t),
        TaskSpec::Verify(t) => verify(env, t, seed),
    }
}

fn stats_rows(table: &mut Table, s: &RevenueStats) {
    let se = s.stderr.as_ref();
    table.push(vec![
        "mean".into(),
        fmt_f64(s.mean),
        fmt_opt(se.map(|e| e.mean)),
    ]);
    table.push(vec![
        "second_moment".into(),
        fmt_f64(s.second_moment),
        fmt_opt(se.map(|e| e.second_moment)),
    ]);
    table.push(vec![
        "variance".into(),
        fmt_f64(s.variance),
        fmt_opt(se.map(|e| e.variance)),
    ]);
    for (j, (g, v)) in s.risk_values.iter().enumerate() {
        table.push(vec![
            format!("risk:{g}"),
            fmt_f64(*v),
            fmt_opt(se.map(|e| e.risk_values[j])),
        ]);
    }
}

fn simulate(env: &Arc<AuctionEnvironment>, t: &SimulateTask, seed: u64) -> Result<Report> {
    let measures: Vec<RiskMeasure> = parse_risk_list(&t.risk)?;
    let rule = build_rule(env, t.rule, &t.solver)?;
    let stats = match t.method {
        Method::Mc => mc_stats(env, rule.as_ref(), &measures, t.samples, seed)?,
        Method::Quadrature => quadrature_stats(env, rule.as_ref(), &measures)?,
    };
    let mut table = Table::new(&["statistic", "value", "stderr"]);
    stats_rows(&mut table, &stats);
    let summary = vec![format!(
        "rule={} mean={} variance={} second_moment={}",
        t.rule,
        fmt_f64(stats.mean),
        fmt_f64(stats.variance),
        fmt_f64(stats.second_moment)
    )];
    Ok(Report {
        table,
        extra: Vec::new(),
        summary,
        status: Status::Ok,
    })
}

fn compare(env: &Arc<AuctionEnvironment>, t: &CompareTask, seed: u64) -> Result<Report> {
    let kinds: Vec<RuleKind> = t
        .formats
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    if kinds.len() < 2 {
        return Err(Error::Config("compare needs at least two formats".into()));
    }
    let rules: Vec<Arc<dyn PaymentRule>> = kinds
        .iter()
        .map(|&k| build_rule(env, k, &t.solver))
        .collect::<Result<_>>()?;
    let mut table = Table::new(&[
        "left",
        "right",
        "mean_left",
        "mean_right",
        "var_left",
        "var_right",
        "stderr_left",
        "stderr_right",
        "stderr_diff",
        "left_le_right",
    ]);
    let mut summary = Vec::new();
    for j in 1..kinds.len() {
        let c: VarianceComparison =
            if kinds[0] == RuleKind::Wpb && kinds[j] == RuleKind::UniformKPlus1 && env.is_iid() {
                compare_discriminatory_uniform(env, t.samples, seed)?
            } else {
                compare_rules(env, rules[0].as_ref(), rules[j].as_ref(), t.samples, seed)?
            };
        let holds = c.ranking_holds(3.0);
        summary.push(format!(
            "{} vs {}: var {} vs {} (joint stderr {}) -> {}",
            kinds[0],
            kinds[j],
            fmt_f64(c.var_d),
            fmt_f64(c.var_u),
            fmt_f64(c.stderr_diff),
            if holds {
                "left <= right"
            } else {
                "left > right"
            }
        ));
        table.push(vec![
            kinds[0].to_string(),
            kinds[j].to_string(),
            fmt_f64(c.mean_d),
            fmt_f64(c.mean_u),
            fmt_f64(c.var_d),
            fmt_f64(c.var_u),
            fmt_f64(c.stderr_d),
            fmt_f64(c.stderr_u),
            fmt_f64(c.stderr_diff),
            holds.to_string(),
        ]);
    }
    Ok(Report {
        table,
        extra: Vec::new(),
        summary,
        status: Status::Ok,
    })
}

fn histogram(env: &Arc<AuctionEnvironment>, t: &HistogramTask, seed: u64) -> Result<Report> {
    let rule = build_rule(env, t.rule, &t.solver)?;
    let h = revenue_histogram(env, rule.as_ref(), t.samples, seed, t.bins)?;
    let mut table = Table::new(&["bin_lo", "bin_hi", "count", "density"]);
    for (j, w) in h.edges.windows(2).enumerate() {
        table.push(vec![
            fmt_f64(w[0]),
            fmt_f64(w[1]),
            h.counts[j].to_string(),
            fmt_f64(h.density[j]),
        ]);
    }
    Ok(Report {
        table,
        extra: Vec::new(),
        summary: vec![format!(
            "rule={} bins={} samples={}",
            t.rule, t.bins, h.samples
        )],
        status: Status::Ok,
    })
}

fn solve_asymmetric(env: &Arc<AuctionEnvironment>, t: &AsymmetricTask) -> Result<Report> {
    let opts = FixedPointOptions {
        grid_size: t.grid,
        damping: t.damping,
        tol: t.tol,
        max_iter: t.max_iter,
        ..Default::default()
    };
    let p = solve_fixed_point(env, opts)?;
    let mut table = Table::new(&["bidder", "v", "pi", "G_at_pi", "residual"]);
    for i in 0..env.n() {
        for &v in p.value_grid(i) {
            table.push(vec![
                i.to_string(),
                fmt_f64(v),
                fmt_f64(p.pi(i, v)),
                fmt_f64(p.g_at_pi(i, v)),
                fmt_f64(p.residual_at(i, v)),
            ]);
        }
    }
    let summary = vec![format!(
        "iterations={} converged={} last_step={} residual={}",
        p.iterations,
        p.converged,
        fmt_f64(p.last_step),
        fmt_f64(p.residual)
    )];
    let status = if p.converged {
        Status::Ok
    } else {
        Status::NotConverged(format!(
            "no convergence after {} iterations (last step {:e})",
            p.iterations, p.last_step
        ))
    };
    Ok(Report {
        table,
        extra: Vec::new(),
        summary,
        status,
    })
}

fn solve_psi(env: &Arc<AuctionEnvironment>, t: &PsiTask) -> Result<Report> {
    let sol = compute_psi(env, t.grid)?;
    let mut header = vec!["v", "N", "D", "psi"];
    if t.debug_bounds {
        header.extend(["H", "K", "Y"]);
    }
    let mut table = Table::new(&header);
    for (j, &v) in sol.grid.iter().enumerate() {
        let mut row = vec![
            fmt_f64(v),
            fmt_f64(sol.numer_vals[j]),
            fmt_f64(sol.denom_vals[j]),
            fmt_f64(sol.psi_vals[j]),
        ];
        if t.debug_bounds {
            let d = sol.diagnostics(v);
            row.extend([fmt_f64(d.h), fmt_f64(d.k), fmt_f64(d.y)]);
        }
        table.push(row);
    }
    let r = verify_psi_bounds(&sol);
    let summary = vec![format!(
        "R={} min_psi={} max_psi={} k_v0={} bounds_ok={}",
        fmt_f64(r.rbar),
        fmt_f64(r.min_psi),
        fmt_f64(r.max_psi),
        fmt_f64(r.k_v0),
        r.passed()
    )];
    let status = if r.passed() {
        Status::Ok
    } else {
        Status::VerificationFailed("psi bounds violated".into())
    };
    Ok(Report {
        table,
        extra: Vec::new(),
        summary,
        status,
    })
}

fn solve_qp_task(env: &Arc<AuctionEnvironment>, t: &QpTask) -> Result<Report> {
    let problem = build_qp(env, t.m)?;
    let sol = solve_qp(
        &problem,
        QpOptions {
            tol: t.tol,
            max_iter: t.max_iter,
            ..Default::default()
        },
    );
    let mut table = Table::new(&["v1", "v2", "P1", "P2"]);
    for (j, &(v1, v2)) in problem.grid.nodes().iter().enumerate() {
        table.push(vec![
            fmt_f64(v1),
            fmt_f64(v2),
            fmt_f64(sol.p1[j]),
            fmt_f64(sol.p2[j]),
        ]);
    }
    let mut extra = Vec::new();
    if t.surface {
        for (name, vals) in [("P1", &sol.p1), ("P2", &sol.p2)] {
            extra.push((name.to_string(), surface_table(&problem.grid, vals)));
        }
    }
    let summary = vec![format!(
        "objective={} kkt={} ret_residual={} iterations={} converged={}",
        fmt_f64(sol.objective_value),
        fmt_f64(sol.kkt_residual),
        fmt_f64(sol.ret_residual),
        sol.iterations,
        sol.converged
    )];
    let status = if sol.converged {
        Status::Ok
    } else {
        Status::NotConverged(format!(
            "KKT residual {:e} after {} iterations",
            sol.kkt_residual, sol.iterations
        ))
    };
    Ok(Report {
        table,
        extra,
        summary,
        status,
    })
}

/// `m x m` matrix with rows indexed by the `v1` bin and columns by the `v2`
/// bin; cells above the diagonal are `nan`.
fn surface_table(grid: &crate::expost_qp::TriangularGrid, vals: &[f64]) -> Table {
    let m = grid.m();
    let edges = grid.edges();
    let centres: Vec<String> = (0..m)
        .map(|b| fmt_f64(0.5 * (edges[b] + edges[b + 1])))
        .collect();
    let mut header = vec!["v1".to_string()];
    header.extend(centres.iter().cloned());
    let mut table = Table {
        header,
        rows: Vec::new(),
    };
    for a in 0..m {
        let mut row = vec![centres[a].clone()];
        for b in 0..m {
            row.push(if b <= a {
                fmt_f64(vals[crate::expost_qp::TriangularGrid::index(a, b)])
            } else {
                fmt_f64(f64::NAN)
            });
        }
        table.push(row);
    }
    table
}

/// Sampled check of the flags a rule claims.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlagCheck {
    pub min_utility: f64,
    pub min_payment: f64,
    pub max_loser_payment: f64,
}

pub fn check_flags(
    env: &AuctionEnvironment,
    rule: &dyn PaymentRule,
    samples: usize,
    seed: u64,
) -> FlagCheck {
    let n = env.n();
    let blocks = ProfileSampler::new(env, samples, seed).run(
        || ([f64::INFINITY, f64::INFINITY, 0.0f64], Outcome::new(n)),
        |acc: &mut ([f64; 3], Outcome), values| {
            rule.apply_into(values, &mut acc.1);
            for i in 0..n {
                let won = acc.1.allocation[i];
                let p = acc.1.payments[i];
                let u = if won { values[i] - p } else { -p };
                acc.0[0] = acc.0[0].min(u);
                acc.0[1] = acc.0[1].min(p);
                if !won {
                    acc.0[2] = acc.0[2].max(p.abs());
                }
            }
        },
    );
    blocks.iter().fold(
        FlagCheck {
            min_utility: f64::INFINITY,
            min_payment: f64::INFINITY,
            max_loser_payment: 0.0,
        },
        |f, b| FlagCheck {
            min_utility: f.min_utility.min(b.0[0]),
            min_payment: f.min_payment.min(b.0[1]),
            max_loser_payment: f.max_loser_payment.max(b.0[2]),
        },
    )
}

fn verify(env: &Arc<AuctionEnvironment>, t: &VerifyTask, seed: u64) -> Result<Report> {
    let rule = build_rule(env, t.rule, &t.solver)?;
    let rep = verify_ret_report(env, rule.as_ref(), t.grid, t.samples, seed);
    let mut table = Table::new(&["bidder", "v", "expected_payment", "z", "abs_error"]);
    for &(i, v, e, z) in &rep.rows {
        table.push(vec![
            i.to_string(),
            fmt_f64(v),
            fmt_f64(e),
            fmt_f64(z),
            fmt_f64((e - z).abs()),
        ]);
    }
    let ret_ok = match rep.method {
        RetMethod::MonteCarlo => {
            rep.max_residual <= t.threshold || rep.worst_z_score <= RET_Z_SCORE
        }
        RetMethod::Quadrature => rep.max_residual <= t.threshold,
    };
    let flags = rule.flags();
    let fc = check_flags(env, rule.as_ref(), t.samples, seed);
    let mut failures = Vec::new();
    if !ret_ok {
        failures.push(format!(
            "RET residual {:e} above {:e}",
            rep.max_residual, t.threshold
        ));
    }
    if flags.ex_post_ir && fc.min_utility < -1e-12 {
        failures.push(format!(
            "ex-post IR flagged but min utility {:e}",
            fc.min_utility
        ));
    }
    if flags.nonneg_payments && fc.min_payment < -1e-12 {
        failures.push(format!(
            "non-negative payments flagged but min payment {:e}",
            fc.min_payment
        ));
    }
    if flags.losers_pay_zero && fc.max_loser_payment > 1e-12 {
        failures.push(format!(
            "losers flagged to pay zero but pay {:e}",
            fc.max_loser_payment
        ));
    }
    let method = match rep.method {
        RetMethod::Quadrature => "quadrature",
        RetMethod::MonteCarlo => "monte-carlo",
    };
    let summary = vec![format!(
        "rule={} residual={} method={} max_stderr={} ex_post_ir={} min_utility={} min_payment={}",
        t.rule,
        fmt_f64(rep.max_residual),
        method,
        fmt_f64(rep.max_stderr),
        flags.ex_post_ir,
        fmt_f64(fc.min_utility),
        fmt_f64(fc.min_payment)
    )];
    let status = if failures.is_empty() {
        Status::Ok
    } else {
        Status::VerificationFailed(failures.join("; "))
    };
    Ok(Report {
        table,
        extra: Vec::new(),
        summary,
        status,
    })
}

/// Writes the report tables; extra tables go to `<stem>.<suffix>.csv`.
pub fn write_report(report: &Report, out: Option<&Path>) -> Result<()> {
    let Some(path) = out else {
        return Ok(());
    };
    let f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    report.table.write_csv(f)?;
    for (suffix, table) in &report.extra {
        let p = sibling(path, suffix);
        let f = File::create(&p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
        table.write_csv(f)?;
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}.csv"))
}

/// Runs a scenario file.
pub fn run_config(config: &ScenarioConfig) -> Result<Report> {
    let env = Arc::new(AuctionEnvironment::from_spec(&config.env)?);
    let report = execute(&env, &config.task, config.seed)?;
    write_report(&report, config.out.as_deref())?;
    Ok(report)
}

fn dispatch(cli: Cli) -> Result<Report> {
    let (env_arg, task) = match cli.command {
        Command::Run { config } => return run_config(&load_config(&config)?),
        Command::Simulate { env, task } => (env, TaskSpec::Simulate(task)),
        Command::Compare { env, task } => (env, TaskSpec::Compare(task)),
        Command::Histogram { env, task } => (env, TaskSpec::Histogram(task)),
        Command::SolveAsymmetric { env, task } => (env, TaskSpec::SolveAsymmetric(task)),
        Command::SolvePsi { env, task } => (env, TaskSpec::SolvePsi(task)),
        Command::SolveQp { env, task } => (env, TaskSpec::SolveQp(task)),
        Command::Verify { env, task } => (env, TaskSpec::Verify(task)),
    };
    let env = load_env(&env_arg.env)?;
    let report = execute(&env, &task, env_arg.seed)?;
    write_report(&report, env_arg.out.as_deref())?;
    Ok(report)
}

/// Parses arguments, runs the task and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(report) => {
            for line in &report.summary {
                println!("{line}");
            }
            match &report.status {
                Status::Ok => {}
                Status::VerificationFailed(msg) => eprintln!("verification failed: {msg}"),
                Status::NotConverged(msg) => eprintln!("not converged: {msg}"),
            }
            report.status.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            error_exit_code(&e)
        }
    }
}

/// Exit code for a task that failed with `e`.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::BoundViolation(_) | Error::ResidualTooLarge { .. } => EXIT_VERIFICATION,
        Error::NotConverged(_) => EXIT_NOT_CONVERGED,
        _ => EXIT_CONFIG,
    }
}
