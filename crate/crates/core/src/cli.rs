//! Command-line front end. Every command reads an instance document, writes
//! its artifacts to `--out`, and prints a short report.
//!
//! Exit codes: 0 success, 1 verification mismatch, 2 bad input, 3 solver
//! failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{instance_to_json, load_instance, parse_instance, read, ConfigError};
use crate::equilibrium::{
    kkt_residuals, solve_equilibrium, surplus_decomposition, EquilibriumError,
    EquilibriumSolution, SolverSettings, TariffBox, VolumetricCharges,
};
use crate::format::sig9;
use crate::model::MarketInstance;
use crate::stochastic::{
    chance_grid_search, evaluate_chance_candidate, stochastic_optimal_check, ChanceSettings,
    ScenarioSet, StochasticError,
};
use crate::tariff::{optimal_tariff, sweep_fraction, SweepRow, SweepTable, TariffError};
use crate::verification::{
    compare_solutions, enumerate_active_sets, enumerated_rows, random_charges, random_instance,
    OracleBudget, OracleError, RandomInstanceSpec, SolutionGap,
};
use crate::equilibrium::assemble_welfare_program;

/// Oracle agreement thresholds.
pub const OBJECTIVE_TOLERANCE: f64 = 1e-6;
pub const PRIMAL_TOLERANCE: f64 = 1e-5;
/// Largest acceptable KKT residual of a reported solution.
pub const KKT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("refusing to verify: {0}")]
    Refused(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("verification failed: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Mismatch(_) => 1,
            CliError::Usage(_) | CliError::Config(_) | CliError::Write { .. } | CliError::Refused(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl From<EquilibriumError> for CliError {
    fn from(e: EquilibriumError) -> Self {
        match e {
            EquilibriumError::Solver(_) => CliError::Solver(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<TariffError> for CliError {
    fn from(e: TariffError) -> Self {
        match e {
            TariffError::Equilibrium(inner) => inner.into(),
            TariffError::InvalidFraction(_) | TariffError::NegativeBudget(_) | TariffError::MissingCharge { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Solver(other.to_string()),
        }
    }
}

impl From<StochasticError> for CliError {
    fn from(e: StochasticError) -> Self {
        match e {
            StochasticError::Config(c) => CliError::Config(c),
            StochasticError::Equilibrium(inner) => inner.into(),
            StochasticError::Tariff(inner) => inner.into(),
            StochasticError::Scenario { .. } => CliError::Solver(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::BudgetExceeded { .. } => CliError::Refused(e.to_string()),
            OracleError::Equilibrium(inner) => inner.into(),
            other => CliError::Solver(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "prosumer-tariff", version, about = "Market equilibria with prosumers and retail tariff design")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the market at given volumetric charges.
    Solve(SolveArgs),
    /// Zero volumetric charges with equity-allocated fixed charges.
    Optimal(CommonArgs),
    /// Constrained tariffs over a grid of volumetric fractions.
    Sweep(SweepArgs),
    /// Expected welfare over scenarios and the revenue chance constraint.
    Stochastic(StochasticArgs),
    /// Compare the solver with brute-force enumeration.
    Verify(VerifyArgs),
    /// Turn a calibration document into an instance document.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Instance or calibration document.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Solver feasibility, complementarity and gap tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

impl CommonArgs {
    fn instance(&self) -> Result<MarketInstance, CliError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Usage("--config is required".into()))?;
        Ok(load_instance(path)?)
    }

    fn settings(&self) -> Result<SolverSettings, CliError> {
        match self.tol {
            None => Ok(SolverSettings::default()),
            Some(t) if t > 0.0 && t < 1.0 => Ok(SolverSettings::with_tolerance(t)),
            Some(t) => Err(CliError::Usage(format!("--tol must lie in (0, 1), got {t}"))),
        }
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let io = |path: &Path, source| CliError::Write {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(&self.out).map_err(|e| io(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| io(&path, e))?;
        Ok(path)
    }

    fn write_table(&self, stem: &str, table: &Table) -> Result<PathBuf, CliError> {
        let text = match self.format {
            Format::Csv => table.to_csv(),
            Format::Json => table.to_json(),
        };
        self.write(&format!("{stem}.{}", self.format.extension()), &text)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        self.write(name, &text)
    }
}

#[derive(Debug, Args)]
pub struct TauArgs {
    #[arg(long = "tau-b", default_value_t = 0.0, allow_negative_numbers = true)]
    pub tau_buy: f64,
    #[arg(long = "tau-s", default_value_t = 0.0, allow_negative_numbers = true)]
    pub tau_sell: f64,
}

impl TauArgs {
    fn charges(&self, instance: &MarketInstance) -> Result<VolumetricCharges, CliError> {
        Ok(VolumetricCharges::new(
            self.tau_buy,
            self.tau_sell,
            TariffBox::for_instance(instance),
        )?)
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub tau: TauArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Inclusive grid `START:STOP:STEP`.
    #[arg(long, default_value = "0:1:0.1", value_parser = parse_fractions)]
    pub fractions: FractionGrid,
}

#[derive(Debug, Args)]
pub struct StochasticArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Scenario document; defaults to the instance alone.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    /// Allowed probability of missing the revenue target.
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    /// Points per axis of the charge grid.
    #[arg(long, default_value_t = 5)]
    pub grid: usize,
    /// Charges at which the chance constraint is reported.
    #[command(flatten)]
    pub tau: TauArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub tau: TauArgs,
    /// Solution document to check instead of trusting the solver.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    /// Seed for random instances, used when no config is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random instances.
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Most inequalities the enumeration may branch on.
    #[arg(long, default_value_t = 12)]
    pub max_inequalities: usize,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Daily renewable output (MWh/day) replacing the capacity-derived value.
    #[arg(long)]
    pub renewable: Option<f64>,
}

/// Evenly spaced fractions, both ends included.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionGrid(pub Vec<f64>);

pub fn parse_fractions(text: &str) -> Result<FractionGrid, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let [start, stop, step] = parts.as_slice() else {
        return Err("expected START:STOP:STEP".into());
    };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
    if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&stop) || stop < start {
        return Err("need 0 <= START <= STOP <= 1".into());
    }
    if !(step > 0.0) {
        return Err("STEP must be > 0".into());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=count)
        .map(|k| {
            // snap to the step's decimal resolution so 0.1·3 prints as 0.3
            let v = start + step * k as f64;
            (v * 1e12).round() / 1e12
        })
        .collect();
    if (stop - grid[count]).abs() > 1e-9 {
        grid.push(stop);
    }
    Ok(FractionGrid(grid))
}

/// Plain table emitted as CSV or as a JSON array of row objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Map<String, serde_json::Value>> = self
            .rows
            .iter()
            .map(|row| {
                self.header
                    .iter()
                    .zip(row)
                    .map(|(k, v)| {
                        let value = match v.parse::<f64>() {
                            Ok(x) if x.is_finite() => serde_json::Value::from(x),
                            _ => serde_json::Value::from(v.as_str()),
                        };
                        (k.clone(), value)
                    })
                    .collect()
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("serializable") + "\n"
    }
}

fn tau_label(tau: &VolumetricCharges) -> String {
    format!("{} ({})", sig9(tau.tau_buy), sig9(tau.tau_sell))
}

/// One-row summary of an equilibrium.
pub fn solve_summary(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
    sol: &EquilibriumSolution,
) -> Result<Table, CliError> {
    let s = surplus_decomposition(instance, tau, sol)?;
    let kkt = kkt_residuals(instance, tau, sol)?.max();
    let names: Vec<String> = instance.nodes.iter().map(|n| n.name()).collect();
    let mut header = vec!["tau".to_string()];
    header.extend(names.iter().map(|n| format!("lmp_{n}")));
    header.extend(names.iter().map(|n| format!("demand_{n}")));
    let mut row = vec![tau_label(tau)];
    row.extend(sol.p.iter().map(|&v| sig9(v)));
    row.extend(sol.d.iter().map(|&v| sig9(v)));
    let net_sale: f64 = (0..instance.node_count()).map(|i| sol.net_sale(i)).sum();
    for (name, v) in [
        ("prosumer_net_sale", net_sale),
        ("backup_generation", sol.g_backup.iter().sum()),
        ("surplus_consumer", s.total_consumer()),
        ("surplus_prosumer", s.total_prosumer()),
        ("surplus_producer", s.total_producer()),
        ("iso_revenue", s.iso_revenue),
        ("volumetric_revenue", s.volumetric_revenue),
        ("welfare", s.welfare),
        ("max_kkt_residual", kkt),
    ] {
        header.push(name.into());
        row.push(sig9(v));
    }
    Ok(Table {
        header,
        rows: vec![row],
    })
}

fn sweep_table(instance: &MarketInstance, rows: &[SweepRow]) -> Table {
    Table {
        header: SweepTable::header(instance),
        rows: rows.iter().map(|r| SweepTable::record(instance, r)).collect(),
    }
}

/// Outcome details of every emitted tariff; failed rows carry their message.
#[derive(Debug, Serialize)]
struct SweepDetail<'a> {
    fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    outcome: Option<&'a crate::tariff::TariffOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

fn sweep_details(rows: &[SweepRow]) -> Vec<SweepDetail<'_>> {
    rows.iter()
        .map(|r| SweepDetail {
            fraction: r.fraction,
            outcome: r.outcome.as_ref().ok(),
            error: r.outcome.as_ref().err().map(String::as_str),
        })
        .collect()
}

pub fn cmd_solve(args: &SolveArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let instance = args.common.instance()?;
    let settings = args.common.settings()?;
    let tau = args.tau.charges(&instance)?;
    let sol = solve_equilibrium(&instance, &tau, &settings)?;
    let summary = solve_summary(&instance, &tau, &sol)?;
    let sol_path = args.common.write_json("solution.json", &sol)?;
    let table_path = args.common.write_table("summary", &summary)?;
    let kkt = kkt_residuals(&instance, &tau, &sol)?.max();
    let _ = writeln!(out, "tau {}", tau_label(&tau));
    let _ = writeln!(out, "welfare {}", sig9(sol.objective));
    let _ = writeln!(out, "max KKT residual {kkt:.3e}");
    if sol.diagnostics.degenerate_prices {
        eprintln!("warning: nodal prices are not unique at this solution");
    }
    let _ = writeln!(out, "wrote {} and {}", sol_path.display(), table_path.display());
    Ok(())
}

pub fn cmd_optimal(args: &CommonArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let instance = args.instance()?;
    let settings = args.settings()?;
    let outcome = optimal_tariff(&instance, &settings)?;
    let rows = vec![SweepRow {
        fraction: 0.0,
        outcome: Ok(outcome),
    }];
    let table_path = args.write_table("optimal", &sweep_table(&instance, &rows))?;
    let detail_path = args.write_json("optimal_detail.json", &sweep_details(&rows))?;
    let outcome = rows[0].outcome.as_ref().expect("just built");
    let _ = writeln!(out, "tau {}", tau_label(&outcome.tau));
    let _ = writeln!(out, "revenue residual {}", sig9(outcome.revenue.residual));
    let _ = writeln!(out, "equity gap B {}", sig9(outcome.incidence.gap_b));
    let _ = writeln!(out, "wrote {} and {}", table_path.display(), detail_path.display());
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let instance = args.common.instance()?;
    let settings = args.common.settings()?;
    let table = sweep_fraction(&instance, &args.fractions.0, &settings);
    let table_path = args.common.write_table("sweep", &sweep_table(&instance, &table.rows))?;
    let detail_path = args.common.write_json("sweep_detail.json", &sweep_details(&table.rows))?;
    for row in &table.rows {
        match &row.outcome {
            Ok(o) => {
                let _ = writeln!(out, "f={} tau {} B {}", sig9(row.fraction), tau_label(&o.tau), sig9(o.incidence.gap_b));
            }
            Err(e) => {
                let _ = writeln!(out, "f={} error: {e}", sig9(row.fraction));
            }
        }
    }
    let _ = writeln!(out, "wrote {} and {}", table_path.display(), detail_path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct StochasticDetail<'a> {
    optimality: &'a crate::stochastic::OptimalityReport,
    chance: &'a crate::stochastic::ChanceCandidate,
    search: &'a crate::stochastic::ChanceSearch,
}

pub fn cmd_stochastic(args: &StochasticArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let instance = args.common.instance()?;
    let settings = args.common.settings()?;
    let set = match &args.scenarios {
        Some(path) => ScenarioSet::load(path)?,
        None => ScenarioSet::deterministic(),
    };
    let chance = ChanceSettings::new(args.epsilon)?;
    if args.grid < 2 {
        return Err(CliError::Usage("--grid needs at least 2 points".into()));
    }
    let tau = args.tau.charges(&instance)?;
    let grid = TariffBox::for_instance(&instance).grid(args.grid);

    let optimality = stochastic_optimal_check(&instance, &set, &grid, &settings, OBJECTIVE_TOLERANCE)?;
    let at_tau = evaluate_chance_candidate(&instance, &set, &tau, &chance, &settings)?;
    let search = chance_grid_search(&instance, &set, &grid, &chance, &settings)?;

    let ev = Table {
        header: vec!["tau_buy".into(), "tau_sell".into(), "expected_value".into()],
        rows: optimality
            .values
            .iter()
            .map(|((tb, ts), v)| vec![sig9(*tb), sig9(*ts), sig9(*v)])
            .collect(),
    };
    let scenarios = Table {
        header: ["scenario", "probability", "total_revenue", "adequate"].map(String::from).to_vec(),
        rows: at_tau
            .report
            .scenarios
            .iter()
            .enumerate()
            .map(|(k, s)| vec![k.to_string(), sig9(s.probability), sig9(s.total_revenue), s.adequate.to_string()])
            .collect(),
    };
    let candidates = Table {
        header: [
            "tau_buy",
            "tau_sell",
            "expected_value",
            "expected_volumetric_revenue",
            "expected_equity_gap_B",
            "probability_adequate",
            "satisfied",
            "objective",
            "best",
        ]
        .map(String::from)
        .to_vec(),
        rows: search
            .candidates
            .iter()
            .enumerate()
            .map(|(k, c)| {
                vec![
                    sig9(c.tau.tau_buy),
                    sig9(c.tau.tau_sell),
                    sig9(c.expected_value),
                    sig9(c.expected_volumetric_revenue),
                    sig9(c.expected_gap_b),
                    sig9(c.report.probability),
                    c.report.satisfied.to_string(),
                    sig9(c.objective),
                    (search.best == Some(k)).to_string(),
                ]
            })
            .collect(),
    };
    args.common.write_table("ev_grid", &ev)?;
    args.common.write_table("chance", &scenarios)?;
    args.common.write_table("chance_search", &candidates)?;
    args.common.write_json(
        "stochastic_detail.json",
        &StochasticDetail {
            optimality: &optimality,
            chance: &at_tau,
            search: &search,
        },
    )?;

    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    let (tb, ts) = optimality.argmax;
    let _ = writeln!(
        out,
        "EV argmax ({}, {}), margin {}: {}",
        sig9(tb),
        sig9(ts),
        sig9(optimality.margin),
        verdict(optimality.pass)
    );
    let _ = writeln!(
        out,
        "chance at tau {}: P(adequate) {} vs required {}: {}",
        tau_label(&tau),
        sig9(at_tau.report.probability),
        sig9(1.0 - chance.epsilon),
        verdict(at_tau.report.satisfied)
    );
    match search.best() {
        Some(best) => {
            let _ = writeln!(out, "best feasible grid tariff {}", tau_label(&best.tau));
        }
        None => {
            let _ = writeln!(out, "no grid tariff meets the chance constraint");
        }
    }
    let _ = writeln!(out, "wrote results to {}", args.common.out.display());
    Ok(())
}

fn gap_row(label: String, instance: &MarketInstance, tau: &VolumetricCharges, gap: &SolutionGap, kkt: f64) -> Vec<String> {
    let ok = gap.within(OBJECTIVE_TOLERANCE, PRIMAL_TOLERANCE) && kkt <= KKT_TOLERANCE;
    vec![
        label,
        instance.node_count().to_string(),
        instance.units.len().to_string(),
        sig9(tau.tau_buy),
        sig9(tau.tau_sell),
        sig9(gap.objective),
        sig9(gap.primal),
        sig9(kkt),
        if ok { "agree" } else { "MISMATCH" }.into(),
    ]
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let settings = args.common.settings()?;
    let budget = OracleBudget {
        max_inequalities: args.max_inequalities,
        ..OracleBudget::default()
    };
    let header = [
        "case",
        "nodes",
        "units",
        "tau_buy",
        "tau_sell",
        "objective_gap",
        "primal_gap",
        "max_kkt_residual",
        "verdict",
    ]
    .map(String::from)
    .to_vec();
    let mut rows = Vec::new();

    if args.common.config.is_some() {
        let instance = args.common.instance()?;
        let tau = args.tau.charges(&instance)?;
        let rows_needed = enumerated_rows(&assemble_welfare_program(&instance, &tau)?.qp);
        if rows_needed > budget.max_inequalities {
            return Err(CliError::Refused(format!(
                "{rows_needed} inequalities exceed the enumeration budget of {}",
                budget.max_inequalities
            )));
        }
        let oracle = enumerate_active_sets(&instance, &tau, &budget)?;
        let candidate = match &args.solution {
            Some(path) => {
                let text = read(path)?;
                let sol: EquilibriumSolution =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(ConfigError::Parse(e)))?;
                ("supplied", sol)
            }
            None => ("solver", solve_equilibrium(&instance, &tau, &settings)?),
        };
        // a malformed solution document is a failed check, not bad input
        let kkt = kkt_residuals(&instance, &tau, &candidate.1).map_or(f64::INFINITY, |r| r.max());
        let gap = compare_solutions(&candidate.1, &oracle);
        rows.push(gap_row(candidate.0.into(), &instance, &tau, &gap, kkt));
    } else {
        if args.solution.is_some() {
            return Err(CliError::Usage("--solution needs --config".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let spec = RandomInstanceSpec::default();
        let mut attempts = 0;
        while rows.len() < args.count {
            attempts += 1;
            if attempts > 1000 * args.count.max(1) {
                return Err(CliError::Refused("could not draw instances within the budget".into()));
            }
            let instance = random_instance(&mut rng, &spec);
            let tau = random_charges(&mut rng, &instance);
            if enumerated_rows(&assemble_welfare_program(&instance, &tau)?.qp) > budget.max_inequalities {
                continue;
            }
            let oracle = enumerate_active_sets(&instance, &tau, &budget)?;
            let sol = solve_equilibrium(&instance, &tau, &settings)?;
            let kkt = kkt_residuals(&instance, &tau, &sol)?.max();
            let gap = compare_solutions(&sol, &oracle);
            rows.push(gap_row(format!("random_{}", rows.len()), &instance, &tau, &gap, kkt));
        }
    }

    let table = Table { header, rows };
    args.common.write_table("verify", &table)?;
    let mismatches: Vec<&Vec<String>> = table.rows.iter().filter(|r| r[8] != "agree").collect();
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{}: objective gap {}, primal gap {}, max KKT residual {}: {}",
            r[0], r[5], r[6], r[7], r[8]
        );
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(format!(
            "{} of {} cases disagree with the oracle",
            mismatches.len(),
            table.rows.len()
        )))
    }
}

pub fn cmd_calibrate(args: &CalibrateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let path = args
        .common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&read(path)?).map_err(|e| CliError::Config(ConfigError::Parse(e)))?;
    let Some(spec) = value.get_mut("calibration") else {
        return Err(CliError::Usage("expected a document with a `calibration` key".into()));
    };
    if let Some(r) = args.renewable {
        spec["renewable_output"] = serde_json::Value::from(r);
    }
    let instance = parse_instance(&value.to_string())?;
    let written = args.common.write("instance.json", &(instance_to_json(&instance) + "\n"))?;
    let _ = writeln!(out, "wrote {}", written.display());
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a, out),
        Command::Optimal(a) => cmd_optimal(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Stochastic(a) => cmd_stochastic(a, out),
        Command::Verify(a) => cmd_verify(a, out),
        Command::Calibrate(a) => cmd_calibrate(a, out),
    }
}

/// Parse arguments, run, report errors on standard error, and return the
/// process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
