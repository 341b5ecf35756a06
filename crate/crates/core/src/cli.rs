//! Scenario files and the `solve`, `schedule`, `simulate` and `compare`
//! commands.
//!
//! A scenario is a TOML file. Matrices are row-major nested arrays:
//!
//! ```toml
//! [[targets]]
//! label = "system-1"
//! a = [[0.0, 1.0], [-0.49, 1.4]]
//! c = [[1.0, 0.0]]
//! q = [[5.0, 0.0], [0.0, 5.0]]
//! r = [[0.5]]
//!
//! [[targets]]
//! label = "vehicle"
//! delay_chain = { a = 1.0, q = 2.0, r = 1.0, d = 2 }
//! ```
//!
//! Every CSV float is written in shortest round-trip form so reruns are
//! byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::distributed::{DistributedOptions, Topology, run_distributed_op};
use crate::error::{Error, Result};
use crate::linalg::CovMatrix;
use crate::model::{DelayChainSpec, LtiTarget, ScheduleDistribution, expand_delay_chain, validate_target};
use crate::optimizer::{self, Constraints, SolveReport, SolverOptions};
use crate::schedule::{
    BackoffConfig, ScheduleSequence, build_min_consecutive_schedule, sample_stochastic_schedule,
    simulate_csma_schedule,
};
use crate::simulate::{
    default_initial_covariances, evaluate_schedule, monte_carlo_expected_cost, simulate_tracking,
    sliding_window_schedule_with, write_trace_csv, write_tracking_csv, WindowScore,
};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub targets: Vec<TargetConfig>,
    #[serde(default)]
    pub constraints: Option<ConstraintsConfig>,
    #[serde(default)]
    pub topology: Option<TopologyConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

/// Either explicit `(a, c, q, r)` matrices or a `delay_chain`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub label: Option<String>,
    pub a: Option<Vec<Vec<f64>>>,
    pub c: Option<Vec<Vec<f64>>>,
    pub q: Option<Vec<Vec<f64>>>,
    pub r: Option<Vec<Vec<f64>>>,
    pub delay_chain: Option<DelayChainConfig>,
    /// `trace` (all states) or `true-state` (delay chains only: the current
    /// state at the end of the chain). Delay chains default to `true-state`.
    pub cost: Option<CostKind>,
    /// Diagonal cost weights; overrides `cost`.
    pub cost_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayChainConfig {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    pub d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    Trace,
    TrueState,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsConfig {
    pub priorities: Option<Vec<f64>>,
    pub losses: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// `adjacency[i]` lists the neighbours of node `i`.
    pub adjacency: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub mare_tol: f64,
    pub consensus_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverOptions::default();
        Self {
            outer_tol: s.outer_tol,
            inner_tol: s.inner_tol,
            mare_tol: s.mare_tol,
            consensus_tol: DistributedOptions::default().consensus_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Period of the minimal-consecutiveness sequence and length of sampled ones.
    pub length: usize,
    pub seed: u64,
    pub backoff: BackoffSection,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { length: 500, seed: 0, backoff: BackoffSection::default() }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackoffSection {
    pub alpha: f64,
    pub epsilon_jitter: f64,
    pub duration: usize,
}

impl Default for BackoffSection {
    fn default() -> Self {
        let b = BackoffConfig::default();
        Self { alpha: b.alpha, epsilon_jitter: b.epsilon_jitter, duration: b.duration }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub horizon: usize,
    pub runs: usize,
    pub seed: u64,
    /// Sliding-window lookahead used by `compare`.
    pub window: Option<usize>,
    /// Periods of the minimal-consecutiveness sequence evaluated by `compare`.
    pub repeats: usize,
    pub window_score: WindowScoreConfig,
}

/// Sliding-window scoring: worst cost at the end of the window (`end`) or
/// summed over the window (`cumulative`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowScoreConfig {
    #[default]
    End,
    Cumulative,
}

impl From<WindowScoreConfig> for WindowScore {
    fn from(c: WindowScoreConfig) -> Self {
        match c {
            WindowScoreConfig::End => WindowScore::EndOfWindow,
            WindowScoreConfig::Cumulative => WindowScore::Cumulative,
        }
    }
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { horizon: 500, runs: 1000, seed: 0, window: None, repeats: 10, window_score: WindowScoreConfig::End }
    }
}

/// A validated scenario ready for computation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub targets: Vec<LtiTarget>,
    pub constraints: Constraints,
    pub topology: Option<Topology>,
    pub solver: SolverOptions,
    pub consensus_tol: f64,
    pub schedule: ScheduleConfig,
    pub simulate: SimulateConfig,
    /// Validation warnings, e.g. undetectable targets.
    pub warnings: Vec<String>,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn matrix(name: &str, label: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("target {label}: `{name}` must be a non-empty rectangular array")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
}

impl TargetConfig {
    fn build(&self, index: usize) -> Result<LtiTarget> {
        let label = self.label.clone().unwrap_or_else(|| format!("target-{index}"));
        let explicit = [&self.a, &self.c, &self.q, &self.r];
        let target = match (&self.delay_chain, explicit.iter().all(|m| m.is_some())) {
            (Some(dc), false) if explicit.iter().all(|m| m.is_none()) => {
                let spec = DelayChainSpec::new(dc.a, dc.q, dc.r, dc.d)
                    .map_err(|e| Error::Config(format!("target {label}: {e}")))?;
                let t = expand_delay_chain(label.clone(), &spec).map_err(config_err)?;
                match self.cost {
                    Some(CostKind::Trace) => t.with_trace_cost(),
                    _ => t,
                }
            }
            (None, true) => {
                let m = |name: &str, v: &Option<Vec<Vec<f64>>>| matrix(name, &label, v.as_deref().unwrap_or_default());
                if self.cost == Some(CostKind::TrueState) {
                    return Err(Error::Config(format!(
                        "target {label}: `cost = \"true-state\"` applies to delay chains only"
                    )));
                }
                LtiTarget::new(label.clone(), m("a", &self.a)?, m("c", &self.c)?, m("q", &self.q)?, m("r", &self.r)?)
                    .map_err(|e| Error::Config(format!("target {label}: {e}")))?
            }
            _ => {
                return Err(Error::Config(format!(
                    "target {label}: give either all of `a`, `c`, `q`, `r` or a `delay_chain`"
                )))
            }
        };
        match &self.cost_weights {
            Some(w) => target
                .with_cost_weights(DVector::from_vec(w.clone()))
                .map_err(|e| Error::Config(format!("target {label}: {e}"))),
            None => Ok(target),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Builds and validates every target and parameter.
    pub fn into_scenario(self) -> Result<Scenario> {
        if self.targets.is_empty() {
            return Err(Error::Config("scenario lists no targets".into()));
        }
        let targets = self
            .targets
            .iter()
            .enumerate()
            .map(|(i, t)| t.build(i))
            .collect::<Result<Vec<_>>>()?;
        let mut warnings = Vec::new();
        for t in &targets {
            let report = validate_target(t)?;
            if let Some(e) = report.errors().next() {
                return Err(Error::Config(format!("target {}: {e}", t.label())));
            }
            warnings.extend(report.warnings().map(|w| format!("target {}: {w}", t.label())));
        }
        let c = self.constraints.unwrap_or_default();
        let constraints = Constraints { priorities: c.priorities, loss: c.losses };
        constraints.validate(targets.len()).map_err(config_err)?;
        let topology = match self.topology {
            Some(t) => {
                if t.adjacency.len() != targets.len() {
                    return Err(Error::Config(format!(
                        "topology has {} nodes for {} targets",
                        t.adjacency.len(),
                        targets.len()
                    )));
                }
                Some(Topology::from_adjacency(&t.adjacency).map_err(config_err)?)
            }
            None => None,
        };
        let solver = SolverOptions {
            outer_tol: self.solver.outer_tol,
            inner_tol: self.solver.inner_tol,
            mare_tol: self.solver.mare_tol,
            ..SolverOptions::default()
        };
        for (name, v) in [
            ("solver.outer_tol", solver.outer_tol),
            ("solver.inner_tol", solver.inner_tol),
            ("solver.mare_tol", solver.mare_tol),
            ("solver.consensus_tol", self.solver.consensus_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("schedule.length", self.schedule.length),
            ("simulate.horizon", self.simulate.horizon),
            ("simulate.runs", self.simulate.runs),
            ("simulate.repeats", self.simulate.repeats),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(Scenario {
            targets,
            constraints,
            topology,
            solver,
            consensus_tol: self.solver.consensus_tol,
            schedule: self.schedule,
            simulate: self.simulate,
            warnings,
        })
    }
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ScenarioConfig::load(path)?.into_scenario()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        ScenarioConfig::from_toml_str(text)?.into_scenario()
    }

    pub fn initial_covariances(&self) -> Vec<CovMatrix> {
        default_initial_covariances(&self.targets)
    }

    fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.schedule.seed = s;
            self.simulate.seed = s;
        }
        self
    }

    fn backoff(&self, duration: usize) -> BackoffConfig {
        let b = self.schedule.backoff;
        BackoffConfig { alpha: b.alpha, epsilon_jitter: b.epsilon_jitter, duration }
    }
}

/// Solves the scenario centrally, or over the network when `distributed` is
/// set or the scenario has a topology (a complete graph when none is given).
/// An infeasible scenario is an error naming the violated condition.
pub fn solve(scenario: &Scenario, distributed: bool) -> Result<SolveReport> {
    let report = if distributed || scenario.topology.is_some() {
        let topology = match &scenario.topology {
            Some(t) => t.clone(),
            None => Topology::complete(scenario.targets.len())?,
        };
        let opts = DistributedOptions {
            solver: scenario.solver,
            consensus_tol: scenario.consensus_tol,
            ..DistributedOptions::default()
        };
        run_distributed_op(&scenario.targets, &topology, &scenario.constraints, &opts)?
            .node_reports
            .swap_remove(0)
    } else {
        optimizer::solve_op(&scenario.targets, &scenario.constraints, &scenario.solver)?
    };
    if let Some(reason) = &report.infeasibility {
        return Err(Error::Infeasible(reason.to_string()));
    }
    Ok(report)
}

/// A solution as stored in `solution.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionFile {
    pub labels: Vec<String>,
    pub q: ScheduleDistribution,
    pub costs: Vec<f64>,
    pub q_critical: Vec<f64>,
    pub gamma_star: f64,
}

pub fn solution_csv(scenario: &Scenario, report: &SolveReport) -> Result<String> {
    let q = report
        .q_star
        .as_ref()
        .ok_or_else(|| Error::Infeasible("no distribution to write".into()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["target", "label", "q", "cost", "q_critical", "gamma_star"])?;
    for (i, (t, s)) in scenario.targets.iter().zip(&report.per_target).enumerate() {
        w.write_record([
            i.to_string(),
            t.label().to_string(),
            q[i].to_string(),
            s.cost.to_string(),
            s.q_critical.to_string(),
            report.gamma_star.to_string(),
        ])?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config(format!("solution file: bad `{name}` column")))
}

pub fn read_solution(path: impl AsRef<Path>) -> Result<SolutionFile> {
    let mut r = csv::Reader::from_path(path)?;
    let (mut labels, mut q, mut costs, mut crit, mut gamma) = (vec![], vec![], vec![], vec![], f64::NAN);
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if parse_field::<usize>(&rec, 0, "target")? != row {
            return Err(Error::Config("solution file: targets out of order".into()));
        }
        labels.push(rec.get(1).unwrap_or_default().to_string());
        q.push(parse_field(&rec, 2, "q")?);
        costs.push(parse_field(&rec, 3, "cost")?);
        crit.push(parse_field(&rec, 4, "q_critical")?);
        gamma = parse_field(&rec, 5, "gamma_star")?;
    }
    if q.is_empty() {
        return Err(Error::Config("solution file has no rows".into()));
    }
    Ok(SolutionFile {
        labels,
        q: ScheduleDistribution::new(q).map_err(config_err)?,
        costs,
        q_critical: crit,
        gamma_star: gamma,
    })
}

/// Fixed-point cost of every target at the scheduled probabilities `q`.
pub fn reevaluate_costs(scenario: &Scenario, q: &ScheduleDistribution) -> Result<Vec<f64>> {
    if q.len() != scenario.targets.len() {
        return Err(Error::Config(format!(
            "distribution has {} entries for {} targets",
            q.len(),
            scenario.targets.len()
        )));
    }
    scenario
        .targets
        .iter()
        .enumerate()
        .map(|(i, t)| optimizer::scheduled_cost(t, q[i], scenario.constraints.loss(i), &scenario.solver))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleKind {
    Random,
    Minconsec,
    Csma,
}

/// Builds a schedule of exactly `len` steps. The minimal-consecutiveness
/// sequence has period `schedule.length` and is continued periodically.
pub fn make_schedule(
    scenario: &Scenario,
    q: &ScheduleDistribution,
    kind: ScheduleKind,
    len: usize,
) -> Result<ScheduleSequence> {
    match kind {
        ScheduleKind::Random => Ok(sample_stochastic_schedule(q, len, scenario.schedule.seed)),
        ScheduleKind::Minconsec => {
            Ok(build_min_consecutive_schedule(q, scenario.schedule.length)?.cycled_to(len))
        }
        ScheduleKind::Csma => Ok(simulate_csma_schedule(q, &scenario.backoff(len), scenario.schedule.seed)?.sequence),
    }
}

/// One row of the method comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: &'static str,
    pub cost: Option<f64>,
    pub half_width: Option<f64>,
    pub note: String,
}

/// Optimal bound, Monte Carlo expected cost under i.i.d. scheduling, the
/// periodic minimal-consecutiveness sequence and optionally the
/// sliding-window baseline. Failures are recorded per method.
pub fn compare(scenario: &Scenario, report: &SolveReport, window: Option<usize>) -> Result<Vec<MethodResult>> {
    let q = report
        .q_star
        .as_ref()
        .ok_or_else(|| Error::Infeasible("no distribution to compare".into()))?;
    let p0 = scenario.initial_covariances();
    let sim = &scenario.simulate;
    let row = |method, r: Result<(f64, Option<f64>)>, note: String| match r {
        Ok((c, hw)) => MethodResult { method, cost: Some(c), half_width: hw, note },
        Err(e) => MethodResult { method, cost: None, half_width: None, note: e.to_string() },
    };
    let mut rows = vec![MethodResult {
        method: "op_bound",
        cost: Some(report.gamma_star),
        half_width: None,
        note: String::new(),
    }];
    let mc = monte_carlo_expected_cost(&scenario.targets, q, sim.horizon, sim.runs, sim.seed, &p0)
        .map(|m| (m.cost.max_over_targets, Some(m.max_half_width())));
    rows.push(row("stochastic_mc", mc, format!("runs={} horizon={}", sim.runs, sim.horizon)));
    let periodic = build_min_consecutive_schedule(q, scenario.schedule.length).and_then(|s| {
        evaluate_schedule(&scenario.targets, &s.repeated(sim.repeats), &p0).map(|r| (r.max_over_targets, None))
    });
    rows.push(row(
        "min_consecutive",
        periodic,
        format!("period={} repeats={}", scenario.schedule.length, sim.repeats),
    ));
    if let Some(w) = window {
        let score = sim.window_score.into();
        let sw = sliding_window_schedule_with(&scenario.targets, w, sim.horizon, &p0, score)
            .map(|(_, r)| (r.max_over_targets, None));
        let label = match sim.window_score {
            WindowScoreConfig::End => "end",
            WindowScoreConfig::Cumulative => "cumulative",
        };
        rows.push(row("sliding_window", sw, format!("window={w} score={label} horizon={}", sim.horizon)));
    }
    Ok(rows)
}

pub fn compare_csv(rows: &[MethodResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "cost", "half_width", "note"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([r.method.to_string(), opt(r.cost), opt(r.half_width), r.note.clone()])?;
    }
    finish_csv(w)
}

/// Exit status for an error: 2 configuration, 3 infeasible, 4 numeric.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Infeasible(_) => 3,
        Error::Numeric(_) | Error::Consensus { .. } | Error::Protocol(_) => 4,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Dimension(_) | Error::Io(_) | Error::Csv(_) => 2,
    }
}

#[derive(Debug, Parser)]
#[command(name = "stochsched", version, about = "Stochastic sensor scheduling for targets sharing one sensor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides every seed in the scenario.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Solve with the simulated estimator network.
    #[arg(long)]
    pub distributed: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the optimal distribution; writes solution.csv.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Build a schedule; writes schedule.txt.
    Schedule {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "minconsec")]
        kind: ScheduleKind,
        /// Use a previously written solution.csv instead of solving.
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Run the filters along a schedule; writes traces.csv and tracking.csv.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "random")]
        kind: ScheduleKind,
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Compare scheduling methods; writes compare.csv and solution.csv.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Sliding-window lookahead; overrides `simulate.window`.
        #[arg(long)]
        window: Option<usize>,
    },
}

fn prepare(common: &CommonArgs) -> Result<Scenario> {
    let scenario = Scenario::load(&common.config)?.with_seed(common.seed);
    for w in &scenario.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&common.out)?;
    Ok(scenario)
}

fn distribution(scenario: &Scenario, solution: Option<&Path>, distributed: bool) -> Result<ScheduleDistribution> {
    match solution {
        Some(path) => {
            let file = read_solution(path)?;
            if file.q.len() != scenario.targets.len() {
                return Err(Error::Config(format!(
                    "solution has {} targets, scenario has {}",
                    file.q.len(),
                    scenario.targets.len()
                )));
            }
            Ok(file.q)
        }
        None => Ok(solve(scenario, distributed)?.q_star.expect("feasible report carries q")),
    }
}

fn fmt_cost(v: f64) -> String {
    format!("{v:.4}")
}

/// Human-readable solution table.
pub fn render_solution(scenario: &Scenario, report: &SolveReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "gamma* = {:.4}  (outer iterations {})", report.gamma_star, report.outer_iterations);
    let _ = writeln!(s, "{:<4} {:<16} {:>10} {:>12} {:>10}", "i", "label", "q*", "cost", "q_c");
    if let Some(q) = &report.q_star {
        for (i, (t, p)) in scenario.targets.iter().zip(&report.per_target).enumerate() {
            let _ = writeln!(
                s,
                "{i:<4} {:<16} {:>10.4} {:>12} {:>10.4}",
                t.label(),
                q[i],
                fmt_cost(p.cost),
                p.q_critical
            );
        }
    }
    s
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve { common } => {
            let scenario = prepare(&common)?;
            let report = solve(&scenario, common.distributed)?;
            print!("{}", render_solution(&scenario, &report));
            std::fs::write(common.out.join("solution.csv"), solution_csv(&scenario, &report)?)?;
        }
        Command::Schedule { common, kind, solution } => {
            let scenario = prepare(&common)?;
            let q = distribution(&scenario, solution.as_deref(), common.distributed)?;
            let len = match kind {
                ScheduleKind::Csma => scenario.schedule.backoff.duration,
                _ => scenario.schedule.length,
            };
            let seq = make_schedule(&scenario, &q, kind, len)?;
            seq.write_to(common.out.join("schedule.txt"))?;
            println!("length {}  max run {}", seq.len(), seq.max_run_length());
            println!("{:<4} {:>8} {:>10} {:>10}", "i", "count", "freq", "q*");
            for (i, (c, f)) in seq.counts().iter().zip(seq.frequencies()).enumerate() {
                println!("{i:<4} {c:>8} {f:>10.4} {:>10.4}", q[i]);
            }
        }
        Command::Simulate { common, kind, solution } => {
            let scenario = prepare(&common)?;
            let q = distribution(&scenario, solution.as_deref(), common.distributed)?;
            let seq = make_schedule(&scenario, &q, kind, scenario.simulate.horizon)?;
            let p0 = scenario.initial_covariances();
            let report = evaluate_schedule(&scenario.targets, &seq, &p0)?;
            let series = report.trace_series.as_deref().unwrap_or_default();
            write_trace_csv(std::fs::File::create(common.out.join("traces.csv"))?, series)?;
            let run = simulate_tracking(&scenario.targets, &seq, &p0, scenario.simulate.seed)?;
            write_tracking_csv(std::fs::File::create(common.out.join("tracking.csv"))?, &scenario.targets, &run)?;
            println!("{:<4} {:<16} {:>12}", "i", "label", "avg cost");
            for (i, (t, c)) in scenario.targets.iter().zip(&report.per_target_avg_trace).enumerate() {
                println!("{i:<4} {:<16} {:>12}", t.label(), fmt_cost(*c));
            }
            println!("max over targets {}", fmt_cost(report.max_over_targets));
        }
        Command::Compare { common, window } => {
            let scenario = prepare(&common)?;
            let report = solve(&scenario, common.distributed)?;
            print!("{}", render_solution(&scenario, &report));
            std::fs::write(common.out.join("solution.csv"), solution_csv(&scenario, &report)?)?;
            let rows = compare(&scenario, &report, window.or(scenario.simulate.window))?;
            println!("{:<16} {:>12} {:>10}  note", "method", "cost", "+/-");
            for r in &rows {
                let cost = r.cost.map(fmt_cost).unwrap_or_else(|| "-".into());
                let hw = r.half_width.map(|h| format!("{h:.4}")).unwrap_or_default();
                println!("{:<16} {cost:>12} {hw:>10}  {}", r.method, r.note);
            }
            std::fs::write(common.out.join("compare.csv"), compare_csv(&rows)?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE_A: &str = r#"
[[targets]]
label = "system-1"
a = [[0.0, 1.0], [-0.49, 1.4]]
c = [[1.0, 0.0]]
q = [[5.0, 0.0], [0.0, 5.0]]
r = [[0.5]]

[[targets]]
label = "system-2"
a = [[0.0, 1.0], [-0.72, 1.7]]
c = [[1.0, 0.0]]
q = [[1.0, 0.0], [0.0, 1.0]]
r = [[1.0]]
"#;

    #[test]
    fn parses_and_solves_example_a() {
        let s = Scenario::from_toml_str(EXAMPLE_A).unwrap();
        assert_eq!(s.targets.len(), 2);
        let r = solve(&s, false).unwrap();
        assert!((r.q_star.unwrap()[0] - 0.674).abs() < 0.005);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{EXAMPLE_A}\n[solver]\nouter_tol = 1e-3\nfoo = 1\n");
        assert!(matches!(Scenario::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn empty_target_list_is_a_config_error() {
        let err = Scenario::from_toml_str("targets = []").unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn mixed_target_forms_rejected() {
        let text = "[[targets]]\na = [[1.0]]\ndelay_chain = { a = 1.0, q = 1.0, r = 1.0, d = 0 }\n";
        assert!(Scenario::from_toml_str(text).is_err());
        let ragged = "[[targets]]\na = [[1.0, 0.0], [1.0]]\nc = [[1.0]]\nq = [[1.0]]\nr = [[1.0]]\n";
        assert!(Scenario::from_toml_str(ragged).is_err());
    }

    #[test]
    fn delay_chain_cost_defaults_to_true_state() {
        let text = "[[targets]]\ndelay_chain = { a = 1.0, q = 2.0, r = 1.0, d = 2 }\n\
                    [[targets]]\ndelay_chain = { a = 1.0, q = 2.0, r = 1.0, d = 2 }\ncost = \"trace\"\n";
        let s = Scenario::from_toml_str(text).unwrap();
        assert!(s.targets[0].cost_weights().is_some());
        assert!(s.targets[1].cost_weights().is_none());
    }

    #[test]
    fn infeasible_scenario_exit_code() {
        let text = "[[targets]]\na = [[2.0]]\nc = [[1.0]]\nq = [[1.0]]\nr = [[1.0]]\n\
                    [[targets]]\na = [[2.0]]\nc = [[1.0]]\nq = [[1.0]]\nr = [[1.0]]\n";
        let s = Scenario::from_toml_str(text).unwrap();
        let err = solve(&s, false).unwrap_err();
        assert_eq!(exit_code(&err), 3);
        assert!(err.to_string().contains("critical"));
    }

    #[test]
    fn solution_csv_round_trip() {
        let s = Scenario::from_toml_str(EXAMPLE_A).unwrap();
        let r = solve(&s, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("solution.csv");
        std::fs::write(&path, solution_csv(&s, &r).unwrap()).unwrap();
        let back = read_solution(&path).unwrap();
        assert_eq!(Some(&back.q), r.q_star.as_ref());
        let costs = reevaluate_costs(&s, &back.q).unwrap();
        for (a, b) in costs.iter().zip(&back.costs) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}
