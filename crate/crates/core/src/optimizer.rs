//! Optimal observation distribution by nested bisection.
//!
//! The outer loop bisects the common cost budget `gamma`; for each trial
//! budget every target independently finds the least probability whose MARE
//! fixed point meets the budget (`q_i^opt(gamma)`, monotone because the fixed
//! point decreases in `q`). A budget is achievable iff the sum of those
//! probabilities, `mu(gamma)`, is at most one.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mare::{self, DEFAULT_MAX_ITER};
use crate::model::{LtiTarget, ScheduleDistribution};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Final width of the budget interval, in cost units.
    pub outer_tol: f64,
    /// Width of each per-target probability bisection.
    pub inner_tol: f64,
    pub mare_tol: f64,
    pub mare_max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { outer_tol: 1e-3, inner_tol: 1e-5, mare_tol: 1e-9, mare_max_iter: DEFAULT_MAX_ITER }
    }
}

impl SolverOptions {
    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("outer_tol", self.outer_tol),
            ("inner_tol", self.inner_tol),
            ("mare_tol", self.mare_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-target floors on the observation probability and measurement-loss rates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Constraints {
    pub priorities: Option<Vec<f64>>,
    pub loss: Option<Vec<f64>>,
}

impl Constraints {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let Some(alpha) = &self.priorities {
            if alpha.len() != n {
                return Err(Error::Dimension(format!(
                    "{} priorities for {n} targets",
                    alpha.len()
                )));
            }
            if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::InvalidArgument("priorities must lie in [0, 1]".into()));
            }
            let sum: f64 = alpha.iter().sum();
            if sum > 1.0 + 1e-12 {
                return Err(Error::InvalidArgument(format!("priorities sum to {sum} > 1")));
            }
        }
        if let Some(tau) = &self.loss {
            if tau.len() != n {
                return Err(Error::Dimension(format!("{} loss rates for {n} targets", tau.len())));
            }
            if tau.iter().any(|t| !(0.0..1.0).contains(t)) {
                return Err(Error::InvalidArgument("loss rates must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.priorities.as_ref().map_or(0.0, |a| a[i])
    }

    pub fn loss(&self, i: usize) -> f64 {
        self.loss.as_ref().map_or(0.0, |t| t[i])
    }
}

/// Solution of one per-target subproblem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSolution {
    /// Least scheduled probability meeting the budget, or 1 when infeasible.
    pub q: f64,
    /// Cost of the fixed point at the returned probability (infinite if none).
    pub cost: f64,
    pub feasible: bool,
    pub iterations: usize,
}

/// Per-target quantities that do not depend on the budget.
#[derive(Debug, Clone, Copy)]
struct Subproblem<'t> {
    target: &'t LtiTarget,
    q_critical: f64,
    loss: f64,
}

impl<'t> Subproblem<'t> {
    fn new(target: &'t LtiTarget, loss: f64) -> Self {
        Self { target, q_critical: target.critical_probability(), loss }
    }

    /// Smallest scheduled probability that still has a fixed point.
    fn scheduled_floor(&self) -> f64 {
        self.q_critical / (1.0 - self.loss)
    }

    /// Cost of the fixed point at scheduled probability `q`; `None` if the
    /// MARE does not converge.
    fn cost_at(&self, q: f64, opts: &SolverOptions) -> Result<Option<f64>> {
        let effective = (q * (1.0 - self.loss)).clamp(0.0, 1.0);
        let res = mare::solve_mare(self.target, effective, opts.mare_tol, opts.mare_max_iter)?;
        Ok(res.fixed_point().map(|x| self.target.cost(x.matrix())))
    }

    fn solve(&self, gamma: f64, opts: &SolverOptions) -> Result<InnerSolution> {
        let tol = opts.inner_tol;
        let mut iterations = 0;
        let best = match self.cost_at(1.0, opts)? {
            Some(c) if c <= gamma => c,
            other => {
                return Ok(InnerSolution {
                    q: 1.0,
                    cost: other.unwrap_or(f64::INFINITY),
                    feasible: false,
                    iterations: 1,
                })
            }
        };
        let mut lo = self.scheduled_floor();
        let start = (lo + tol).min(1.0);
        if let Some(c) = self.cost_at(start, opts)? {
            if c <= gamma {
                return Ok(InnerSolution { q: start, cost: c, feasible: true, iterations: 2 });
            }
        }
        lo = start;
        let mut hi = 1.0;
        let mut hi_cost = best;
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            iterations += 1;
            match self.cost_at(mid, opts)? {
                Some(c) if c <= gamma => {
                    hi = mid;
                    hi_cost = c;
                }
                _ => lo = mid,
            }
        }
        Ok(InnerSolution { q: hi, cost: hi_cost, feasible: true, iterations: iterations + 2 })
    }
}

/// Cost of the MARE fixed point at scheduled probability `q` with loss rate
/// `loss`; infinite when the fixed point does not exist.
pub fn scheduled_cost(target: &LtiTarget, q: f64, loss: f64, opts: &SolverOptions) -> Result<f64> {
    let sub = Subproblem { target, q_critical: 0.0, loss };
    Ok(sub.cost_at(q, opts)?.unwrap_or(f64::INFINITY))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("budget must be positive, got {gamma}")));
    }
    Ok(())
}

/// Least `q` in `(q_c, 1]` whose MARE fixed point has cost at most `gamma`;
/// returns `q = 1` flagged infeasible when even full attention misses the budget.
pub fn min_probability_for_budget(
    target: &LtiTarget,
    gamma: f64,
    tol: f64,
) -> Result<InnerSolution> {
    check_gamma(gamma)?;
    let opts = SolverOptions { inner_tol: tol, ..SolverOptions::default() };
    opts.check()?;
    Subproblem::new(target, 0.0).solve(gamma, &opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuEvaluation {
    pub mu: f64,
    /// Per-target probabilities after applying priority floors.
    pub q: Vec<f64>,
    pub inner: Vec<InnerSolution>,
}

fn evaluate_mu(
    subs: &[Subproblem<'_>],
    constraints: &Constraints,
    gamma: f64,
    opts: &SolverOptions,
) -> Result<MuEvaluation> {
    let inner = subs
        .par_iter()
        .map(|s| s.solve(gamma, opts))
        .collect::<Result<Vec<_>>>()?;
    let q: Vec<f64> = inner
        .iter()
        .enumerate()
        .map(|(i, s)| s.q.max(constraints.priority(i)))
        .collect();
    let mu = q.iter().sum();
    Ok(MuEvaluation { mu, q, inner })
}

/// `mu(gamma) = sum_i q_i^opt(gamma)`.
pub fn mu_of_gamma(targets: &[LtiTarget], gamma: f64, tol: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let opts = SolverOptions { inner_tol: tol, ..SolverOptions::default() };
    opts.check()?;
    let subs: Vec<_> = targets.iter().map(|t| Subproblem::new(t, 0.0)).collect();
    Ok(evaluate_mu(&subs, &Constraints::none(), gamma, &opts)?.mu)
}

/// Like [`mu_of_gamma`], honouring priorities and losses.
pub fn mu_of_gamma_constrained(
    targets: &[LtiTarget],
    constraints: &Constraints,
    gamma: f64,
    opts: &SolverOptions,
) -> Result<MuEvaluation> {
    check_gamma(gamma)?;
    opts.check()?;
    constraints.validate(targets.len())?;
    let subs = subproblems(targets, constraints);
    evaluate_mu(&subs, constraints, gamma, opts)
}

fn subproblems<'t>(targets: &'t [LtiTarget], constraints: &Constraints) -> Vec<Subproblem<'t>> {
    targets
        .par_iter()
        .enumerate()
        .map(|(i, t)| Subproblem::new(t, constraints.loss(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Infeasibility {
    /// `sum_i q_c,i / (1 - tau_i) >= 1`: no distribution stabilises every target.
    CriticalSum { sum: f64 },
    /// Priority floors leave no room for the critical probabilities.
    Priorities { required: f64 },
}

impl std::fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::CriticalSum { sum } => write!(
                f,
                "sum of critical probabilities (loss-adjusted) is {sum:.6} >= 1; no distribution keeps every estimator bounded"
            ),
            Self::Priorities { required } => write!(
                f,
                "priority floors combined with critical probabilities require {required:.6} >= 1"
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSolution {
    pub q: f64,
    /// Cost of the MARE fixed point at `q` (loss-adjusted).
    pub cost: f64,
    pub q_critical: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub gamma_star: f64,
    pub q_star: Option<ScheduleDistribution>,
    pub per_target: Vec<TargetSolution>,
    pub outer_iterations: usize,
    /// Total inner bisection steps per target, summed over outer iterations.
    pub inner_iterations: Vec<usize>,
    pub feasible: bool,
    pub infeasibility: Option<Infeasibility>,
    /// `mu` at the reported budget before rescaling to a unit sum.
    pub mu_at_gamma: f64,
}

impl SolveReport {
    fn infeasible(subs: &[Subproblem<'_>], reason: Infeasibility) -> Self {
        Self {
            gamma_star: f64::INFINITY,
            q_star: None,
            per_target: subs
                .iter()
                .map(|s| TargetSolution { q: f64::NAN, cost: f64::INFINITY, q_critical: s.q_critical })
                .collect(),
            outer_iterations: 0,
            inner_iterations: vec![0; subs.len()],
            feasible: false,
            infeasibility: Some(reason),
            mu_at_gamma: f64::NAN,
        }
    }
}

fn feasibility(subs: &[Subproblem<'_>], constraints: &Constraints) -> Option<Infeasibility> {
    let crit: f64 = subs.iter().map(|s| s.scheduled_floor()).sum();
    if crit >= 1.0 {
        return Some(Infeasibility::CriticalSum { sum: crit });
    }
    let required: f64 = subs
        .iter()
        .enumerate()
        .map(|(i, s)| s.scheduled_floor().max(constraints.priority(i)))
        .sum();
    if required >= 1.0 && constraints.priorities.is_some() {
        return Some(Infeasibility::Priorities { required });
    }
    None
}

/// A distribution guaranteed to be strictly inside the feasible region:
/// every target gets its floor plus an equal share of the slack.
fn interior_distribution(subs: &[Subproblem<'_>], constraints: &Constraints) -> Vec<f64> {
    let floors: Vec<f64> = subs
        .iter()
        .enumerate()
        .map(|(i, s)| s.scheduled_floor().max(constraints.priority(i)))
        .collect();
    let slack = 1.0 - floors.iter().sum::<f64>();
    let share = slack / subs.len() as f64;
    floors.iter().map(|f| (f + share).min(1.0)).collect()
}

fn bracket(
    subs: &[Subproblem<'_>],
    constraints: &Constraints,
    opts: &SolverOptions,
) -> Result<(f64, f64)> {
    let mut lo = 0.0_f64;
    for s in subs {
        let c = s.cost_at(1.0, opts)?.ok_or_else(|| {
            Error::Numeric(format!("MARE for '{}' does not converge at q = 1", s.target.label()))
        })?;
        lo = lo.max(c);
    }
    if subs.len() == 1 {
        return Ok((lo, lo));
    }
    let interior = interior_distribution(subs, constraints);
    let mut hi = 0.0_f64;
    for (s, &q) in subs.iter().zip(&interior) {
        let c = s.cost_at(q, opts)?.ok_or_else(|| {
            Error::Numeric(format!(
                "MARE for '{}' does not converge at interior probability {q}",
                s.target.label()
            ))
        })?;
        hi = hi.max(c);
    }
    Ok((lo, hi.max(lo)))
}

/// Initial budget interval `[gamma_lo, gamma_hi]` with
/// `mu(gamma_hi) <= 1 <= mu(gamma_lo)` for two or more targets.
///
/// `gamma_lo` is the largest individually achievable cost (every target
/// observed always); `gamma_hi` is the worst cost under the interior
/// distribution `q_i = q_c,i + (1 - sum q_c) / N`.
pub fn bracket_gamma(targets: &[LtiTarget]) -> Result<(f64, f64)> {
    bracket_gamma_with(targets, &Constraints::none(), &SolverOptions::default())
}

pub fn bracket_gamma_with(
    targets: &[LtiTarget],
    constraints: &Constraints,
    opts: &SolverOptions,
) -> Result<(f64, f64)> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no targets".into()));
    }
    opts.check()?;
    constraints.validate(targets.len())?;
    let subs = subproblems(targets, constraints);
    if let Some(reason) = feasibility(&subs, constraints) {
        return Err(Error::Infeasible(reason.to_string()));
    }
    bracket(&subs, constraints, opts)
}

/// Minimises the worst per-target fixed-point cost over distributions.
///
/// Bisects `gamma` until the interval is narrower than `outer_tol`, then
/// reports the feasible endpoint and scales its probabilities by `1 / mu` so
/// that they sum to one; scaling up only lowers each fixed point.
pub fn solve_op(
    targets: &[LtiTarget],
    constraints: &Constraints,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no targets".into()));
    }
    opts.check()?;
    constraints.validate(targets.len())?;
    let subs = subproblems(targets, constraints);
    if let Some(reason) = feasibility(&subs, constraints) {
        return Ok(SolveReport::infeasible(&subs, reason));
    }
    let (mut lo, mut hi) = bracket(&subs, constraints, opts)?;
    let mut inner_iterations = vec![0usize; subs.len()];
    let mut outer_iterations = 0;

    let mut at_hi = evaluate_mu(&subs, constraints, hi, opts)?;
    accumulate(&mut inner_iterations, &at_hi);
    // The interior distribution certifies hi; guard against MARE tolerance noise.
    while at_hi.mu > 1.0 + 1e-12 {
        if outer_iterations >= 64 {
            return Err(Error::Numeric("could not find a feasible budget above the bracket".into()));
        }
        lo = hi;
        hi *= 2.0;
        at_hi = evaluate_mu(&subs, constraints, hi, opts)?;
        accumulate(&mut inner_iterations, &at_hi);
        outer_iterations += 1;
    }
    while hi - lo > opts.outer_tol {
        let mid = 0.5 * (lo + hi);
        let eval = evaluate_mu(&subs, constraints, mid, opts)?;
        accumulate(&mut inner_iterations, &eval);
        outer_iterations += 1;
        if eval.mu <= 1.0 {
            hi = mid;
            at_hi = eval;
        } else {
            lo = mid;
        }
    }
    finish(&subs, hi, at_hi, outer_iterations, inner_iterations, opts)
}

fn accumulate(counts: &mut [usize], eval: &MuEvaluation) {
    for (c, s) in counts.iter_mut().zip(&eval.inner) {
        *c += s.iterations;
    }
}

pub(crate) fn rescale(q: &[f64]) -> Vec<f64> {
    let mu: f64 = q.iter().sum();
    let mut scaled: Vec<f64> = q.iter().map(|v| (v / mu).min(1.0)).collect();
    // absorb rounding so the vector sums to one to machine precision
    let err = 1.0 - scaled.iter().sum::<f64>();
    if let Some(max) = scaled
        .iter_mut()
        .max_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
    {
        *max += err;
    }
    scaled
}

fn finish(
    subs: &[Subproblem<'_>],
    gamma: f64,
    at_gamma: MuEvaluation,
    outer_iterations: usize,
    inner_iterations: Vec<usize>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let q = rescale(&at_gamma.q);
    let per_target = subs
        .iter()
        .zip(&q)
        .map(|(s, &qi)| {
            let cost = s.cost_at(qi, opts)?.unwrap_or(f64::INFINITY);
            Ok(TargetSolution { q: qi, cost, q_critical: s.q_critical })
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma_star = if subs.len() == 1 { per_target[0].cost } else { gamma };
    Ok(SolveReport {
        gamma_star,
        q_star: Some(ScheduleDistribution::new(q)?),
        per_target,
        outer_iterations,
        inner_iterations,
        feasible: true,
        infeasibility: None,
        mu_at_gamma: at_gamma.mu,
    })
}

pub(crate) struct PreparedProblem<'t> {
    subs: Vec<Subproblem<'t>>,
    constraints: Constraints,
    opts: SolverOptions,
}

impl<'t> PreparedProblem<'t> {
    pub(crate) fn new(
        targets: &'t [LtiTarget],
        constraints: &Constraints,
        opts: &SolverOptions,
    ) -> Result<Self> {
        opts.check()?;
        constraints.validate(targets.len())?;
        Ok(Self {
            subs: subproblems(targets, constraints),
            constraints: constraints.clone(),
            opts: *opts,
        })
    }

    pub(crate) fn infeasibility(&self) -> Option<Infeasibility> {
        feasibility(&self.subs, &self.constraints)
    }

    pub(crate) fn infeasible_report(&self, reason: Infeasibility) -> SolveReport {
        SolveReport::infeasible(&self.subs, reason)
    }

    pub(crate) fn bracket(&self) -> Result<(f64, f64)> {
        bracket(&self.subs, &self.constraints, &self.opts)
    }

    /// Local computation of node `i`: its clamped inner solution at `gamma`.
    pub(crate) fn local_q(&self, i: usize, gamma: f64) -> Result<InnerSolution> {
        let mut s = self.subs[i].solve(gamma, &self.opts)?;
        s.q = s.q.max(self.constraints.priority(i));
        Ok(s)
    }

    pub(crate) fn q_critical(&self, i: usize) -> f64 {
        self.subs[i].q_critical
    }

    pub(crate) fn local_cost(&self, i: usize, q: f64) -> Result<f64> {
        Ok(self.subs[i].cost_at(q, &self.opts)?.unwrap_or(f64::INFINITY))
    }
}
