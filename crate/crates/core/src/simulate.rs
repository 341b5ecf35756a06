//! Kalman filtering under a schedule, cost evaluation, Monte Carlo estimates
//! and a receding-horizon tree-search baseline.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{CovMatrix, psd_sqrt};
use crate::mare::RiccatiKernel;
use crate::model::{LtiTarget, ScheduleDistribution};
use crate::schedule::{ScheduleSequence, sample_with};

/// Largest tree the sliding-window search will enumerate per step.
pub const MAX_WINDOW_LEAVES: u64 = 1_000_000;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// One-step prediction covariance recursion: the Riccati map with the update
/// term switched on when `observed`.
pub fn covariance_step(target: &LtiTarget, p: &CovMatrix, observed: bool) -> Result<CovMatrix> {
    let n = target.state_dim();
    if p.dim() != n {
        return Err(Error::Dimension(format!("covariance is {0}x{0}, target state is {n}", p.dim())));
    }
    let mut out = DMatrix::zeros(n, n);
    RiccatiKernel::new(target).apply(p.matrix(), if observed { 1.0 } else { 0.0 }, &mut out)?;
    Ok(CovMatrix::from_symmetric(out))
}

/// Prior estimate and prediction covariance at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub p: CovMatrix,
}

impl FilterState {
    pub fn new(x_hat: DVector<f64>, p: CovMatrix) -> Result<Self> {
        if x_hat.len() != p.dim() {
            return Err(Error::Dimension(format!(
                "estimate has length {}, covariance is {1}x{1}",
                x_hat.len(),
                p.dim()
            )));
        }
        Ok(Self { x_hat, p })
    }

    /// Zero estimate with the given prior covariance.
    pub fn zero(p: CovMatrix) -> Self {
        Self { x_hat: DVector::zeros(p.dim()), p }
    }
}

fn check_state(target: &LtiTarget, state: &FilterState) -> Result<()> {
    let n = target.state_dim();
    if state.x_hat.len() != n || state.p.dim() != n {
        return Err(Error::Dimension(format!(
            "filter state has dimension {}, target state is {n}",
            state.x_hat.len()
        )));
    }
    Ok(())
}

/// Measurement update. Without a measurement the posterior is the prior.
pub fn measurement_update(
    target: &LtiTarget,
    state: &FilterState,
    measurement: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, CovMatrix)> {
    check_state(target, state)?;
    let Some(y) = measurement else {
        return Ok((state.x_hat.clone(), state.p.clone()));
    };
    if y.len() != target.output_dim() {
        return Err(Error::Dimension(format!(
            "measurement has length {}, target output is {}",
            y.len(),
            target.output_dim()
        )));
    }
    let p = state.p.matrix();
    let c = target.c();
    let pct = p * c.transpose();
    let s = c * &pct + target.r();
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Numeric("innovation covariance is singular".into()))?;
    // K = P C' S^-1
    let gain = chol.solve(&pct.transpose()).transpose();
    let innovation = y - c * &state.x_hat;
    let x_post = &state.x_hat + &gain * innovation;
    let p_post = p - &gain * pct.transpose();
    Ok((x_post, CovMatrix::from_symmetric(crate::linalg::symmetrize(&p_post))))
}

/// Measurement update (when a measurement is present) followed by the time
/// update. The returned covariance is exactly `covariance_step`.
pub fn kalman_step(
    target: &LtiTarget,
    state: &FilterState,
    measurement: Option<&DVector<f64>>,
) -> Result<FilterState> {
    let (x_post, _) = measurement_update(target, state, measurement)?;
    Ok(FilterState {
        x_hat: target.a() * x_post,
        p: covariance_step(target, &state.p, measurement.is_some())?,
    })
}

/// Per-target time-averaged cost of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub per_target_avg_trace: Vec<f64>,
    pub max_over_targets: f64,
    /// `trace_series[k][i]`: cost of target `i` after step `k`.
    pub trace_series: Option<Vec<Vec<f64>>>,
}

impl CostReport {
    fn from_averages(per_target_avg_trace: Vec<f64>, trace_series: Option<Vec<Vec<f64>>>) -> Self {
        let max_over_targets = per_target_avg_trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { per_target_avg_trace, max_over_targets, trace_series }
    }
}

/// Steps discarded before time averaging.
pub fn burn_in(horizon: usize) -> usize {
    (horizon / 5).min(200)
}

/// Default initial covariances: each target's process noise.
pub fn default_initial_covariances(targets: &[LtiTarget]) -> Vec<CovMatrix> {
    targets.iter().map(|t| CovMatrix::from_symmetric(t.q().clone())).collect()
}

fn check_inputs(targets: &[LtiTarget], p0: &[CovMatrix]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no targets".into()));
    }
    if p0.len() != targets.len() {
        return Err(Error::Dimension(format!("{} initial covariances for {} targets", p0.len(), targets.len())));
    }
    for (i, (t, p)) in targets.iter().zip(p0).enumerate() {
        if p.dim() != t.state_dim() {
            return Err(Error::Dimension(format!("initial covariance {i} does not match the target state")));
        }
    }
    Ok(())
}

/// Propagates every target's covariance along `steps`, calling `record(k, i,
/// cost)` after each step.
fn propagate(
    targets: &[LtiTarget],
    steps: &[usize],
    p0: &[CovMatrix],
    mut record: impl FnMut(usize, usize, f64),
) -> Result<()> {
    for (i, target) in targets.iter().enumerate() {
        let mut kernel = RiccatiKernel::new(target);
        let mut p = p0[i].matrix().clone();
        let mut next = p.clone();
        for (k, &s) in steps.iter().enumerate() {
            kernel.apply(&p, if s == i { 1.0 } else { 0.0 }, &mut next)?;
            std::mem::swap(&mut p, &mut next);
            record(k, i, target.cost(&p));
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("covariance of target {i} overflowed")));
        }
    }
    Ok(())
}

fn check_sequence(targets: &[LtiTarget], seq: &ScheduleSequence) -> Result<()> {
    if seq.n_targets() != targets.len() {
        return Err(Error::Dimension(format!(
            "schedule is for {} targets, got {}",
            seq.n_targets(),
            targets.len()
        )));
    }
    if seq.is_empty() {
        return Err(Error::InvalidArgument("schedule is empty".into()));
    }
    Ok(())
}

/// Deterministic cost of a schedule: time averages after the burn-in.
pub fn evaluate_schedule(targets: &[LtiTarget], seq: &ScheduleSequence, p0: &[CovMatrix]) -> Result<CostReport> {
    check_inputs(targets, p0)?;
    check_sequence(targets, seq)?;
    let horizon = seq.len();
    let mut series = vec![vec![0.0; targets.len()]; horizon];
    propagate(targets, seq.steps(), p0, |k, i, c| series[k][i] = c)?;
    let start = burn_in(horizon);
    let averages = (0..targets.len())
        .map(|i| series[start..].iter().map(|row| row[i]).sum::<f64>() / (horizon - start) as f64)
        .collect();
    Ok(CostReport::from_averages(averages, Some(series)))
}

/// Mean with a 95% normal half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, half_width: Z95 * (var / n).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    /// Expected cost per target over the final 20% of steps; the
    /// `max_over_targets` field is the maximum of the means.
    pub cost: CostReport,
    pub per_target: Vec<Estimate>,
    /// Per-run time-averaged max over targets (after burn-in), averaged over runs.
    pub time_averaged_max: Estimate,
    pub runs: usize,
    pub horizon: usize,
}

impl MonteCarloReport {
    /// Half-width attached to the largest per-target mean.
    pub fn max_half_width(&self) -> f64 {
        let i = self
            .cost
            .per_target_avg_trace
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        self.per_target[i].half_width
    }
}

/// Per-run generator: ChaCha stream `run` of the master seed.
pub fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

/// Expected covariance cost under i.i.d. scheduling with distribution `q`.
///
/// Runs are independent and seeded by stream; the mean expected trace series
/// is stored in `cost.trace_series`.
pub fn monte_carlo_expected_cost(
    targets: &[LtiTarget],
    q: &ScheduleDistribution,
    horizon: usize,
    runs: usize,
    seed: u64,
    p0: &[CovMatrix],
) -> Result<MonteCarloReport> {
    check_inputs(targets, p0)?;
    if q.len() != targets.len() {
        return Err(Error::Dimension(format!("distribution over {} targets, got {}", q.len(), targets.len())));
    }
    if horizon == 0 || runs == 0 {
        return Err(Error::InvalidArgument("horizon and run count must be positive".into()));
    }
    let n = targets.len();
    let tail_start = horizon - (horizon / 5).max(1);
    let start = burn_in(horizon);

    struct Run {
        tail: Vec<f64>,
        time_max: f64,
        series: Vec<f64>,
    }
    let results = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = run_rng(seed, r as u64);
            let seq = sample_with(q, horizon, &mut rng);
            let mut series = vec![0.0; horizon * n];
            propagate(targets, seq.steps(), p0, |k, i, c| series[k * n + i] = c)?;
            let avg = |from: usize, i: usize| {
                (from..horizon).map(|k| series[k * n + i]).sum::<f64>() / (horizon - from) as f64
            };
            let tail = (0..n).map(|i| avg(tail_start, i)).collect();
            let time_max = (0..n).map(|i| avg(start, i)).fold(f64::NEG_INFINITY, f64::max);
            Ok(Run { tail, time_max, series })
        })
        .collect::<Result<Vec<_>>>()?;

    let per_target: Vec<Estimate> = (0..n)
        .map(|i| Estimate::from_samples(&results.iter().map(|r| r.tail[i]).collect::<Vec<_>>()))
        .collect();
    let time_averaged_max = Estimate::from_samples(&results.iter().map(|r| r.time_max).collect::<Vec<_>>());
    let mut mean_series = vec![vec![0.0; n]; horizon];
    for r in &results {
        for (k, row) in mean_series.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v += r.series[k * n + i];
            }
        }
    }
    for row in mean_series.iter_mut() {
        for v in row.iter_mut() {
            *v /= runs as f64;
        }
    }
    Ok(MonteCarloReport {
        cost: CostReport::from_averages(per_target.iter().map(|e| e.mean).collect(), Some(mean_series)),
        per_target,
        time_averaged_max,
        runs,
        horizon,
    })
}

/// How a lookahead sequence is scored by the sliding-window search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowScore {
    /// Worst target cost at the end of the window.
    #[default]
    EndOfWindow,
    /// Worst target cost summed over every step of the window.
    Cumulative,
}

/// Depth-first enumeration of every observation sequence over the window.
struct WindowSearch<'t> {
    targets: &'t [LtiTarget],
    kernels: Vec<RiccatiKernel<'t>>,
    window: usize,
    score: WindowScore,
    // per depth: current covariances, and their observed / unobserved successors
    states: Vec<Vec<DMatrix<f64>>>,
    observed: Vec<Vec<DMatrix<f64>>>,
    unobserved: Vec<Vec<DMatrix<f64>>>,
    obs_cost: Vec<f64>,
    unobs_cost: Vec<f64>,
}

impl<'t> WindowSearch<'t> {
    fn new(targets: &'t [LtiTarget], window: usize, score: WindowScore) -> Self {
        let zeros = || {
            targets
                .iter()
                .map(|t| DMatrix::zeros(t.state_dim(), t.state_dim()))
                .collect::<Vec<_>>()
        };
        let n = targets.len();
        Self {
            targets,
            kernels: targets.iter().map(RiccatiKernel::new).collect(),
            window,
            score,
            states: (0..=window).map(|_| zeros()).collect(),
            observed: (0..window).map(|_| zeros()).collect(),
            unobserved: (0..window).map(|_| zeros()).collect(),
            obs_cost: vec![0.0; window * n],
            unobs_cost: vec![0.0; window * n],
        }
    }

    /// Worst cost after observing `j` at `depth`.
    fn child_max(&self, depth: usize, j: usize) -> f64 {
        let n = self.targets.len();
        (0..n)
            .map(|i| if i == j { self.obs_cost[depth * n + i] } else { self.unobs_cost[depth * n + i] })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Best `(score, first step)` below a depth-`start` state whose running
    /// score is `acc`.
    fn best_from(&mut self, start: usize, state: &[DMatrix<f64>], acc: f64) -> Result<(f64, usize)> {
        for (slot, p) in self.states[start].iter_mut().zip(state) {
            slot.copy_from(p);
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.dfs(start, usize::MAX, acc, &mut best)?;
        Ok(best)
    }

    fn dfs(&mut self, depth: usize, first: usize, acc: f64, best: &mut (f64, usize)) -> Result<()> {
        let n = self.targets.len();
        for i in 0..n {
            self.kernels[i].apply(&self.states[depth][i], 1.0, &mut self.observed[depth][i])?;
            self.kernels[i].apply(&self.states[depth][i], 0.0, &mut self.unobserved[depth][i])?;
            self.obs_cost[depth * n + i] = self.targets[i].cost(&self.observed[depth][i]);
            self.unobs_cost[depth * n + i] = self.targets[i].cost(&self.unobserved[depth][i]);
        }
        for j in 0..n {
            let worst = self.child_max(depth, j);
            let child_acc = match self.score {
                WindowScore::EndOfWindow => worst,
                WindowScore::Cumulative => acc + worst,
            };
            let lead = if first == usize::MAX { j } else { first };
            if depth + 1 == self.window {
                if child_acc < best.0 {
                    *best = (child_acc, lead);
                }
                continue;
            }
            // costs are nonnegative, so a cumulative score only grows
            if self.score == WindowScore::Cumulative && child_acc >= best.0 {
                continue;
            }
            for i in 0..n {
                let src = if i == j { &self.observed[depth][i] } else { &self.unobserved[depth][i] };
                self.states[depth + 1][i].copy_from(src);
            }
            self.dfs(depth + 1, lead, child_acc, best)?;
        }
        Ok(())
    }
}

/// Receding-horizon baseline: at each step enumerate all `N^window`
/// observation sequences, keep the one whose worst end-of-window cost is
/// lowest (earliest in index order on ties), and commit its first element.
/// The window always looks `window` steps ahead, even near the horizon.
pub fn sliding_window_schedule(
    targets: &[LtiTarget],
    window: usize,
    horizon: usize,
    p0: &[CovMatrix],
) -> Result<(ScheduleSequence, CostReport)> {
    sliding_window_schedule_with(targets, window, horizon, p0, WindowScore::EndOfWindow)
}

/// Sliding-window search with a selectable score.
pub fn sliding_window_schedule_with(
    targets: &[LtiTarget],
    window: usize,
    horizon: usize,
    p0: &[CovMatrix],
    score: WindowScore,
) -> Result<(ScheduleSequence, CostReport)> {
    check_inputs(targets, p0)?;
    if window == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("window and horizon must be positive".into()));
    }
    let n = targets.len();
    let leaves = (n as u64).checked_pow(window as u32).filter(|l| *l <= MAX_WINDOW_LEAVES);
    if leaves.is_none() {
        return Err(Error::InvalidArgument(format!(
            "window {window} over {n} targets exceeds {MAX_WINDOW_LEAVES} sequences per step; use a smaller window"
        )));
    }

    // Split the tree at a shallow prefix depth and search subtrees in parallel.
    let split = (0..window).find(|d| n.pow(*d as u32) >= 64).unwrap_or(window - 1).min(window - 1);
    let prefixes: Vec<Vec<usize>> = (0..n.pow(split as u32))
        .map(|mut code| {
            let mut p = vec![0; split];
            for slot in p.iter_mut().rev() {
                *slot = code % n;
                code /= n;
            }
            p
        })
        .collect();

    let mut kernels: Vec<RiccatiKernel> = targets.iter().map(RiccatiKernel::new).collect();
    let mut current: Vec<DMatrix<f64>> = p0.iter().map(|p| p.matrix().clone()).collect();
    let mut scratch = current.clone();
    let mut steps = Vec::with_capacity(horizon);

    for _ in 0..horizon {
        let results = prefixes
            .par_iter()
            .map_init(
                || WindowSearch::new(targets, window, score),
                |search, prefix| -> Result<(f64, usize)> {
                    let mut state = current.clone();
                    let mut next = current.clone();
                    let mut acc = 0.0;
                    for &j in prefix {
                        for i in 0..n {
                            search.kernels[i].apply(&state[i], if i == j { 1.0 } else { 0.0 }, &mut next[i])?;
                        }
                        std::mem::swap(&mut state, &mut next);
                        acc += targets.iter().zip(&state).map(|(t, p)| t.cost(p)).fold(f64::NEG_INFINITY, f64::max);
                    }
                    let (s, child) = search.best_from(split, &state, acc)?;
                    Ok((s, prefix.first().copied().unwrap_or(child)))
                },
            )
            .collect::<Result<Vec<_>>>()?;
        let mut best = (f64::INFINITY, 0);
        for r in results {
            if r.0 < best.0 {
                best = r;
            }
        }
        if !best.0.is_finite() {
            return Err(Error::Numeric("window search produced no finite score".into()));
        }
        let choice = best.1;
        for i in 0..n {
            kernels[i].apply(&current[i], if i == choice { 1.0 } else { 0.0 }, &mut scratch[i])?;
        }
        std::mem::swap(&mut current, &mut scratch);
        steps.push(choice);
    }
    let seq = ScheduleSequence::new(steps, n)?;
    let report = evaluate_schedule(targets, &seq, p0)?;
    Ok((seq, report))
}

/// Writes `step, target_0_trace, ...` rows with shortest round-trip floats.
pub fn write_trace_csv<W: Write>(out: W, series: &[Vec<f64>]) -> Result<()> {
    let n = series.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend((0..n).map(|i| format!("target_{i}_trace")));
    w.write_record(&header)?;
    for (k, row) in series.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// A noisy realisation of every target tracked by its own filter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingRun {
    /// `true_states[i][k]`, `estimates[i][k]`: state and prior estimate at step `k`.
    pub true_states: Vec<Vec<DVector<f64>>>,
    pub estimates: Vec<Vec<DVector<f64>>>,
    pub schedule: ScheduleSequence,
}

fn gaussian(sqrt_cov: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let z = DVector::from_fn(sqrt_cov.ncols(), |_, _| StandardNormal.sample(rng));
    sqrt_cov * z
}

/// Simulates process and measurement noise and runs the filters along `seq`.
/// Each target draws from its own stream of `seed`.
pub fn simulate_tracking(
    targets: &[LtiTarget],
    seq: &ScheduleSequence,
    p0: &[CovMatrix],
    seed: u64,
) -> Result<TrackingRun> {
    check_inputs(targets, p0)?;
    check_sequence(targets, seq)?;
    let mut true_states = Vec::with_capacity(targets.len());
    let mut estimates = Vec::with_capacity(targets.len());
    for (i, target) in targets.iter().enumerate() {
        let mut rng = run_rng(seed, i as u64);
        let sq = psd_sqrt(target.q());
        let sr = psd_sqrt(target.r());
        let mut x = gaussian(&psd_sqrt(p0[i].matrix()), &mut rng);
        let mut state = FilterState::zero(p0[i].clone());
        let mut xs = Vec::with_capacity(seq.len());
        let mut es = Vec::with_capacity(seq.len());
        for &s in seq.steps() {
            xs.push(x.clone());
            es.push(state.x_hat.clone());
            let y = (s == i).then(|| target.c() * &x + gaussian(&sr, &mut rng));
            state = kalman_step(target, &state, y.as_ref())?;
            x = target.a() * &x + gaussian(&sq, &mut rng);
        }
        true_states.push(xs);
        estimates.push(es);
    }
    Ok(TrackingRun { true_states, estimates, schedule: seq.clone() })
}

/// State component reported for a target: the most heavily weighted one in
/// its cost, or the first.
pub fn reported_component(target: &LtiTarget) -> usize {
    target.cost_weights().map_or(0, |w| w.iamax())
}

/// Writes `step, observed, target_i_true, target_i_estimate, ...` rows.
pub fn write_tracking_csv<W: Write>(out: W, targets: &[LtiTarget], run: &TrackingRun) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "observed".to_string()];
    for i in 0..targets.len() {
        header.push(format!("target_{i}_true"));
        header.push(format!("target_{i}_estimate"));
    }
    w.write_record(&header)?;
    for (k, &s) in run.schedule.steps().iter().enumerate() {
        let mut rec = vec![k.to_string(), s.to_string()];
        for (i, t) in targets.iter().enumerate() {
            let c = reported_component(t);
            rec.push(run.true_states[i][k][c].to_string());
            rec.push(run.estimates[i][k][c].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mare::{g_q, solve_mare};
    use crate::model::{example_a, example_b};
    use crate::schedule::build_min_consecutive_schedule;

    fn scalar(a: f64, q: f64, r: f64) -> LtiTarget {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        LtiTarget::new("s", m(a), m(1.0), m(q), m(r)).unwrap()
    }

    fn cov(m: &DMatrix<f64>) -> CovMatrix {
        CovMatrix::new(m.clone()).unwrap()
    }

    // textbook formulas, no shared code with the kernel
    fn naive_step(t: &LtiTarget, p: &DMatrix<f64>, observed: bool) -> DMatrix<f64> {
        let (a, c) = (t.a(), t.c());
        let mut next = a * p * a.transpose() + t.q();
        if observed {
            let s = c * p * c.transpose() + t.r();
            next -= a * p * c.transpose() * s.try_inverse().unwrap() * c * p * a.transpose();
        }
        next
    }

    #[test]
    fn step_matches_mare_map() {
        for t in example_a() {
            let p = cov(&(DMatrix::identity(2, 2) * 3.0));
            for b in [false, true] {
                let step = covariance_step(&t, &p, b).unwrap();
                let g = g_q(&t, if b { 1.0 } else { 0.0 }, &p).unwrap();
                assert!((step.matrix() - g.matrix()).amax() <= 1e-12);
            }
            let open = covariance_step(&t, &p, false).unwrap();
            let expected = t.a() * p.matrix() * t.a().transpose() + t.q();
            assert!((open.matrix() - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn observed_fixed_point_is_stationary() {
        for t in example_a() {
            let x1 = solve_mare(&t, 1.0, 1e-12, 100_000).unwrap();
            let x1 = x1.fixed_point().unwrap();
            let step = covariance_step(&t, x1, true).unwrap();
            assert!((step.matrix() - x1.matrix()).amax() < 1e-9);
        }
    }

    #[test]
    fn repeated_observation_converges_from_q() {
        for t in example_a() {
            let mut p = cov(t.q());
            for _ in 0..500 {
                p = covariance_step(&t, &p, true).unwrap();
            }
            let x1 = solve_mare(&t, 1.0, 1e-12, 100_000).unwrap();
            assert!((p.matrix() - x1.fixed_point().unwrap().matrix()).amax() < 1e-8);
        }
    }

    #[test]
    fn kalman_without_measurement_predicts() {
        let t = &example_a()[0];
        let state = FilterState::zero(cov(&DMatrix::identity(2, 2)));
        let next = kalman_step(t, &state, None).unwrap();
        assert_eq!(next.x_hat, DVector::zeros(2));
        let expected = t.a() * t.a().transpose() + t.q();
        assert!((next.p.matrix() - expected).amax() < 1e-12);
    }

    #[test]
    fn kalman_posterior_follows_precise_measurement() {
        let t = scalar(1.0, 1e-6, 1e-4);
        let state = FilterState::zero(cov(&DMatrix::from_element(1, 1, 10.0)));
        let y = DVector::from_element(1, 2.5);
        let (x_post, p_post) = measurement_update(&t, &state, Some(&y)).unwrap();
        assert!((x_post[0] - 2.5).abs() <= 3.0 * 1e-4f64.sqrt());
        // scalar algebra: P+ = P R / (P + R)
        assert!((p_post.matrix()[(0, 0)] - 10.0 * 1e-4 / (10.0 + 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn kalman_covariance_equals_step() {
        let t = &example_a()[1];
        let state = FilterState::new(DVector::from_vec(vec![1.0, -1.0]), cov(&DMatrix::identity(2, 2))).unwrap();
        let y = DVector::from_element(1, 0.3);
        let next = kalman_step(t, &state, Some(&y)).unwrap();
        assert_eq!(next.p, covariance_step(t, &state.p, true).unwrap());
        assert!(kalman_step(t, &state, Some(&DVector::zeros(2))).is_err());
    }

    #[test]
    fn estimate_is_held_between_observations() {
        let ts = example_b();
        let seq = ScheduleSequence::new(vec![1; 20], 3).unwrap();
        let run = simulate_tracking(&ts, &seq, &default_initial_covariances(&ts), 7).unwrap();
        let c = reported_component(&ts[0]);
        assert_eq!(c, ts[0].state_dim() - 1);
        // random walk with a = 1: the prediction of an unobserved vehicle stays put
        assert!(run.estimates[0].iter().all(|e| e[c] == 0.0));
    }

    #[test]
    fn all_observed_single_target_reaches_fixed_point() {
        let t = example_a().remove(0);
        let seq = ScheduleSequence::new(vec![0; 2000], 1).unwrap();
        let report = evaluate_schedule(std::slice::from_ref(&t), &seq, &default_initial_covariances(std::slice::from_ref(&t))).unwrap();
        let x1 = solve_mare(&t, 1.0, 1e-12, 100_000).unwrap();
        assert!((report.max_over_targets - x1.fixed_point().unwrap().trace()).abs() < 1e-6);
    }

    #[test]
    fn symmetric_targets_share_cost() {
        let t = scalar(1.1, 1.0, 1.0);
        let ts = vec![t.clone(), t];
        let seq = ScheduleSequence::new((0..1000).map(|k| k % 2).collect(), 2).unwrap();
        let r = evaluate_schedule(&ts, &seq, &default_initial_covariances(&ts)).unwrap();
        let (a, b) = (r.per_target_avg_trace[0], r.per_target_avg_trace[1]);
        assert!((a - b).abs() / a < 1e-2);
        assert_eq!(r.max_over_targets, a.max(b));
    }

    #[test]
    fn rotation_changes_cost_by_little() {
        let ts = example_a();
        let q = ScheduleDistribution::new(vec![0.674, 0.326]).unwrap();
        let base = build_min_consecutive_schedule(&q, 500).unwrap();
        let p0 = default_initial_covariances(&ts);
        let seq = base.repeated(8);
        let mut rotated = seq.steps().to_vec();
        rotated.rotate_left(137);
        let rotated = ScheduleSequence::new(rotated, 2).unwrap();
        let a = evaluate_schedule(&ts, &seq, &p0).unwrap();
        let b = evaluate_schedule(&ts, &rotated, &p0).unwrap();
        assert!((a.max_over_targets - b.max_over_targets).abs() < 100.0 / seq.len() as f64);
    }

    #[test]
    fn never_observed_stable_target_reaches_lyapunov_trace() {
        let ts = vec![scalar(0.5, 1.0, 1.0), scalar(0.8, 1.0, 1.0)];
        let q = ScheduleDistribution::new(vec![1.0, 0.0]).unwrap();
        let mc = monte_carlo_expected_cost(&ts, &q, 400, 4, 1, &default_initial_covariances(&ts)).unwrap();
        // x = 0.64 x + 1
        assert!((mc.cost.per_target_avg_trace[1] - 1.0 / 0.36).abs() < 1e-9);
    }

    #[test]
    fn monte_carlo_is_reproducible_and_bounded() {
        let ts = example_a();
        let q = ScheduleDistribution::new(vec![0.674, 0.326]).unwrap();
        let p0 = default_initial_covariances(&ts);
        let a = monte_carlo_expected_cost(&ts, &q, 300, 200, 9, &p0).unwrap();
        let b = monte_carlo_expected_cost(&ts, &q, 300, 200, 9, &p0).unwrap();
        assert_eq!(a, b);
        for (i, t) in ts.iter().enumerate() {
            let x = solve_mare(t, q[i], 1e-10, 100_000).unwrap();
            let bound = x.fixed_point().unwrap().trace();
            assert!(a.per_target[i].mean <= bound + 3.0 * a.per_target[i].half_width);
        }
    }

    #[test]
    fn window_guard() {
        let ts = example_a();
        let err = sliding_window_schedule(&ts, 21, 5, &default_initial_covariances(&ts)).unwrap_err();
        assert!(err.to_string().contains("smaller window"));
    }

    #[test]
    fn greedy_window() {
        let ts = example_a();
        let p0 = default_initial_covariances(&ts);
        let (seq, _) = sliding_window_schedule(&ts, 1, 30, &p0).unwrap();
        let mut p: Vec<DMatrix<f64>> = p0.iter().map(|c| c.matrix().clone()).collect();
        for &s in seq.steps() {
            let score = |j: usize| {
                (0..2)
                    .map(|i| naive_step(&ts[i], &p[i], i == j).trace())
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let expect = if score(1) < score(0) { 1 } else { 0 };
            assert_eq!(s, expect);
            p = (0..2).map(|i| naive_step(&ts[i], &p[i], i == s)).collect();
        }
    }

    // every lookahead of length `window` encoded as a bit mask, first step in
    // the most significant bit, scored with textbook recursions
    fn brute_force_rolling(ts: &[LtiTarget], window: usize, horizon: usize, score: WindowScore) -> Vec<usize> {
        let worst = |x: &[DMatrix<f64>]| x.iter().map(|m| m.trace()).fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<DMatrix<f64>> = ts.iter().map(|t| t.q().clone()).collect();
        let mut out = Vec::new();
        for _ in 0..horizon {
            let mut best = (f64::INFINITY, 0);
            for mask in 0..(1usize << window) {
                let plan: Vec<usize> = (0..window).map(|d| (mask >> (window - 1 - d)) & 1).collect();
                let mut x = p.clone();
                let mut total = 0.0;
                for &j in &plan {
                    x = (0..2).map(|i| naive_step(&ts[i], &x[i], i == j)).collect();
                    total += worst(&x);
                }
                let value = match score {
                    WindowScore::EndOfWindow => worst(&x),
                    WindowScore::Cumulative => total,
                };
                if value < best.0 - 1e-9 * value.abs() {
                    best = (value, plan[0]);
                }
            }
            p = (0..2).map(|i| naive_step(&ts[i], &p[i], i == best.1)).collect();
            out.push(best.1);
        }
        out
    }

    #[test]
    fn window_two_matches_brute_force() {
        let ts = example_a();
        let (seq, report) = sliding_window_schedule(&ts, 2, 6, &default_initial_covariances(&ts)).unwrap();
        assert_eq!(seq.steps(), brute_force_rolling(&ts, 2, 6, WindowScore::EndOfWindow).as_slice());
        assert!(report.max_over_targets.is_finite());
    }

    #[test]
    fn deeper_window_matches_brute_force() {
        let ts = example_a();
        let (seq, _) = sliding_window_schedule(&ts, 8, 12, &default_initial_covariances(&ts)).unwrap();
        assert_eq!(seq.steps(), brute_force_rolling(&ts, 8, 12, WindowScore::EndOfWindow).as_slice());
    }

    #[test]
    fn cumulative_score_matches_brute_force() {
        let ts = example_a();
        let p0 = default_initial_covariances(&ts);
        for window in [1, 2, 7] {
            let (seq, _) = sliding_window_schedule_with(&ts, window, 10, &p0, WindowScore::Cumulative).unwrap();
            assert_eq!(seq.steps(), brute_force_rolling(&ts, window, 10, WindowScore::Cumulative).as_slice());
        }
    }

    #[test]
    fn end_of_window_score_defers_observations() {
        // the second target is always planned for the last step of the window
        // and so never observed; the cumulative score avoids this
        let ts = example_a();
        let p0 = default_initial_covariances(&ts);
        let (end, _) = sliding_window_schedule(&ts, 4, 200, &p0).unwrap();
        assert_eq!(end.counts()[1], 0);
        let (cum, _) = sliding_window_schedule_with(&ts, 4, 200, &p0, WindowScore::Cumulative).unwrap();
        assert!(cum.counts()[1] > 40);
    }

    #[test]
    fn trace_csv_layout() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[vec![1.5, 2.0], vec![0.1, 3.25]]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,target_0_trace,target_1_trace\n0,1.5,2\n1,0.1,3.25\n");
    }
}
