//! The modified algebraic Riccati equation
//!
//! `X = A X A' + Q - q A X C' (C X C' + R)^-1 C X A'`
//!
//! whose fixed point bounds the expected steady-state prediction covariance
//! when a target is observed independently with probability `q` per step.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::CovMatrix;
use crate::model::{DelayChainSpec, LtiTarget};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 100_000;
/// Trace above which the iteration is declared divergent.
pub const DIVERGENCE_TRACE_CAP: f64 = 1e12;
/// Width of `q - q_c` below which a result carries a near-critical warning.
pub const NEAR_CRITICAL_BAND: f64 = 1e-3;

const GROWTH_RATIO: f64 = 1.0 + 1e-6;
const GROWTH_WINDOW: usize = 50;
const GROWTH_WARMUP: usize = 200;

/// In-place evaluation of the Riccati map with preallocated work buffers.
///
/// `apply(x, w, out)` writes `A X A' + Q - w A X C' (C X C' + R)^-1 C X A'`
/// into `out`, symmetrised. Used for both the MARE (`w = q`) and the
/// per-step covariance recursion (`w` in `{0, 1}`).
#[derive(Debug, Clone)]
pub struct RiccatiKernel<'t> {
    target: &'t LtiTarget,
    a_t: DMatrix<f64>,
    c_t: DMatrix<f64>,
    ax: DMatrix<f64>,
    axat: DMatrix<f64>,
    axct: DMatrix<f64>,
    cx: DMatrix<f64>,
    s: DMatrix<f64>,
}

impl<'t> RiccatiKernel<'t> {
    pub fn new(target: &'t LtiTarget) -> Self {
        let n = target.state_dim();
        let p = target.output_dim();
        Self {
            target,
            a_t: target.a().transpose(),
            c_t: target.c().transpose(),
            ax: DMatrix::zeros(n, n),
            axat: DMatrix::zeros(n, n),
            axct: DMatrix::zeros(n, p),
            cx: DMatrix::zeros(p, n),
            s: DMatrix::zeros(p, p),
        }
    }

    pub fn target(&self) -> &'t LtiTarget {
        self.target
    }

    pub fn apply(&mut self, x: &DMatrix<f64>, w: f64, out: &mut DMatrix<f64>) -> Result<()> {
        let t = self.target;
        t.a().mul_to(x, &mut self.ax);
        self.ax.mul_to(&self.a_t, &mut self.axat);
        out.copy_from(&self.axat);
        *out += t.q();
        if w != 0.0 {
            self.ax.mul_to(&self.c_t, &mut self.axct);
            t.c().mul_to(x, &mut self.cx);
            self.cx.mul_to(&self.c_t, &mut self.s);
            self.s += t.r();
            if self.s.nrows() == 1 {
                let s = self.s[(0, 0)];
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Numeric(format!("innovation variance {s} is not positive")));
                }
                let col = self.axct.column(0);
                out.ger(-w / s, &col, &col, 1.0);
            } else {
                let chol = self.s.clone().cholesky().ok_or_else(|| {
                    Error::Numeric("innovation covariance C X C' + R is singular".into())
                })?;
                let z = chol.solve(&self.axct.transpose());
                out.gemm(-w, &self.axct, &z, 1.0);
            }
        }
        symmetrize_in_place(out);
        Ok(())
    }
}

fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn check_probability(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("probability {q} is outside [0, 1]")));
    }
    Ok(())
}

fn check_square(target: &LtiTarget, x: &DMatrix<f64>) -> Result<()> {
    let n = target.state_dim();
    if x.shape() != (n, n) {
        return Err(Error::Dimension(format!("expected {n}x{n} matrix, got {:?}", x.shape())));
    }
    Ok(())
}

/// One application of the MARE operator.
pub fn g_q(target: &LtiTarget, q: f64, x: &CovMatrix) -> Result<CovMatrix> {
    check_probability(q)?;
    check_square(target, x.matrix())?;
    let mut out = DMatrix::zeros(target.state_dim(), target.state_dim());
    RiccatiKernel::new(target).apply(x.matrix(), q, &mut out)?;
    Ok(CovMatrix::from_symmetric(out))
}

#[derive(Debug, Clone, PartialEq)]
pub enum MareStatus {
    Converged(CovMatrix),
    Diverged,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MareWarning {
    /// `q` lies within [`NEAR_CRITICAL_BAND`] of the cached critical probability.
    NearCritical { q: f64, q_critical: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MareResult {
    pub status: MareStatus,
    pub iterations: usize,
    /// Frobenius norm of the last step `g_q(X) - X`.
    pub residual: f64,
    pub warning: Option<MareWarning>,
}

impl MareResult {
    pub fn fixed_point(&self) -> Option<&CovMatrix> {
        match &self.status {
            MareStatus::Converged(x) => Some(x),
            _ => None,
        }
    }

    pub fn is_converged(&self) -> bool {
        matches!(self.status, MareStatus::Converged(_))
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self.status, MareStatus::Diverged)
    }
}

/// Fixed-point iteration from `X0 = Q`.
pub fn solve_mare(target: &LtiTarget, q: f64, tol: f64, max_iter: usize) -> Result<MareResult> {
    solve_mare_from(target, q, target.q(), tol, max_iter)
}

/// Fixed-point iteration `X <- g_q(X)` from an arbitrary PSD start.
///
/// Stops when `||X_{k+1} - X_k||_F <= tol (1 + ||X_k||_F)`. The iteration is
/// declared divergent when the trace exceeds [`DIVERGENCE_TRACE_CAP`], or when
/// after a warm-up the trace has grown by more than a factor `1 + 1e-6` on
/// every one of the last 50 steps while the per-step increment has not
/// shrunk over that window.
pub fn solve_mare_from(
    target: &LtiTarget,
    q: f64,
    x0: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<MareResult> {
    check_probability(q)?;
    check_square(target, x0)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let warning = target.cached_critical_probability().and_then(|qc| {
        (q > qc && q - qc < NEAR_CRITICAL_BAND).then_some(MareWarning::NearCritical {
            q,
            q_critical: qc,
        })
    });

    let n = target.state_dim();
    let mut kernel = RiccatiKernel::new(target);
    let mut x = x0.clone();
    let mut next = DMatrix::zeros(n, n);
    let mut prev_trace = x.trace();
    let mut growth_run = 0usize;
    let mut increments: VecDeque<f64> = VecDeque::with_capacity(GROWTH_WINDOW + 1);
    let mut residual = f64::INFINITY;

    for it in 1..=max_iter {
        kernel.apply(&x, q, &mut next)?;
        let trace = next.trace();
        if !trace.is_finite() || trace > DIVERGENCE_TRACE_CAP {
            return Ok(MareResult { status: MareStatus::Diverged, iterations: it, residual, warning });
        }
        residual = frobenius_distance(&next, &x);
        if residual <= tol * (1.0 + x.norm()) {
            return Ok(MareResult {
                status: MareStatus::Converged(CovMatrix::from_symmetric(next)),
                iterations: it,
                residual,
                warning,
            });
        }

        let increment = trace - prev_trace;
        if prev_trace > 0.0 && trace > GROWTH_RATIO * prev_trace {
            growth_run += 1;
        } else {
            growth_run = 0;
        }
        increments.push_back(increment);
        if increments.len() > GROWTH_WINDOW + 1 {
            increments.pop_front();
        }
        if it > GROWTH_WARMUP
            && growth_run >= GROWTH_WINDOW
            && increments.len() == GROWTH_WINDOW + 1
            && increment >= increments[0]
        {
            return Ok(MareResult { status: MareStatus::Diverged, iterations: it, residual, warning });
        }

        prev_trace = trace;
        std::mem::swap(&mut x, &mut next);
    }
    Ok(MareResult { status: MareStatus::MaxIterations, iterations: max_iter, residual, warning })
}

fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClosedForm {
    FixedPoint(CovMatrix),
    Diverged,
}

/// Closed-form MARE fixed point of an expanded delay chain (noise `B Q B'`).
///
/// With `s = |a|`: diverges when `s >= sqrt(1/(1-q))` (including `a = ±1`
/// with `q = 0`); otherwise `X_ij = a^|i-j| x_min(i,j)` with the diagonal
/// `x_j = a^{2(j-1)} x_1 + Q (1 - a^{2(j-1)}) / (1 - a^2)`, which reduces to
/// `x_1 + (j-1) Q` at `a^2 = 1`.
pub fn closed_form_delay_chain(spec: &DelayChainSpec, q: f64) -> Result<ClosedForm> {
    spec.validate()?;
    check_probability(q)?;
    let (a, big_q, r) = (spec.a, spec.q, spec.r);
    let a2 = a * a;
    // a^2 (1 - q) >= 1 <=> |a| >= sqrt(1 / (1 - q))
    if a2 * (1.0 - q) >= 1.0 {
        return Ok(ClosedForm::Diverged);
    }
    let n = spec.state_dim();
    let unit_modulus = (a2 - 1.0).abs() < 1e-14;
    let x1 = if unit_modulus {
        (big_q + (big_q * big_q + 4.0 * q * big_q * r).sqrt()) / (2.0 * q)
    } else {
        let b = r * a2 - r + big_q;
        let denom = 2.0 * (1.0 + a2 * q - a2);
        (b + (b * b - 4.0 * (a2 - 1.0 - a2 * q) * big_q * r).sqrt()) / denom
    };
    let diag: Vec<f64> = (0..n)
        .map(|j| {
            if unit_modulus {
                x1 + j as f64 * big_q
            } else {
                let p = a2.powi(j as i32);
                p * x1 + (1.0 - p) / (1.0 - a2) * big_q
            }
        })
        .collect();
    let x = DMatrix::from_fn(n, n, |i, j| {
        let lo = i.min(j);
        a.powi(i.abs_diff(j) as i32) * diag[lo]
    });
    Ok(ClosedForm::FixedPoint(CovMatrix::from_symmetric(x)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalProbability {
    /// Smallest probability found with a convergent MARE (within `tol`), or
    /// exactly 0 for targets with spectral radius at most one.
    pub value: f64,
    /// No `q` in `(0, 1]` gave a convergent MARE.
    pub infeasible: bool,
    pub bisection_steps: usize,
}

/// Critical observation probability `q_c`: the MARE has a fixed point iff
/// `q > q_c`. Zero when `rho(A) <= 1`; otherwise bisected on `[0, 1]` with
/// MARE convergence as the predicate (non-convergence within the iteration
/// budget counts as divergence).
pub fn critical_probability(target: &LtiTarget, tol: f64) -> Result<CriticalProbability> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    if target.spectral_radius() <= 1.0 {
        return Ok(CriticalProbability { value: 0.0, infeasible: false, bisection_steps: 0 });
    }
    let converges = |q: f64| -> Result<bool> {
        Ok(solve_mare(target, q, DEFAULT_TOL, DEFAULT_MAX_ITER)?.is_converged())
    };
    if !converges(1.0)? {
        return Ok(CriticalProbability { value: 1.0, infeasible: true, bisection_steps: 0 });
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut steps = 0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if converges(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
        steps += 1;
    }
    Ok(CriticalProbability { value: hi, infeasible: false, bisection_steps: steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{example_a, expand_delay_chain};

    fn scalar(a: f64, q: f64, r: f64) -> LtiTarget {
        LtiTarget::new(
            "s",
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
        .unwrap()
    }

    // Independent transcription of the operator, written with full inverses.
    fn g_reference(t: &LtiTarget, q: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (a, c) = (t.a(), t.c());
        let s = c * x * c.transpose() + t.r();
        let m = a * x * a.transpose() + t.q()
            - a * x * c.transpose() * s.try_inverse().unwrap() * c * x * a.transpose() * q;
        (&m + m.transpose()) * 0.5
    }

    #[test]
    fn q_zero_is_lyapunov_step() {
        let t = &example_a()[0];
        let x = CovMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let out = g_q(t, 0.0, &x).unwrap();
        let expect = t.a() * x.matrix() * t.a().transpose() + t.q();
        assert!((out.matrix() - expect).norm() < 1e-12);
    }

    #[test]
    fn scalar_hand_value() {
        let t = scalar(1.0, 1.0, 1.0);
        let out = g_q(&t, 1.0, &CovMatrix::identity(1)).unwrap();
        assert!((out.matrix()[(0, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_formula() {
        let t = &example_a()[0];
        let x = CovMatrix::new(t.q().clone()).unwrap();
        let out = g_q(t, 0.674, &x).unwrap();
        let reference = g_reference(t, 0.674, x.matrix());
        for (u, v) in out.matrix().iter().zip(reference.iter()) {
            assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_out_of_range_probability() {
        let t = scalar(0.5, 1.0, 1.0);
        assert!(g_q(&t, 1.5, &CovMatrix::identity(1)).is_err());
        assert!(solve_mare(&t, -0.1, 1e-9, 10).is_err());
    }

    #[test]
    fn stable_scalar_open_loop_fixed_point() {
        let t = scalar(0.7, 1.0, 1.0);
        let res = solve_mare(&t, 0.0, 1e-12, DEFAULT_MAX_ITER).unwrap();
        let x = res.fixed_point().unwrap().matrix()[(0, 0)];
        assert!((x - 1.0 / (1.0 - 0.49)).abs() < 1e-9);
    }

    #[test]
    fn unstable_scalar_diverges() {
        let res = solve_mare(&scalar(2.0, 1.0, 1.0), 0.5, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(res.is_diverged());
    }

    #[test]
    fn random_walk_full_observation_golden_ratio() {
        let res = solve_mare(&scalar(1.0, 1.0, 1.0), 1.0, 1e-12, DEFAULT_MAX_ITER).unwrap();
        let x = res.fixed_point().unwrap().matrix()[(0, 0)];
        assert!((x - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-9);
        assert!(res.residual <= 1e-12 * (1.0 + x));
    }

    #[test]
    fn marginal_random_walk_never_observed_diverges() {
        let res = solve_mare(&scalar(1.0, 1.0, 1.0), 0.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(res.is_diverged());
        assert!(res.iterations < DEFAULT_MAX_ITER);
    }

    #[test]
    fn closed_form_examples() {
        let spec = DelayChainSpec::new(1.0, 1.0, 1.0, 0).unwrap();
        match closed_form_delay_chain(&spec, 1.0).unwrap() {
            ClosedForm::FixedPoint(x) => {
                assert!((x.matrix()[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-14)
            }
            ClosedForm::Diverged => panic!("should converge"),
        }

        let spec = DelayChainSpec::new(1.0, 1.0, 1.0, 1).unwrap();
        let x1 = 1.0 + 3f64.sqrt();
        match closed_form_delay_chain(&spec, 0.5).unwrap() {
            ClosedForm::FixedPoint(x) => {
                let expect = DMatrix::from_row_slice(2, 2, &[x1, x1, x1, x1 + 1.0]);
                assert!((x.matrix() - &expect).norm() < 1e-12);
                let iter = solve_mare(&expand_delay_chain("v", &spec).unwrap(), 0.5, 1e-13, 1_000_000)
                    .unwrap();
                assert!((iter.fixed_point().unwrap().matrix() - &expect).norm() < 1e-8);
            }
            ClosedForm::Diverged => panic!("should converge"),
        }

        let spec = DelayChainSpec::new(1.5, 1.0, 1.0, 0).unwrap();
        assert_eq!(closed_form_delay_chain(&spec, 0.5).unwrap(), ClosedForm::Diverged);
        let spec = DelayChainSpec::new(1.0, 1.0, 1.0, 3).unwrap();
        assert_eq!(closed_form_delay_chain(&spec, 0.0).unwrap(), ClosedForm::Diverged);
    }

    #[test]
    fn closed_form_zero_coefficient_is_diagonal() {
        let spec = DelayChainSpec::new(0.0, 2.0, 1.0, 2).unwrap();
        let ClosedForm::FixedPoint(x) = closed_form_delay_chain(&spec, 0.3).unwrap() else {
            panic!("should converge")
        };
        assert!((x.matrix() - DMatrix::identity(3, 3) * 2.0).norm() < 1e-12);
    }

    #[test]
    fn critical_probability_cases() {
        let cp = critical_probability(&example_a()[0], 1e-6).unwrap();
        assert_eq!(cp.value, 0.0);
        let cp = critical_probability(&scalar(0.5, 1.0, 1.0), 1e-6).unwrap();
        assert_eq!(cp.value, 0.0);
        let cp = critical_probability(&scalar(2.0, 1.0, 1.0), 1e-4).unwrap();
        assert!(!cp.infeasible);
        assert!((cp.value - 0.75).abs() <= 1e-4, "{}", cp.value);
    }

    #[test]
    fn near_critical_warning_uses_cached_value() {
        let t = scalar(2.0, 1.0, 1.0);
        let qc = t.critical_probability();
        let res = solve_mare(&t, qc + 1e-4, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(matches!(res.warning, Some(MareWarning::NearCritical { .. })));
        let res = solve_mare(&t, 0.9, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(res.warning.is_none());
    }

    #[test]
    fn initial_condition_independence() {
        let t = &example_a()[1];
        let tol = 1e-10;
        let from_q = solve_mare(t, 0.5, tol, DEFAULT_MAX_ITER).unwrap();
        let from_big =
            solve_mare_from(t, 0.5, &(DMatrix::identity(2, 2) * 1e4), tol, DEFAULT_MAX_ITER).unwrap();
        let a = from_q.fixed_point().unwrap().matrix();
        let b = from_big.fixed_point().unwrap().matrix();
        assert!((a - b).norm() <= 10.0 * tol * (1.0 + a.norm()), "{}", (a - b).norm());
    }
}
