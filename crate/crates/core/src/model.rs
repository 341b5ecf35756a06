//! Target dynamics, structural checks and the delay-chain expansion.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, RANK_TOL};

/// Tolerance used for the lazily cached critical probability.
pub const CRITICAL_CACHE_TOL: f64 = 1e-7;
/// Tolerance on `sum(q) == 1` for a schedule distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

/// One linear time-invariant target `x[k+1] = A x[k] + w`, `y = C x + v`.
///
/// The scheduling cost of a covariance `X` is `Tr(X)`, or `sum_j w_j X_jj`
/// when diagonal cost weights are attached (delay chains weight only the
/// undelayed state).
#[derive(Debug, Clone)]
pub struct LtiTarget {
    label: String,
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    cost_weights: Option<DVector<f64>>,
    critical: OnceLock<f64>,
}

impl LtiTarget {
    pub fn new(
        label: impl Into<String>,
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        check_dimensions(&a, &c, &q, &r)?;
        for (name, m) in [("A", &a), ("C", &c), ("Q", &q), ("R", &r)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self {
            label: label.into(),
            a,
            c,
            q,
            r,
            cost_weights: None,
            critical: OnceLock::new(),
        })
    }

    /// Replaces the trace cost by a nonnegative diagonal weighting.
    pub fn with_cost_weights(mut self, weights: DVector<f64>) -> Result<Self> {
        if weights.len() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "cost weights have length {}, state dimension is {}",
                weights.len(),
                self.state_dim()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().all(|w| *w == 0.0)
        {
            return Err(Error::InvalidArgument(
                "cost weights must be nonnegative and not all zero".into(),
            ));
        }
        self.cost_weights = Some(weights);
        Ok(self)
    }

    /// Restores the plain trace cost.
    pub fn with_trace_cost(mut self) -> Self {
        self.cost_weights = None;
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn cost_weights(&self) -> Option<&DVector<f64>> {
        self.cost_weights.as_ref()
    }
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Scalar cost of a covariance under this target's weighting.
    pub fn cost(&self, x: &DMatrix<f64>) -> f64 {
        match &self.cost_weights {
            None => x.trace(),
            Some(w) => w.iter().enumerate().map(|(j, wj)| wj * x[(j, j)]).sum(),
        }
    }

    pub fn spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&self.a)
    }

    pub fn is_invertible(&self) -> bool {
        linalg::complex_rank(&linalg::to_complex(&self.a), RANK_TOL) == self.state_dim()
    }

    /// Critical observation probability, estimated once and cached.
    pub fn critical_probability(&self) -> f64 {
        *self.critical.get_or_init(|| {
            crate::mare::critical_probability(self, CRITICAL_CACHE_TOL)
                .map(|c| c.value)
                .unwrap_or(1.0)
        })
    }

    /// The cached critical probability, if it has already been computed.
    pub fn cached_critical_probability(&self) -> Option<f64> {
        self.critical.get().copied()
    }
}

fn check_dimensions(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<()> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::Dimension(format!(
            "A must be square and nonempty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let p = c.nrows();
    if p == 0 || c.ncols() != n {
        return Err(Error::Dimension(format!("C must be p x {n}, got {}x{}", p, c.ncols())));
    }
    if q.shape() != (n, n) {
        return Err(Error::Dimension(format!("Q must be {n}x{n}, got {:?}", q.shape())));
    }
    if r.shape() != (p, p) {
        return Err(Error::Dimension(format!("R must be {p}x{p}, got {:?}", r.shape())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    QNotSymmetric,
    /// Q has a negative eigenvalue.
    QIndefinite { min_eigenvalue: f64 },
    /// Q is singular and does not excite every mode.
    QNotPositiveDefinite { min_eigenvalue: f64 },
    /// Q is singular but `(A, Q^1/2)` is controllable; accepted.
    QSemidefiniteOnly { min_eigenvalue: f64 },
    RNotSymmetric,
    RNotPositiveDefinite { min_eigenvalue: f64 },
    /// `(A, Q^1/2)` fails the PBH rank test at this eigenvalue.
    NotControllable { eigenvalue: Complex64 },
    /// `(A, C)` has an unobservable mode with `|lambda| >= 1`.
    NotDetectable { eigenvalue: Complex64 },
}

impl ValidationIssue {
    pub fn severity(&self) -> Severity {
        match self {
            Self::QSemidefiniteOnly { .. } | Self::NotDetectable { .. } => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::QNotSymmetric => write!(f, "Q is not symmetric"),
            Self::QIndefinite { min_eigenvalue } => {
                write!(f, "Q is indefinite (min eigenvalue {min_eigenvalue:e})")
            }
            Self::QNotPositiveDefinite { min_eigenvalue } => {
                write!(f, "Q is not positive definite (min eigenvalue {min_eigenvalue:e})")
            }
            Self::QSemidefiniteOnly { min_eigenvalue } => write!(
                f,
                "Q is only positive semidefinite (min eigenvalue {min_eigenvalue:e}) but (A, Q^1/2) is controllable"
            ),
            Self::RNotSymmetric => write!(f, "R is not symmetric"),
            Self::RNotPositiveDefinite { min_eigenvalue } => {
                write!(f, "R is not positive definite (min eigenvalue {min_eigenvalue:e})")
            }
            Self::NotControllable { eigenvalue } => {
                write!(f, "(A, Q^1/2) is not controllable at eigenvalue {eigenvalue}")
            }
            Self::NotDetectable { eigenvalue } => {
                write!(f, "(A, C) is not detectable at eigenvalue {eigenvalue}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
    pub controllable: bool,
    pub detectable: bool,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.iter().all(|i| i.severity() == Severity::Warning)
    }

    pub fn errors(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity() == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity() == Severity::Warning)
    }
}

/// Checks noise covariances and the structural assumptions (controllability
/// of `(A, Q^1/2)`, detectability of `(A, C)`) with PBH rank tests.
///
/// Problems are collected rather than returned as errors; only a dimension
/// mismatch aborts.
pub fn validate_target(target: &LtiTarget) -> Result<ValidationReport> {
    check_dimensions(target.a(), target.c(), target.q(), target.r())?;
    let mut issues = Vec::new();
    let n = target.state_dim();
    let a = target.a();

    let eigs = linalg::eigenvalues(a);
    let q_root = linalg::psd_sqrt(target.q());
    let controllable = eigs.iter().all(|&lambda| pbh_controllable(a, &q_root, lambda, n));

    if !linalg::is_symmetric(target.q(), linalg::SYMMETRY_TOL) {
        issues.push(ValidationIssue::QNotSymmetric);
    }
    let q_min = linalg::min_eigenvalue(target.q());
    let q_max = linalg::max_eigenvalue(target.q()).abs().max(f64::MIN_POSITIVE);
    if q_min < -linalg::PSD_TOL * q_max {
        issues.push(ValidationIssue::QIndefinite { min_eigenvalue: q_min });
    } else if q_min <= RANK_TOL * q_max {
        if controllable {
            issues.push(ValidationIssue::QSemidefiniteOnly { min_eigenvalue: q_min });
        } else {
            issues.push(ValidationIssue::QNotPositiveDefinite { min_eigenvalue: q_min });
        }
    }

    if !linalg::is_symmetric(target.r(), linalg::SYMMETRY_TOL) {
        issues.push(ValidationIssue::RNotSymmetric);
    }
    let r_min = linalg::min_eigenvalue(target.r());
    if r_min <= 0.0 {
        issues.push(ValidationIssue::RNotPositiveDefinite { min_eigenvalue: r_min });
    }

    for &lambda in &eigs {
        if !pbh_controllable(a, &q_root, lambda, n) {
            issues.push(ValidationIssue::NotControllable { eigenvalue: lambda });
        }
    }

    let mut detectable = true;
    for &lambda in &eigs {
        if lambda.norm() >= 1.0 - 1e-12 && !pbh_observable(a, target.c(), lambda, n) {
            detectable = false;
            issues.push(ValidationIssue::NotDetectable { eigenvalue: lambda });
        }
    }

    Ok(ValidationReport { issues, controllable, detectable })
}

fn shifted(a: &DMatrix<f64>, lambda: Complex64) -> DMatrix<Complex64> {
    let mut m = linalg::to_complex(a);
    for i in 0..a.nrows() {
        m[(i, i)] -= lambda;
    }
    m
}

// rank [A - lambda I, B] == n
fn pbh_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>, lambda: Complex64, n: usize) -> bool {
    let left = shifted(a, lambda);
    let mut m = DMatrix::<Complex64>::zeros(n, n + b.ncols());
    m.view_mut((0, 0), (n, n)).copy_from(&left);
    m.view_mut((0, n), (n, b.ncols())).copy_from(&linalg::to_complex(b));
    linalg::complex_rank(&m, RANK_TOL) == n
}

// rank [A - lambda I; C] == n
fn pbh_observable(a: &DMatrix<f64>, c: &DMatrix<f64>, lambda: Complex64, n: usize) -> bool {
    let top = shifted(a, lambda);
    let p = c.nrows();
    let mut m = DMatrix::<Complex64>::zeros(n + p, n);
    m.view_mut((0, 0), (n, n)).copy_from(&top);
    m.view_mut((n, 0), (p, n)).copy_from(&linalg::to_complex(c));
    linalg::complex_rank(&m, RANK_TOL) == n
}

/// Scalar target `x[k+1] = a x[k] + w` observed through a fixed delay of `d` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayChainSpec {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    pub d: usize,
}

impl DelayChainSpec {
    pub fn new(a: f64, q: f64, r: f64, d: usize) -> Result<Self> {
        let spec = Self { a, q, r, d };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() {
            return Err(Error::InvalidArgument("delay chain: a must be finite".into()));
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::InvalidArgument("delay chain: Q must be > 0".into()));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidArgument("delay chain: R must be > 0".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.d + 1
    }
}

/// Augments the delayed scalar system into a `(d+1)`-state companion form:
/// ones on the superdiagonal, `a` in the bottom-right corner, noise entering
/// the last state only and the measurement reading the first (oldest) state.
///
/// The returned target's cost is the error variance of the last state, which
/// is the only physical one; call [`LtiTarget::with_trace_cost`] for the full
/// trace.
pub fn expand_delay_chain(label: impl Into<String>, spec: &DelayChainSpec) -> Result<LtiTarget> {
    spec.validate()?;
    let n = spec.state_dim();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        a[(i, i + 1)] = 1.0;
    }
    a[(n - 1, n - 1)] = spec.a;
    let mut c = DMatrix::zeros(1, n);
    c[(0, 0)] = 1.0;
    let mut q = DMatrix::zeros(n, n);
    q[(n - 1, n - 1)] = spec.q;
    let r = DMatrix::from_element(1, 1, spec.r);
    let mut weights = DVector::zeros(n);
    weights[n - 1] = 1.0;
    LtiTarget::new(label, a, c, q, r)?.with_cost_weights(weights)
}

/// Probability vector `q` over targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDistribution(Vec<f64>);

impl ScheduleDistribution {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidArgument("distribution is empty".into()));
        }
        if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("q[{i}] = {v} is outside [0, 1]")));
        }
        let sum: f64 = q.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(q))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for ScheduleDistribution {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// The two targets of the paper-style Example A, used by tests and the CLI
/// examples.
pub fn example_a() -> Vec<LtiTarget> {
    let t1 = LtiTarget::new(
        "system-1",
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.49, 1.4]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2) * 5.0,
        DMatrix::from_element(1, 1, 0.5),
    )
    .expect("valid");
    let t2 = LtiTarget::new(
        "system-2",
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.72, 1.7]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2),
        DMatrix::from_element(1, 1, 1.0),
    )
    .expect("valid");
    vec![t1, t2]
}

/// Three random-walk vehicles with delays 1, 2, 2.
pub fn example_b() -> Vec<LtiTarget> {
    [(1.0, 1usize), (2.0, 2), (5.0, 2)]
        .iter()
        .enumerate()
        .map(|(i, &(q, d))| {
            let spec = DelayChainSpec::new(1.0, q, 1.0, d).expect("valid");
            expand_delay_chain(format!("vehicle-{}", i + 1), &spec).expect("valid")
        })
        .collect()
}
