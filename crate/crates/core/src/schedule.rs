//! Concrete observation schedules built from a probability distribution.
//!
//! Three constructions are provided: i.i.d. sampling, a deterministic periodic
//! sequence that keeps runs of the same target short, and an event-driven
//! simulation of backoff-timer channel access between the estimators.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, weighted::WeightedIndex};

use crate::error::{Error, Result};
use crate::model::ScheduleDistribution;

/// One observed target index per time step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScheduleSequence {
    steps: Vec<usize>,
    n_targets: usize,
}

impl ScheduleSequence {
    pub fn new(steps: Vec<usize>, n_targets: usize) -> Result<Self> {
        if let Some((k, &s)) = steps.iter().enumerate().find(|(_, s)| **s >= n_targets) {
            return Err(Error::InvalidArgument(format!(
                "step {k} observes target {s}, but there are only {n_targets} targets"
            )));
        }
        Ok(Self { steps, n_targets })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_targets];
        for &s in &self.steps {
            c[s] += 1;
        }
        c
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let len = self.len().max(1) as f64;
        self.counts().into_iter().map(|c| c as f64 / len).collect()
    }

    /// Periodic continuation: the sequence concatenated `times` times.
    pub fn repeated(&self, times: usize) -> Self {
        Self { steps: self.steps.repeat(times), n_targets: self.n_targets }
    }

    /// Periodic continuation truncated to exactly `len` steps.
    pub fn cycled_to(&self, len: usize) -> Self {
        let steps = self.steps.iter().copied().cycle().take(if self.is_empty() { 0 } else { len });
        Self { steps: steps.collect(), n_targets: self.n_targets }
    }

    pub fn max_run_length(&self) -> usize {
        max_run_length(self)
    }

    /// Text form: a `# L=<len> N=<targets>` header, then one index per line.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.len() * 2 + 24);
        let _ = writeln!(s, "# L={} N={}", self.len(), self.n_targets);
        for step in &self.steps {
            let _ = writeln!(s, "{step}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty schedule file".into()))?;
        let (len, n) = parse_header(header)?;
        let steps = lines
            .map(|l| {
                l.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad schedule entry {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if steps.len() != len {
            return Err(Error::Config(format!(
                "schedule header says L={len} but {} entries follow",
                steps.len()
            )));
        }
        Self::new(steps, n).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("bad schedule header {line:?}, expected `# L=<len> N=<targets>`"));
    let rest = line.strip_prefix('#').ok_or_else(bad)?;
    let (mut len, mut n) = (None, None);
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("L", v)) => len = Some(v.parse().map_err(|_| bad())?),
            Some(("N", v)) => n = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    Ok((len.ok_or_else(bad)?, n.ok_or_else(bad)?))
}

/// Length of the longest block of consecutive equal entries (0 when empty).
pub fn max_run_length(seq: &ScheduleSequence) -> usize {
    longest_run(seq.steps())
}

pub(crate) fn longest_run(steps: &[usize]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for (k, s) in steps.iter().enumerate() {
        run = if k > 0 && steps[k - 1] == *s { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}

/// `L` i.i.d. draws from `q` with a seeded ChaCha generator.
pub fn sample_stochastic_schedule(q: &ScheduleDistribution, len: usize, seed: u64) -> ScheduleSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(q, len, &mut rng)
}

pub(crate) fn sample_with<R: Rng + ?Sized>(q: &ScheduleDistribution, len: usize, rng: &mut R) -> ScheduleSequence {
    let n = q.len();
    let steps = if n == 1 {
        vec![0; len]
    } else {
        // a validated distribution always has a positive total weight
        let dist = WeightedIndex::new(q.probabilities()).expect("valid distribution");
        (0..len).map(|_| dist.sample(rng)).collect()
    };
    ScheduleSequence { steps, n_targets: n }
}

/// Occurrence counts for a length-`L` periodic schedule: `floor(q_i L)` plus
/// the leftover slots given to the largest fractional parts.
pub fn apportion_counts(q: &ScheduleDistribution, len: usize) -> Result<Vec<usize>> {
    let scaled: Vec<f64> = q.probabilities().iter().map(|p| p * len as f64).collect();
    // absorb rounding such as 0.29 * 100 = 28.999999999999996
    let floors: Vec<usize> = scaled.iter().map(|v| (v + 1e-9).floor() as usize).collect();
    if let Some(i) = floors.iter().position(|c| *c == 0) {
        return Err(Error::InvalidArgument(format!(
            "target {i} gets no slot: floor(q_{i} * L) = floor({} * {len}) = 0; choose a larger L",
            q[i]
        )));
    }
    let assigned: usize = floors.iter().sum();
    let leftover = len.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..q.len()).collect();
    let frac = |i: usize| scaled[i] - floors[i] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let mut counts = floors;
    for &i in order.iter().cycle().take(leftover) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Periodic sequence of length exactly `L` with short runs per target.
pub fn build_min_consecutive_schedule(q: &ScheduleDistribution, len: usize) -> Result<ScheduleSequence> {
    if len == 0 {
        return Err(Error::InvalidArgument("schedule length must be positive".into()));
    }
    let counts = apportion_counts(q, len)?;
    Ok(build_from_counts(&counts).sequence)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Construction {
    pub sequence: ScheduleSequence,
    /// Element writes performed, for checking the linear cost.
    pub operations: usize,
}

/// Builds a sequence with exactly `counts[i]` copies of target `i`.
///
/// The most frequent target `a_1` forms the backbone. Each further target
/// `a_i`, taken in decreasing count order, is slotted in after every
/// `m_i = ceil(n_1 / (n_i + 1))`-th `a_1` using a countdown reset on every
/// placement. Copies left over after that pass are inserted from the back,
/// each one after an `a_1` that is followed by another `a_1` or ends the
/// sequence; anything still left is appended.
pub fn build_from_counts(counts: &[usize]) -> Construction {
    let n = counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let total: usize = counts.iter().sum();
    let mut ops = 0;
    let Some(&lead) = order.first() else {
        return Construction { sequence: ScheduleSequence { steps: Vec::new(), n_targets: 0 }, operations: 0 };
    };
    let n1 = counts[lead];
    let mut seq = vec![lead; n1];
    ops += n1;
    let mut next = Vec::with_capacity(total);

    for &target in &order[1..] {
        let ni = counts[target];
        if ni == 0 {
            continue;
        }
        let m = n1.div_ceil(ni + 1).max(1);
        let mut counter = m;
        let mut left = ni;
        next.clear();
        for &s in &seq {
            next.push(s);
            ops += 1;
            if s == lead {
                counter -= 1;
                if counter == 0 {
                    if left > 0 {
                        next.push(target);
                        ops += 1;
                        left -= 1;
                    }
                    counter = m;
                }
            }
        }
        if left > 0 {
            // backward pass, output reversed
            seq.clear();
            for k in (0..next.len()).rev() {
                let s = next[k];
                let splits = s == lead && (k + 1 == next.len() || next[k + 1] == lead);
                if left > 0 && splits {
                    seq.push(target);
                    left -= 1;
                    ops += 1;
                }
                seq.push(s);
                ops += 1;
            }
            seq.reverse();
            ops += seq.len();
            seq.extend(std::iter::repeat_n(target, left));
            ops += left;
        } else {
            std::mem::swap(&mut seq, &mut next);
        }
    }
    Construction { sequence: ScheduleSequence { steps: seq, n_targets: n }, operations: ops }
}

/// Backoff-timer channel access parameters, in sampling periods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackoffConfig {
    pub alpha: f64,
    pub epsilon_jitter: f64,
    pub duration: usize,
}

impl BackoffConfig {
    pub const MAX_ALPHA: f64 = 0.01;

    pub fn validate(&self, q: &ScheduleDistribution) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= Self::MAX_ALPHA) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (0, {}], got {}",
                Self::MAX_ALPHA,
                self.alpha
            )));
        }
        let q_min = q.probabilities().iter().copied().fold(f64::INFINITY, f64::min);
        if !(q_min > 0.0) {
            return Err(Error::InvalidArgument(
                "backoff access needs every probability to be positive".into(),
            ));
        }
        if !(self.epsilon_jitter > 0.0 && self.epsilon_jitter < q_min) {
            return Err(Error::InvalidArgument(format!(
                "epsilon_jitter must lie in (0, min q_i = {q_min}), got {}",
                self.epsilon_jitter
            )));
        }
        Ok(())
    }
}

impl Default for BackoffConfig {
    fn default() -> Self {
        Self { alpha: 1e-3, epsilon_jitter: 1e-3, duration: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsmaRun {
    pub sequence: ScheduleSequence,
    pub collisions: usize,
}

/// Event-driven backoff access, one observation slot per sampling period.
///
/// Timers count down only while the channel is idle. The first estimator to
/// expire takes the slot and restarts at `alpha / q_i`; the others keep their
/// residual time. Expiries within `alpha * 1e-9` of each other collide, and
/// every collider restarts at `alpha / (q_i - eps_i)` with a fresh random
/// `eps_i` in `(0, epsilon_jitter]`.
pub fn simulate_csma_schedule(q: &ScheduleDistribution, cfg: &BackoffConfig, seed: u64) -> Result<CsmaRun> {
    cfg.validate(q)?;
    let n = q.len();
    let alpha = cfg.alpha;
    let resolution = alpha * 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nominal: Vec<f64> = q.probabilities().iter().map(|p| alpha / p).collect();
    let mut remaining = nominal.clone();
    let mut steps = Vec::with_capacity(cfg.duration);
    let mut collisions = 0;
    let mut expiring = Vec::with_capacity(n);

    for _ in 0..cfg.duration {
        loop {
            let wait = remaining.iter().copied().fold(f64::INFINITY, f64::min);
            expiring.clear();
            expiring.extend((0..n).filter(|&i| remaining[i] - wait <= resolution));
            for r in remaining.iter_mut() {
                *r = (*r - wait).max(0.0);
            }
            if let [winner] = expiring[..] {
                remaining[winner] = nominal[winner];
                steps.push(winner);
                break;
            }
            collisions += 1;
            for &i in &expiring {
                // eps in (0, jitter]
                let eps = cfg.epsilon_jitter * (1.0 - rng.random::<f64>());
                remaining[i] = alpha / (q[i] - eps);
            }
        }
    }
    Ok(CsmaRun { sequence: ScheduleSequence { steps, n_targets: n }, collisions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> ScheduleDistribution {
        ScheduleDistribution::new(v.to_vec()).unwrap()
    }

    fn seq(v: &[usize], n: usize) -> ScheduleSequence {
        ScheduleSequence::new(v.to_vec(), n).unwrap()
    }

    // smallest achievable longest run over all arrangements with the counts
    fn brute_min_run(n1: usize, n2: usize) -> usize {
        let len = n1 + n2;
        (0u32..1 << len)
            .filter(|m| m.count_ones() as usize == n2)
            .map(|m| {
                let v: Vec<usize> = (0..len).map(|k| ((m >> k) & 1) as usize).collect();
                longest_run(&v)
            })
            .min()
            .unwrap_or(0)
    }

    #[test]
    fn run_lengths() {
        assert_eq!(max_run_length(&seq(&[0, 1, 0, 1], 2)), 1);
        assert_eq!(max_run_length(&seq(&[0, 0, 0, 1], 2)), 3);
        assert_eq!(max_run_length(&seq(&[], 2)), 0);
    }

    #[test]
    fn out_of_range_index_rejected() {
        assert!(ScheduleSequence::new(vec![0, 2], 2).is_err());
    }

    #[test]
    fn text_round_trip() {
        let s = seq(&[0, 2, 1, 0], 3);
        let text = s.to_text();
        assert!(text.starts_with("# L=4 N=3\n"));
        assert_eq!(ScheduleSequence::from_text(&text).unwrap(), s);
        assert!(ScheduleSequence::from_text("# L=3 N=2\n0\n1\n").is_err());
        assert!(ScheduleSequence::from_text("L=1 N=2\n0\n").is_err());
    }

    #[test]
    fn degenerate_sampling() {
        let s = sample_stochastic_schedule(&dist(&[1.0]), 7, 3);
        assert_eq!(s.steps(), &[0; 7]);
    }

    #[test]
    fn sampling_is_seeded() {
        let q = dist(&[0.5, 0.5]);
        assert_eq!(sample_stochastic_schedule(&q, 50, 9), sample_stochastic_schedule(&q, 50, 9));
        assert_ne!(sample_stochastic_schedule(&q, 50, 9), sample_stochastic_schedule(&q, 50, 10));
    }

    #[test]
    fn sampling_frequency() {
        let s = sample_stochastic_schedule(&dist(&[0.674, 0.326]), 100_000, 42);
        assert!((s.frequencies()[0] - 0.674).abs() < 0.005);
    }

    #[test]
    fn min_consecutive_small_cases() {
        let s = build_min_consecutive_schedule(&dist(&[0.5, 0.5]), 4).unwrap();
        assert_eq!(s.counts(), vec![2, 2]);
        assert_eq!(s.max_run_length(), 1);
        let s = build_min_consecutive_schedule(&dist(&[1.0]), 5).unwrap();
        assert_eq!(s.steps(), &[0; 5]);
    }

    #[test]
    fn min_consecutive_example_a() {
        let s = build_min_consecutive_schedule(&dist(&[0.674, 0.326]), 500).unwrap();
        assert_eq!(s.len(), 500);
        assert_eq!(s.counts(), vec![337, 163]);
        assert!(s.max_run_length() <= 337usize.div_ceil(164) + 1);
        // longest run in random sequences is far longer
        let sampled: f64 = (0..200)
            .map(|seed| sample_stochastic_schedule(&dist(&[0.674, 0.326]), 500, seed).max_run_length() as f64)
            .sum::<f64>()
            / 200.0;
        assert!((s.max_run_length() as f64) < sampled);
    }

    #[test]
    fn zero_slot_target_is_named() {
        let err = build_min_consecutive_schedule(&dist(&[0.99, 0.01]), 50).unwrap_err();
        assert!(err.to_string().contains("target 1"));
    }

    #[test]
    fn leftover_goes_to_largest_fraction() {
        let counts = apportion_counts(&dist(&[0.0649, 0.1612, 0.7739]), 100).unwrap();
        assert_eq!(counts, vec![7, 16, 77]);
        let counts = apportion_counts(&dist(&[0.29, 0.71]), 100).unwrap();
        assert_eq!(counts, vec![29, 71]);
    }

    #[test]
    fn two_target_construction_is_optimal() {
        for len in 1..=12 {
            for n2 in 0..=len {
                let n1 = len - n2;
                let built = build_from_counts(&[n1, n2]).sequence;
                assert_eq!(built.counts(), vec![n1, n2]);
                assert_eq!(built.max_run_length(), brute_min_run(n1, n2), "counts ({n1}, {n2})");
            }
        }
    }

    #[test]
    fn operation_count_is_linear() {
        let q = dist(&[0.5, 0.3, 0.2]);
        for len in [100, 1_000, 10_000, 100_000] {
            let counts = apportion_counts(&q, len).unwrap();
            assert!(build_from_counts(&counts).operations <= 4 * 3 * len);
        }
    }

    #[test]
    fn csma_single_target() {
        let cfg = BackoffConfig { duration: 20, ..Default::default() };
        let run = simulate_csma_schedule(&dist(&[1.0]), &cfg, 1).unwrap();
        assert_eq!(run.sequence.steps(), &[0; 20]);
        assert_eq!(run.collisions, 0);
    }

    #[test]
    fn csma_frequencies() {
        for q in [vec![0.5, 0.5], vec![0.0649, 0.1612, 0.7739]] {
            let q = dist(&q);
            let cfg = BackoffConfig { alpha: 1e-3, epsilon_jitter: 1e-3, duration: 10_000 };
            let run = simulate_csma_schedule(&q, &cfg, 5).unwrap();
            for (f, p) in run.sequence.frequencies().iter().zip(q.probabilities()) {
                assert!((f - p).abs() < 0.02, "{f} vs {p}");
            }
        }
    }

    #[test]
    fn csma_resolves_symmetric_collisions() {
        let cfg = BackoffConfig { duration: 100, ..Default::default() };
        let run = simulate_csma_schedule(&dist(&[0.5, 0.5]), &cfg, 11).unwrap();
        assert!(run.collisions >= 1);
        assert_eq!(run.sequence.len(), 100);
    }

    #[test]
    fn csma_is_seeded() {
        let q = dist(&[0.25, 0.25, 0.5]);
        let cfg = BackoffConfig { duration: 500, ..Default::default() };
        assert_eq!(simulate_csma_schedule(&q, &cfg, 3).unwrap(), simulate_csma_schedule(&q, &cfg, 3).unwrap());
    }

    #[test]
    fn csma_rejects_bad_config() {
        let q = dist(&[0.5, 0.5]);
        let big = BackoffConfig { alpha: 0.5, ..Default::default() };
        assert!(simulate_csma_schedule(&q, &big, 0).is_err());
        let jitter = BackoffConfig { epsilon_jitter: 0.6, ..Default::default() };
        assert!(simulate_csma_schedule(&q, &jitter, 0).is_err());
    }

    proptest! {
        #[test]
        fn counts_are_exact(raw in proptest::collection::vec(0.05f64..1.0, 1..5), len in 20usize..400) {
            let total: f64 = raw.iter().sum();
            let q = dist(&raw.iter().map(|v| v / total).collect::<Vec<_>>());
            if let Ok(s) = build_min_consecutive_schedule(&q, len) {
                let counts = s.counts();
                prop_assert_eq!(counts.iter().sum::<usize>(), len);
                let floors: Vec<usize> = q.probabilities().iter().map(|p| (p * len as f64 + 1e-9).floor() as usize).collect();
                let spare = len - floors.iter().sum::<usize>();
                for (c, f) in counts.iter().zip(&floors) {
                    prop_assert!(*c >= *f && *c <= f + spare);
                }
            }
        }
    }
}
