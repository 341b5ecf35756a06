//! Simulated network of estimators solving the scheduling problem together.
//!
//! Each node owns one target. In every synchronised round of the outer
//! bisection a node solves its own per-target subproblem, the network
//! averages the results by linear consensus, and every node applies the same
//! bisection rule to its local copy of the budget interval. Nodes are stepped
//! in index order inside one process; the only shared information is what
//! travels over graph edges.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{LtiTarget, ScheduleDistribution};
use crate::optimizer::{self, Constraints, PreparedProblem, SolveReport, SolverOptions, TargetSolution};

/// Undirected communication graph with Metropolis-Hastings consensus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    weights: DMatrix<f64>,
}

impl Topology {
    /// Builds a topology from undirected edges `(i, j)`, `i != j`.
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidArgument("topology needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= n_nodes || j >= n_nodes {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {j}) references a node outside 0..{n_nodes}"
                )));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self-loop at node {i}")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let mut neighbors = vec![Vec::new(); n_nodes];
        for &(i, j) in &set {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        let topo = Self {
            n_nodes,
            weights: metropolis_weights(&neighbors),
            edges: set,
            neighbors,
        };
        if !topo.is_connected() {
            return Err(Error::InvalidArgument("communication graph is not connected".into()));
        }
        Ok(topo)
    }

    /// From an adjacency list; an edge listed in either direction counts.
    pub fn from_adjacency(adjacency: &[Vec<usize>]) -> Result<Self> {
        let edges = adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().map(move |&j| (i, j)));
        Self::new(adjacency.len(), edges.collect::<Vec<_>>())
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::new(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect::<Vec<_>>())
    }

    pub fn line(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i - 1, i)).collect::<Vec<_>>())
    }

    pub fn ring(n: usize) -> Result<Self> {
        if n < 3 {
            return Self::line(n);
        }
        Self::new(n, (0..n).map(|i| (i, (i + 1) % n)).collect::<Vec<_>>())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Messages exchanged in one synchronous round (one per directed edge).
    pub fn messages_per_round(&self) -> usize {
        2 * self.edges.len()
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_nodes];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

// W_ij = 1 / (1 + max(d_i, d_j)) on edges, W_ii = 1 - sum_j W_ij.
fn metropolis_weights(neighbors: &[Vec<usize>]) -> DMatrix<f64> {
    let n = neighbors.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for &j in &neighbors[i] {
            w[(i, j)] = 1.0 / (1.0 + neighbors[i].len().max(neighbors[j].len()) as f64);
        }
    }
    for i in 0..n {
        let off: f64 = neighbors[i].iter().map(|&j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutcome {
    /// Each node's estimate of the network average.
    pub values: Vec<f64>,
    pub rounds: usize,
    /// Largest deviation of any node from the true average.
    pub residual: f64,
}

/// Synchronous linear averaging over graph edges.
#[derive(Debug, Clone)]
struct ConsensusRun<'g> {
    topology: &'g Topology,
    values: Vec<f64>,
    scratch: Vec<f64>,
    mean: f64,
    rounds: usize,
}

impl<'g> ConsensusRun<'g> {
    fn new(topology: &'g Topology, values: &[f64]) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Self { topology, values: values.to_vec(), scratch: vec![0.0; values.len()], mean, rounds: 0 }
    }

    fn residual(&self) -> f64 {
        self.values.iter().map(|v| (v - self.mean).abs()).fold(0.0, f64::max)
    }

    fn step(&mut self) {
        let w = &self.topology.weights;
        for i in 0..self.values.len() {
            let mut acc = w[(i, i)] * self.values[i];
            for &j in &self.topology.neighbors[i] {
                acc += w[(i, j)] * self.values[j];
            }
            self.scratch[i] = acc;
        }
        std::mem::swap(&mut self.values, &mut self.scratch);
        self.rounds += 1;
    }

    fn run_until(&mut self, tol: f64, max_rounds: usize) -> Result<()> {
        while self.residual() > tol {
            if self.rounds >= max_rounds {
                return Err(Error::Consensus { rounds: self.rounds, residual: self.residual() });
            }
            let before = self.residual();
            self.step();
            // floating-point floor: further rounds cannot improve
            if self.residual() >= before && self.rounds > self.topology.n_nodes * 4 {
                break;
            }
        }
        Ok(())
    }

    fn outcome(&self) -> ConsensusOutcome {
        ConsensusOutcome { values: self.values.clone(), rounds: self.rounds, residual: self.residual() }
    }
}

/// Iterates `x <- W x` until every node is within `tol` of the mean.
pub fn average_consensus(
    values: &[f64],
    topology: &Topology,
    tol: f64,
    max_rounds: usize,
) -> Result<ConsensusOutcome> {
    if values.len() != topology.n_nodes() {
        return Err(Error::Dimension(format!(
            "{} values for {} nodes",
            values.len(),
            topology.n_nodes()
        )));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be nonnegative, got {tol}")));
    }
    let mut run = ConsensusRun::new(topology, values);
    run.run_until(tol, max_rounds)?;
    if run.residual() > tol {
        return Err(Error::Consensus { rounds: run.rounds, residual: run.residual() });
    }
    Ok(run.outcome())
}

/// Floods each node's record along edges until every node knows all of them.
/// Returns the per-node views (identical at the end) and the rounds used.
fn flood_gather<T: Clone>(topology: &Topology, local: Vec<T>) -> (Vec<Vec<T>>, usize) {
    let n = topology.n_nodes();
    let mut known: Vec<Vec<Option<T>>> = (0..n)
        .map(|i| {
            let mut v = vec![None; n];
            v[i] = Some(local[i].clone());
            v
        })
        .collect();
    let mut rounds = 0;
    while known.iter().any(|k| k.iter().any(Option::is_none)) {
        let snapshot = known.clone();
        for (i, view) in known.iter_mut().enumerate() {
            for &j in topology.neighbors(i) {
                for (slot, incoming) in view.iter_mut().zip(&snapshot[j]) {
                    if slot.is_none() {
                        slot.clone_from(incoming);
                    }
                }
            }
        }
        rounds += 1;
    }
    let views = known
        .into_iter()
        .map(|k| k.into_iter().map(|v| v.expect("flood complete")).collect())
        .collect();
    (views, rounds)
}

/// One estimator's view of the outer bisection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeState {
    pub node_id: usize,
    pub l: f64,
    pub u: f64,
    pub gamma: f64,
    pub q_local: f64,
    pub round: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributedOptions {
    pub solver: SolverOptions,
    pub consensus_tol: f64,
    pub max_rounds: usize,
    /// Initial `[l, u]`; computed from the targets when absent.
    pub bracket: Option<(f64, f64)>,
}

impl Default for DistributedOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            consensus_tol: 1e-12,
            max_rounds: 100_000,
            bracket: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BisectionStep {
    pub gamma: f64,
    /// Each node's estimate of `mu(gamma)`.
    pub mu_estimates: Vec<f64>,
    pub feasible: bool,
    pub consensus_rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedReport {
    /// One report per node; all nodes agree.
    pub node_reports: Vec<SolveReport>,
    pub steps: Vec<BisectionStep>,
    pub nodes: Vec<NodeState>,
    pub messages: usize,
}

impl DistributedReport {
    pub fn report(&self) -> &SolveReport {
        &self.node_reports[0]
    }
}

/// Runs the synchronised distributed bisection: every node halves its local
/// copy of `[l, u]` using `mu(gamma) = N * average(q_i^opt(gamma))` obtained by
/// consensus, until `u - l <= eps` (`solver.outer_tol`).
///
/// Before branching, nodes keep averaging while any node's `mu` estimate is
/// within ten times the consensus residual of 1, so every node takes the same
/// branch; a split decision is a protocol error.
pub fn run_distributed_op(
    targets: &[LtiTarget],
    topology: &Topology,
    constraints: &Constraints,
    opts: &DistributedOptions,
) -> Result<DistributedReport> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no targets".into()));
    }
    if topology.n_nodes() != n {
        return Err(Error::Dimension(format!(
            "topology has {} nodes for {n} targets",
            topology.n_nodes()
        )));
    }
    let problem = PreparedProblem::new(targets, constraints, &opts.solver)?;
    if let Some(reason) = problem.infeasibility() {
        let report = problem.infeasible_report(reason);
        return Ok(DistributedReport {
            node_reports: vec![report; n],
            steps: Vec::new(),
            nodes: Vec::new(),
            messages: 0,
        });
    }
    let (l0, u0) = match opts.bracket {
        Some(b) => b,
        None => problem.bracket()?,
    };
    if !(l0 <= u0) {
        return Err(Error::InvalidArgument(format!("bracket [{l0}, {u0}] is empty")));
    }
    let eps = opts.solver.outer_tol;
    let mut nodes: Vec<NodeState> = (0..n)
        .map(|i| NodeState { node_id: i, l: l0, u: u0, gamma: u0, q_local: f64::NAN, round: 0 })
        .collect();
    let mut steps = Vec::new();
    let mut messages = 0;
    let mut inner_iterations = vec![0usize; n];

    while nodes[0].u - nodes[0].l > eps {
        let local = nodes
            .par_iter()
            .map(|s| problem.local_q(s.node_id, 0.5 * (s.l + s.u)))
            .collect::<Result<Vec<_>>>()?;
        for (s, sol) in nodes.iter_mut().zip(&local) {
            s.gamma = 0.5 * (s.l + s.u);
            s.q_local = sol.q;
            s.round += 1;
        }
        for (c, sol) in inner_iterations.iter_mut().zip(&local) {
            *c += sol.iterations;
        }
        let values: Vec<f64> = nodes.iter().map(|s| s.q_local).collect();
        let mut run = ConsensusRun::new(topology, &values);
        run.run_until(opts.consensus_tol, opts.max_rounds)?;
        let nf = n as f64;
        // decision guard: refine while any estimate is ambiguous about mu <= 1
        while run.values.iter().any(|v| (nf * v - 1.0).abs() <= 10.0 * nf * run.residual())
            && run.residual() > 0.0
            && run.rounds < opts.max_rounds
        {
            let before = run.residual();
            run.step();
            if run.residual() >= before {
                break;
            }
        }
        messages += run.rounds * topology.messages_per_round();
        let mu_estimates: Vec<f64> = run.values.iter().map(|v| nf * v).collect();
        let decisions: Vec<bool> = mu_estimates.iter().map(|m| *m <= 1.0).collect();
        if decisions.iter().any(|d| *d != decisions[0]) {
            return Err(Error::Protocol(format!(
                "nodes disagree on mu <= 1 at gamma = {}: {mu_estimates:?}",
                nodes[0].gamma
            )));
        }
        for s in nodes.iter_mut() {
            if decisions[0] {
                s.u = s.gamma;
            } else {
                s.l = s.gamma;
            }
        }
        let (l, u) = (nodes[0].l, nodes[0].u);
        if nodes.iter().any(|s| s.l.to_bits() != l.to_bits() || s.u.to_bits() != u.to_bits()) {
            return Err(Error::Protocol("bisection bounds diverged across nodes".into()));
        }
        steps.push(BisectionStep {
            gamma: nodes[0].gamma,
            mu_estimates,
            feasible: decisions[0],
            consensus_rounds: run.rounds,
        });
    }

    // Final assembly: each node solves at its feasible endpoint, then the
    // network floods (q_i, q_c,i) so every node can rescale identically.
    let gamma_star = nodes[0].u;
    let finals = nodes
        .par_iter()
        .map(|s| problem.local_q(s.node_id, s.u))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<(f64, f64)> = finals
        .iter()
        .enumerate()
        .map(|(i, sol)| (sol.q, problem.q_critical(i)))
        .collect();
    let (views, rounds) = flood_gather(topology, records);
    messages += rounds * topology.messages_per_round();
    let scaled: Vec<Vec<f64>> = views
        .iter()
        .map(|view| optimizer::rescale(&view.iter().map(|r| r.0).collect::<Vec<_>>()))
        .collect();
    let costs = (0..n)
        .into_par_iter()
        .map(|i| problem.local_cost(i, scaled[i][i]))
        .collect::<Result<Vec<_>>>()?;
    let (cost_views, rounds) = flood_gather(topology, costs);
    messages += rounds * topology.messages_per_round();

    let node_reports = (0..n)
        .map(|i| {
            let per_target: Vec<TargetSolution> = (0..n)
                .map(|j| TargetSolution {
                    q: scaled[i][j],
                    cost: cost_views[i][j],
                    q_critical: views[i][j].1,
                })
                .collect();
            let mu: f64 = views[i].iter().map(|r| r.0).sum();
            Ok(SolveReport {
                gamma_star: if n == 1 { per_target[0].cost } else { gamma_star },
                q_star: Some(ScheduleDistribution::new(scaled[i].clone())?),
                per_target,
                outer_iterations: steps.len(),
                inner_iterations: inner_iterations.clone(),
                feasible: true,
                infeasibility: None,
                mu_at_gamma: mu,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DistributedReport { node_reports, steps, nodes, messages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::example_a;
    use crate::optimizer::solve_op;

    #[test]
    fn weights_are_doubly_stochastic() {
        for topo in [
            Topology::line(5).unwrap(),
            Topology::ring(6).unwrap(),
            Topology::complete(4).unwrap(),
            Topology::new(4, [(0, 1), (0, 2), (0, 3)]).unwrap(),
        ] {
            let w = topo.weights();
            for i in 0..topo.n_nodes() {
                assert!((w.row(i).sum() - 1.0).abs() < 1e-12);
                assert!((w.column(i).sum() - 1.0).abs() < 1e-12);
                assert!(w[(i, i)] > 0.0);
            }
        }
    }

    #[test]
    fn disconnected_graph_rejected() {
        assert!(Topology::new(4, [(0, 1), (2, 3)]).is_err());
        assert!(Topology::new(2, [(0, 2)]).is_err());
        assert!(Topology::new(2, [(1, 1)]).is_err());
    }

    #[test]
    fn adjacency_list_is_symmetrised() {
        let t = Topology::from_adjacency(&[vec![1], vec![], vec![1]]).unwrap();
        assert_eq!(t.edges().len(), 2);
        assert_eq!(t.neighbors(1), &[0, 2]);
    }

    #[test]
    fn consensus_of_equal_values_is_immediate() {
        let topo = Topology::line(4).unwrap();
        let out = average_consensus(&[0.3; 4], &topo, 1e-12, 10).unwrap();
        assert_eq!(out.rounds, 0);
        assert!(out.values.iter().all(|v| *v == 0.3));
    }

    #[test]
    fn two_node_average() {
        let topo = Topology::line(2).unwrap();
        let out = average_consensus(&[0.674, 0.326], &topo, 1e-12, 100).unwrap();
        assert!(out.values.iter().all(|v| (v - 0.5).abs() <= 1e-12));
    }

    #[test]
    fn complete_graph_averages_in_one_round() {
        let topo = Topology::complete(5).unwrap();
        let vals = [1.0, 2.0, 3.0, 4.0, 10.0];
        let out = average_consensus(&vals, &topo, 1e-12, 100).unwrap();
        assert_eq!(out.rounds, 1);
        assert!(out.values.iter().all(|v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn consensus_round_budget_is_enforced() {
        let topo = Topology::line(10).unwrap();
        let vals: Vec<f64> = (0..10).map(f64::from).collect();
        let err = average_consensus(&vals, &topo, 1e-12, 3).unwrap_err();
        assert!(matches!(err, Error::Consensus { rounds: 3, .. }));
    }

    #[test]
    fn flooding_reaches_everyone() {
        let topo = Topology::line(4).unwrap();
        let (views, rounds) = flood_gather(&topo, vec![10, 11, 12, 13]);
        assert_eq!(rounds, 3);
        assert!(views.iter().all(|v| v == &vec![10, 11, 12, 13]));
    }

    #[test]
    fn single_node_matches_centralised() {
        let ts = vec![example_a().remove(0)];
        let topo = Topology::new(1, []).unwrap();
        let d = run_distributed_op(&ts, &topo, &Constraints::none(), &DistributedOptions::default())
            .unwrap();
        let c = solve_op(&ts, &Constraints::none(), &SolverOptions::default()).unwrap();
        assert_eq!(d.report().q_star, c.q_star);
        assert!((d.report().gamma_star - c.gamma_star).abs() < 1e-12);
    }

    #[test]
    fn example_a_two_nodes() {
        let ts = example_a();
        let topo = Topology::line(2).unwrap();
        let opts = DistributedOptions::default();
        let d = run_distributed_op(&ts, &topo, &Constraints::none(), &opts).unwrap();
        let c = solve_op(&ts, &Constraints::none(), &opts.solver).unwrap();
        assert!((d.report().gamma_star - c.gamma_star).abs() <= opts.solver.outer_tol);
        for r in &d.node_reports {
            assert_eq!(r, d.report());
        }
        let (qd, qc) = (d.report().q_star.clone().unwrap(), c.q_star.unwrap());
        for i in 0..2 {
            assert!((qd[i] - qc[i]).abs() < 1e-4);
        }
        assert!(d.steps.iter().all(|s| s.consensus_rounds <= opts.max_rounds));
        assert!(d.messages > 0);
    }
}
