//! Satisfiability modulo convex queries for the ReLU closed loop.
//!
//! A query asks whether some mean state `X` in a source cell has a
//! closed-loop successor mean `A X + B f(C X + c)` inside a target polytope.
//! The boolean part (one literal per hidden neuron, true = active) is
//! searched depth-first; every partial assignment is checked by a linear
//! program in which assigned neurons are fixed to their branch and
//! unassigned neurons are relaxed to `h >= 0, h >= t`. Infeasible programs
//! yield Farkas certificates, and the rows they cite are mapped back to
//! neuron literals to learn conflict clauses.
//!
//! LP variables are laid out as `[X (n), X⁺ (n), u (m), t (N), h (N)]`;
//! the measurement `d = C X + c` is substituted into the first layer.

use std::fmt;

use crate::geometry::{self, Polytope};
use crate::lp::{
    self, Label, LinearProgram, LpError, OracleResult, Relation, EPS_LP, EPS_STRICT,
};
use crate::scenario::{interval_affine, Scenario, EPS_MEMBER};
use crate::{Error, Result};

/// Default cap on search nodes per query.
pub const DEFAULT_NODE_BUDGET: u64 = 1 << 20;

/// Conflict sets with more literal-linked rows than this are shrunk by
/// deletion filtering before a clause is learned.
const FILTER_THRESHOLD: usize = 8;

/// Tolerance on `|t|` under which a pattern mismatch counts as a tie.
const TIE_TOL: f64 = 1e-6;

const G_SOURCE: &str = "source";
const G_TARGET: &str = "target";
const G_DYNAMICS: &str = "dynamics";
const G_LAYER: &str = "layer";
const G_OUTPUT: &str = "output";
const G_RELAX_POS: &str = "relax.h>=0";
const G_RELAX_T: &str = "relax.h>=t";
const G_ACTIVE_EQ: &str = "active.h=t";
const G_ACTIVE_T: &str = "active.t>=0";
const G_INACTIVE_H: &str = "inactive.h=0";
const G_INACTIVE_T: &str = "inactive.t<0";

/// A concrete satisfying assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub x: Vec<f64>,
    pub x_next: Vec<f64>,
    pub pattern: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SmcOutcome {
    Sat(Witness),
    Unsat,
    /// Search gave up (node budget or repeated numerical failure). Callers
    /// computing upper bounds treat this as satisfiable.
    Unknown,
}

impl SmcOutcome {
    /// Whether an upper-bound computation must assume a transition exists.
    pub fn maybe_sat(&self) -> bool {
        !matches!(self, SmcOutcome::Unsat)
    }

    pub fn witness(&self) -> Option<&Witness> {
        match self {
            SmcOutcome::Sat(w) => Some(w),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SmcStats {
    pub nodes: u64,
    pub lp_solves: u64,
    pub learned: u64,
    pub numerical_failures: u64,
}

/// A literal `neuron = value`.
type Literal = (usize, bool);

/// The encoded query for one source cell and one target polytope.
#[derive(Debug, Clone)]
pub struct SmcProblem<'a> {
    scenario: &'a Scenario,
    source: usize,
    target: Polytope,
    n: usize,
    m: usize,
    neurons: usize,
    /// Rows shared by every assignment: membership, dynamics, layer links
    /// and output link.
    base: LinearProgram,
    /// Interval bounds on every pre-activation over the source cell's box.
    t_bounds: Vec<(f64, f64)>,
}

/// Row counts of the base encoding, by family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodingShape {
    pub source: usize,
    pub target: usize,
    pub dynamics: usize,
    pub layer: usize,
    pub output: usize,
    pub booleans: usize,
    pub variables: usize,
}

impl<'a> SmcProblem<'a> {
    pub fn source(&self) -> usize {
        self.source
    }

    pub fn target(&self) -> &Polytope {
        &self.target
    }

    pub fn neuron_count(&self) -> usize {
        self.neurons
    }

    fn dim(&self) -> usize {
        2 * self.n + self.m + 2 * self.neurons
    }

    fn x_var(&self, j: usize) -> usize {
        j
    }

    fn xn_var(&self, j: usize) -> usize {
        self.n + j
    }

    fn u_var(&self, k: usize) -> usize {
        2 * self.n + k
    }

    fn t_var(&self, i: usize) -> usize {
        2 * self.n + self.m + i
    }

    fn h_var(&self, i: usize) -> usize {
        2 * self.n + self.m + self.neurons + i
    }

    pub fn shape(&self) -> EncodingShape {
        let count = |g: &str| self.base.rows().iter().filter(|r| r.label.group == g).count();
        EncodingShape {
            source: count(G_SOURCE),
            target: count(G_TARGET),
            dynamics: count(G_DYNAMICS),
            layer: count(G_LAYER),
            output: count(G_OUTPUT),
            booleans: self.neurons,
            variables: self.dim(),
        }
    }

    /// The LP for a partial assignment.
    fn program(&self, assign: &[Option<bool>]) -> LinearProgram {
        let dim = self.dim();
        let mut lp = self.base.clone();
        let unit = |idx: &[(usize, f64)]| {
            let mut row = vec![0.0; dim];
            for &(j, v) in idx {
                row[j] += v;
            }
            row
        };
        for (i, a) in assign.iter().enumerate() {
            let (t, h) = (self.t_var(i), self.h_var(i));
            let li = i as u32;
            match a {
                None => {
                    lp.push(unit(&[(h, 1.0)]), Relation::Ge, 0.0, Label::new(G_RELAX_POS, li));
                    lp.push(
                        unit(&[(h, 1.0), (t, -1.0)]),
                        Relation::Ge,
                        0.0,
                        Label::new(G_RELAX_T, li),
                    );
                }
                Some(true) => {
                    lp.push(
                        unit(&[(h, 1.0), (t, -1.0)]),
                        Relation::Eq,
                        0.0,
                        Label::new(G_ACTIVE_EQ, li),
                    );
                    lp.push(unit(&[(t, 1.0)]), Relation::Ge, 0.0, Label::new(G_ACTIVE_T, li));
                }
                Some(false) => {
                    lp.push(unit(&[(h, 1.0)]), Relation::Eq, 0.0, Label::new(G_INACTIVE_H, li));
                    lp.push(
                        unit(&[(t, 1.0)]),
                        Relation::Le,
                        -EPS_STRICT,
                        Label::new(G_INACTIVE_T, li),
                    );
                }
            }
        }
        lp
    }

    /// Labelled text of the root program (every neuron relaxed).
    pub fn dump(&self) -> String {
        self.program(&vec![None; self.neurons]).dump()
    }

    /// Whether the program with every neuron fixed to `pattern` is feasible.
    pub fn check_pattern(&self, pattern: &[bool]) -> Result<bool> {
        if pattern.len() != self.neurons {
            return Err(Error::Dimension(format!(
                "pattern has {} entries for {} neurons",
                pattern.len(),
                self.neurons
            )));
        }
        let assign: Vec<Option<bool>> = pattern.iter().map(|b| Some(*b)).collect();
        Ok(lp::is_feasible(&self.program(&assign))?)
    }

    /// Re-checks a witness against the concrete closed loop.
    pub fn recheck(&self, w: &Witness) -> bool {
        let s = self.scenario;
        if !s.cell(self.source).region.contains(&w.x, EPS_MEMBER) {
            return false;
        }
        let next = s.mean_step_in(&w.x, self.source);
        if !self.target.contains(&next, EPS_LP) {
            return false;
        }
        if next
            .iter()
            .zip(&w.x_next)
            .any(|(a, b)| (a - b).abs() > 1e-6 * (1.0 + a.abs()))
        {
            return false;
        }
        let d = s.cell(self.source).measurement.apply(&w.x);
        let pre = pre_activations(s, &d);
        let (_, pattern) = s.controller.forward(&d).expect("dimension checked");
        pattern
            .iter()
            .zip(&w.pattern)
            .zip(&pre)
            .all(|((a, b), t)| a == b || t.abs() <= TIE_TOL)
    }

    /// Decides the query with the default node budget.
    pub fn solve(&self) -> Result<SmcOutcome> {
        Ok(self.solve_with_budget(DEFAULT_NODE_BUDGET).0)
    }

    pub fn solve_with_budget(&self, budget: u64) -> (SmcOutcome, SmcStats) {
        let mut search = Search {
            problem: self,
            learned: Vec::new(),
            stats: SmcStats::default(),
            budget,
            exhausted: false,
            uncertain: false,
        };
        let mut assign = vec![None; self.neurons];
        // neurons whose sign is fixed over the whole source box
        for (i, &(lo, hi)) in self.t_bounds.iter().enumerate() {
            if lo > 0.0 {
                assign[i] = Some(true);
            } else if hi < -EPS_STRICT {
                assign[i] = Some(false);
            }
        }
        let verdict = search.dfs(&mut assign);
        let outcome = match verdict {
            Verdict::Sat(w) => SmcOutcome::Sat(w),
            Verdict::Unsat if !search.uncertain => SmcOutcome::Unsat,
            _ => SmcOutcome::Unknown,
        };
        (outcome, search.stats)
    }
}

/// Pre-activations of every hidden neuron, layer-major.
fn pre_activations(s: &Scenario, d: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.controller.neuron_count());
    let mut h = d.to_vec();
    for layer in s.controller.hidden_layers() {
        let mut t = layer.weights.mul_vec(&h);
        for (v, b) in t.iter_mut().zip(&layer.bias) {
            *v += b;
        }
        out.extend_from_slice(&t);
        h = t.into_iter().map(|v| v.max(0.0)).collect();
    }
    out
}

/// Builds the query "some `X` in cell `source` steps into `target`".
pub fn build_encoding<'a>(
    s: &'a Scenario,
    source: usize,
    target: &Polytope,
) -> Result<SmcProblem<'a>> {
    let n = s.state_dim();
    let m = s.dynamics.input_dim();
    if target.halfspaces.iter().any(|h| h.a.len() != n) {
        return Err(Error::Dimension("target polytope dimension".into()));
    }
    if source >= s.cell_count() {
        return Err(Error::Dimension(format!("no cell {source}")));
    }
    let neurons = s.controller.neuron_count();
    let mut p = SmcProblem {
        scenario: s,
        source,
        target: target.clone(),
        n,
        m,
        neurons,
        base: LinearProgram::new(0),
        t_bounds: Vec::new(),
    };
    let dim = p.dim();
    let mut lp = LinearProgram::new(dim);
    let cell = s.cell(source);

    for (k, h) in cell.region.halfspaces.iter().enumerate() {
        let mut row = vec![0.0; dim];
        for j in 0..n {
            row[p.x_var(j)] = h.a[j];
        }
        lp.push(row, Relation::Le, h.b, Label::new(G_SOURCE, k as u32));
    }
    for (k, h) in target.halfspaces.iter().enumerate() {
        let mut row = vec![0.0; dim];
        for j in 0..n {
            row[p.xn_var(j)] = h.a[j];
        }
        lp.push(row, Relation::Le, h.b, Label::new(G_TARGET, k as u32));
    }
    for r in 0..n {
        let mut row = vec![0.0; dim];
        row[p.xn_var(r)] = 1.0;
        for j in 0..n {
            row[p.x_var(j)] -= s.dynamics.a.get(r, j);
        }
        for k in 0..m {
            row[p.u_var(k)] -= s.dynamics.b.get(r, k);
        }
        lp.push(row, Relation::Eq, 0.0, Label::new(G_DYNAMICS, r as u32));
    }

    let meas = &cell.measurement;
    let mut offset = 0;
    for (l, layer) in s.controller.hidden_layers().iter().enumerate() {
        let width = layer.bias.len();
        for i in 0..width {
            let mut row = vec![0.0; dim];
            row[p.t_var(offset + i)] = 1.0;
            let mut rhs = layer.bias[i];
            if l == 0 {
                // t = W (C X + c) + w
                for q in 0..meas.matrix.rows() {
                    let w = layer.weights.get(i, q);
                    for j in 0..n {
                        row[p.x_var(j)] -= w * meas.matrix.get(q, j);
                    }
                    rhs += w * meas.offset[q];
                }
            } else {
                let prev_width = layer.weights.cols();
                for j in 0..prev_width {
                    row[p.h_var(offset - prev_width + j)] -= layer.weights.get(i, j);
                }
            }
            lp.push(row, Relation::Eq, rhs, Label::new(G_LAYER, (offset + i) as u32));
        }
        offset += width;
    }
    let out = s.controller.output_layer();
    let last_width = out.weights.cols();
    for k in 0..m {
        let mut row = vec![0.0; dim];
        row[p.u_var(k)] = 1.0;
        for j in 0..last_width {
            row[p.h_var(neurons - last_width + j)] -= out.weights.get(k, j);
        }
        lp.push(row, Relation::Eq, out.bias[k], Label::new(G_OUTPUT, k as u32));
    }
    p.base = lp;
    p.t_bounds = match cell.region.bounding_box(n) {
        Ok(bx) => {
            let lo: Vec<f64> = bx.iter().map(|b| b.0).collect();
            let hi: Vec<f64> = bx.iter().map(|b| b.1).collect();
            neuron_intervals(s, source, &lo, &hi)
        }
        Err(_) => vec![(f64::NEG_INFINITY, f64::INFINITY); neurons],
    };
    Ok(p)
}

/// Interval bounds on every pre-activation for states in the box `[lo, hi]`
/// of cell `cell`.
fn neuron_intervals(s: &Scenario, cell: usize, lo: &[f64], hi: &[f64]) -> Vec<(f64, f64)> {
    let meas = &s.cell(cell).measurement;
    let (mut l, mut h) = interval_affine(&meas.matrix, &meas.offset, lo, hi);
    let mut out = Vec::new();
    for layer in s.controller.hidden_layers() {
        let (tl, th) = interval_affine(&layer.weights, &layer.bias, &l, &h);
        out.extend(tl.iter().copied().zip(th.iter().copied()));
        l = tl.into_iter().map(|v| v.max(0.0)).collect();
        h = th.into_iter().map(|v| v.max(0.0)).collect();
    }
    out
}

/// One-shot query.
pub fn solve(s: &Scenario, source: usize, target: &Polytope) -> Result<SmcOutcome> {
    build_encoding(s, source, target)?.solve()
}

enum Verdict {
    Sat(Witness),
    Unsat,
    Budget,
}

struct Search<'p, 'a> {
    problem: &'p SmcProblem<'a>,
    /// Nogoods: sets of literals that cannot hold together.
    learned: Vec<Vec<Literal>>,
    stats: SmcStats,
    budget: u64,
    exhausted: bool,
    /// Set when a subtree was abandoned for numerical reasons.
    uncertain: bool,
}

impl Search<'_, '_> {
    fn dfs(&mut self, assign: &mut Vec<Option<bool>>) -> Verdict {
        if self.exhausted || self.stats.nodes >= self.budget {
            self.exhausted = true;
            return Verdict::Budget;
        }
        self.stats.nodes += 1;
        let mut implied = Vec::new();
        let verdict = self.node(assign, &mut implied);
        for i in implied {
            assign[i] = None;
        }
        verdict
    }

    fn node(&mut self, assign: &mut Vec<Option<bool>>, implied: &mut Vec<usize>) -> Verdict {
        if !self.propagate(assign, implied) {
            return Verdict::Unsat;
        }
        let p = self.problem;
        let lp = p.program(assign);
        self.stats.lp_solves += 1;
        let point = match lp::solve(&lp) {
            Ok(OracleResult::Infeasible(cert)) => {
                self.learn(&lp, &cert, assign);
                return Verdict::Unsat;
            }
            Ok(OracleResult::Feasible { point, .. }) => Some(point),
            Err(LpError::Numerical(_) | LpError::PivotLimit(_) | LpError::Unbounded) => {
                self.stats.numerical_failures += 1;
                None
            }
        };
        if let Some(point) = &point {
            if let Some(w) = self.concrete_witness(point) {
                return Verdict::Sat(w);
            }
        }
        let Some(next) = assign.iter().position(Option::is_none) else {
            return match point {
                Some(point) => Verdict::Sat(self.leaf_witness(&point, assign)),
                None => {
                    self.uncertain = true;
                    Verdict::Unsat
                }
            };
        };
        let phase = point.as_ref().is_none_or(|pt| pt[p.t_var(next)] >= 0.0);
        for value in [phase, !phase] {
            assign[next] = Some(value);
            let v = self.dfs(assign);
            assign[next] = None;
            match v {
                Verdict::Unsat => {}
                other => return other,
            }
        }
        Verdict::Unsat
    }

    /// Unit propagation over learned nogoods. Returns false on conflict.
    fn propagate(&self, assign: &mut [Option<bool>], implied: &mut Vec<usize>) -> bool {
        loop {
            let mut changed = false;
            for clause in &self.learned {
                let mut free = None;
                let mut open = 0;
                let mut falsified = false;
                for &(i, v) in clause {
                    match assign[i] {
                        Some(a) if a == v => {}
                        Some(_) => {
                            falsified = true;
                            break;
                        }
                        None => {
                            open += 1;
                            free = Some((i, v));
                        }
                    }
                }
                if falsified {
                    continue;
                }
                match (open, free) {
                    (0, _) => return false,
                    (1, Some((i, v))) => {
                        assign[i] = Some(!v);
                        implied.push(i);
                        changed = true;
                    }
                    _ => {}
                }
            }
            if !changed {
                return true;
            }
        }
    }

    fn learn(&mut self, lp: &LinearProgram, cert: &lp::Certificate, assign: &[Option<bool>]) {
        let literal = |label: &Label| -> Option<Literal> {
            let i = label.index as usize;
            match label.group {
                G_ACTIVE_EQ | G_ACTIVE_T => Some((i, true)),
                G_INACTIVE_H | G_INACTIVE_T => Some((i, false)),
                _ => None,
            }
        };
        let mut rows = cert.support();
        let linked = rows
            .iter()
            .filter(|&&r| literal(&lp.rows()[r].label).is_some())
            .count();
        if linked > FILTER_THRESHOLD {
            rows = lp::minimal_infeasible_subset(lp, cert);
        }
        let mut clause: Vec<Literal> = rows
            .iter()
            .filter_map(|&r| literal(&lp.rows()[r].label))
            .collect();
        clause.sort_unstable();
        clause.dedup();
        debug_assert!(clause.iter().all(|&(i, v)| assign[i] == Some(v)));
        self.stats.learned += 1;
        self.learned.push(clause);
    }

    /// Sat witness from the concrete forward pass at the LP's `X`, if its
    /// successor lands strictly inside the target.
    fn concrete_witness(&self, point: &[f64]) -> Option<Witness> {
        let p = self.problem;
        let s = p.scenario;
        let x = point[..p.n].to_vec();
        if !s.cell(p.source).region.contains(&x, EPS_MEMBER) {
            return None;
        }
        let d = s.cell(p.source).measurement.apply(&x);
        let (u, pattern) = s.controller.forward(&d).ok()?;
        let next = s.dynamics.mean_step(&x, &u);
        p.target.contains(&next, 0.0).then_some(Witness {
            x,
            x_next: next,
            pattern,
        })
    }

    fn leaf_witness(&self, point: &[f64], assign: &[Option<bool>]) -> Witness {
        let p = self.problem;
        let x = point[..p.n].to_vec();
        let x_next = p.scenario.mean_step_in(&x, p.source);
        Witness {
            x,
            x_next,
            pattern: assign.iter().map(|a| a.expect("leaf")).collect(),
        }
    }
}

impl fmt::Display for SmcOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SmcOutcome::Sat(w) => write!(f, "sat at {:?} -> {:?}", w.x, w.x_next),
            SmcOutcome::Unsat => write!(f, "unsat"),
            SmcOutcome::Unknown => write!(f, "unknown"),
        }
    }
}

/// `augmented_set` of `target` followed by a query.
pub fn query_augmented(
    s: &Scenario,
    source: usize,
    target: &Polytope,
    q: f64,
) -> Result<SmcOutcome> {
    let aug = geometry::augmented_set(target, q, &s.dynamics.sigma)?;
    solve(s, source, &aug)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::make_demo_scenario;
    use crate::geometry::Halfspace;
    use crate::scenario::{Layer, Matrix, ReluNetwork};

    fn constant_controller(u0: [f64; 2]) -> Scenario {
        let mut s = make_demo_scenario(2, &[2], 0).unwrap();
        let hidden = Layer {
            weights: Matrix::zeros(2, 2),
            bias: vec![0.0; 2],
        };
        let out = Layer {
            weights: Matrix::zeros(2, 2),
            bias: u0.to_vec(),
        };
        s.controller = ReluNetwork::new(vec![hidden, out]).unwrap();
        s
    }

    #[test]
    fn constant_controller_reachability() {
        let s = constant_controller([1.0, 0.0]);
        // cell 0 is [0,5]x[0,5]; successors cover [1,6]x[0,5]
        let near = Polytope::from_box(&[5.5, 1.0], &[7.0, 2.0]);
        let out = solve(&s, 0, &near).unwrap();
        let w = out.witness().expect("sat");
        assert!(build_encoding(&s, 0, &near).unwrap().recheck(w));
        let far = Polytope::from_box(&[6.5, 1.0], &[7.0, 2.0]);
        assert_eq!(solve(&s, 0, &far).unwrap(), SmcOutcome::Unsat);
    }

    #[test]
    fn contradictory_target_is_unsat() {
        let s = make_demo_scenario(2, &[4, 4], 0).unwrap();
        let empty = Polytope::new(vec![
            Halfspace::new(vec![1.0, 0.0], 0.0),
            Halfspace::new(vec![-1.0, 0.0], -1.0),
        ]);
        assert_eq!(solve(&s, 1, &empty).unwrap(), SmcOutcome::Unsat);
    }

    #[test]
    fn encoding_shape() {
        let s = make_demo_scenario(1, &[2], 0).unwrap();
        let target = s.cell(0).region.clone();
        let p = build_encoding(&s, 0, &target).unwrap();
        let shape = p.shape();
        assert_eq!(shape.booleans, 2);
        assert_eq!(shape.dynamics, 2);
        assert_eq!(shape.layer, 2);
        assert_eq!(shape.output, 2);
        assert_eq!(shape.source, 4);
        assert_eq!(shape.target, 4);
        assert_eq!(shape.variables, 2 + 2 + 2 + 2 + 2);
        let dump = p.dump();
        assert!(dump.contains("relax.h>=t[1]"));
    }

    #[test]
    fn forced_activation_rejects_all_off() {
        // first-layer bias keeps every neuron positive on cell 0
        let mut s = make_demo_scenario(2, &[2], 0).unwrap();
        let hidden = Layer {
            weights: Matrix::identity(2),
            bias: vec![1.0, 1.0],
        };
        let out = Layer {
            weights: Matrix::zeros(2, 2),
            bias: vec![0.0, 0.0],
        };
        s.controller = ReluNetwork::new(vec![hidden, out]).unwrap();
        let target = s.workspace.domain.clone();
        let p = build_encoding(&s, 0, &target).unwrap();
        assert!(!p.check_pattern(&[false, false]).unwrap());
        assert!(p.check_pattern(&[true, true]).unwrap());
    }

    #[test]
    fn witness_pattern_replays() {
        let s = make_demo_scenario(3, &[4, 4], 0).unwrap();
        for j in 0..s.cell_count() {
            let target = geometry::augmented_set(&s.cell(j).region, 0.3, &s.dynamics.sigma).unwrap();
            let p = build_encoding(&s, 4, &target).unwrap();
            if let SmcOutcome::Sat(w) = p.solve().unwrap() {
                assert!(p.recheck(&w));
                assert!(p.check_pattern(&w.pattern).unwrap());
            }
        }
    }

    #[test]
    fn tiny_budget_is_unknown() {
        let s = make_demo_scenario(3, &[4, 4], 0).unwrap();
        let target = Polytope::from_box(&[9.9, 9.9], &[10.0, 10.0]);
        let p = build_encoding(&s, 0, &target).unwrap();
        let (out, stats) = p.solve_with_budget(0);
        assert_eq!(out, SmcOutcome::Unknown);
        assert!(out.maybe_sat());
        assert_eq!(stats.nodes, 0);
        assert_eq!(p.solve().unwrap(), SmcOutcome::Unsat);
    }
}
