//! Horizon propagation of reach-unsafe probability bounds over a transition
//! graph.
//!
//! `P̂_k(i)` bounds the probability that a trajectory starting anywhere in
//! cell `i` enters the unsafe set within `k` steps. The sink is absorbing
//! with bound 1, and cells that overlap the unsafe set stay at 1.
//!
//! Two tightenings are available on top of the plain weighted sum:
//!
//! * merging: two neighbor nodes whose augmented sets at level `p` are
//!   disjoint can share one edge, since no mean lies in both; a merge is kept
//!   only when it lowers the owner's weighted sum;
//! * normalization: true outgoing probabilities sum to 1, so edge mass above 1
//!   is taken off the neighbors with the highest bounds.

use std::fmt;
use std::io;
use std::str::FromStr;

use rayon::prelude::*;

use crate::geometry::{self, cell_unsafe_overlap, Polytope};
use crate::graph::{NodeId, TransitionGraph};
use crate::scenario::Scenario;
use crate::{Error, Result};

pub const DEFAULT_MERGE_P: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Naive,
    Merge,
    Tpn,
    MergeTpn,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Naive, Mode::Merge, Mode::Tpn, Mode::MergeTpn];

    pub fn merges(self) -> bool {
        matches!(self, Mode::Merge | Mode::MergeTpn)
    }

    pub fn normalizes(self) -> bool {
        matches!(self, Mode::Tpn | Mode::MergeTpn)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Naive => "naive",
            Mode::Merge => "merge",
            Mode::Tpn => "tpn",
            Mode::MergeTpn => "merge+tpn",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Mode::Naive),
            "merge" => Ok(Mode::Merge),
            "tpn" => Ok(Mode::Tpn),
            "merge+tpn" => Ok(Mode::MergeTpn),
            other => Err(Error::validation(
                "mode",
                format!("unknown mode {other:?} (naive, merge, tpn, merge+tpn)"),
            )),
        }
    }
}

/// One merge performed while propagating to horizon `horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecord {
    pub owner: NodeId,
    pub members: (NodeId, NodeId),
    pub merged: NodeId,
    pub new_bound: f64,
    pub horizon: usize,
}

/// Per-horizon bounds for every cell; `values[k][i] = P̂_k(cell i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyBounds {
    pub mode: Mode,
    pub merge_p: f64,
    pub values: Vec<Vec<f64>>,
    pub merges: Vec<MergeRecord>,
}

impl SafetyBounds {
    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }

    pub fn at(&self, k: usize, node: &NodeId) -> f64 {
        match node {
            NodeId::Cell(i) => self.values[k][*i],
            NodeId::Merged(m) => m.iter().map(|i| self.values[k][*i]).fold(0.0, f64::max),
            NodeId::UnsafeSink => 1.0,
        }
    }

    /// CSV with header `cell_id,k,bound`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cell_id", "k", "bound"])?;
        for (k, row) in self.values.iter().enumerate() {
            for (i, b) in row.iter().enumerate() {
                out.write_record([i.to_string(), k.to_string(), b.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the table written by [`SafetyBounds::write_csv`].
    pub fn read_csv<R: io::Read>(r: R, mode: Mode, merge_p: f64) -> Result<SafetyBounds> {
        let mut rows: Vec<(usize, usize, f64)> = Vec::new();
        for rec in csv::Reader::from_reader(r).records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = || Error::Parse(format!("bad bounds row {:?}", rec));
            rows.push((
                field(0).parse().map_err(|_| bad())?,
                field(1).parse().map_err(|_| bad())?,
                field(2).parse().map_err(|_| bad())?,
            ));
        }
        let cells = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let horizon = rows.iter().map(|r| r.1).max().unwrap_or(0);
        let mut values = vec![vec![f64::NAN; cells]; horizon + 1];
        for (i, k, b) in rows {
            values[k][i] = b;
        }
        if values.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::Parse("bounds table is incomplete".into()));
        }
        Ok(SafetyBounds {
            mode,
            merge_p,
            values,
            merges: Vec::new(),
        })
    }
}

/// `P̂_0`: 1 for cells sharing interior with the unsafe set, else 0.
pub fn init_p0(s: &Scenario) -> Vec<f64> {
    unsafe_cells(s)
        .into_iter()
        .map(|u| if u { 1.0 } else { 0.0 })
        .collect()
}

fn unsafe_cells(s: &Scenario) -> Vec<bool> {
    s.partition
        .par_iter()
        .map(|c| cell_unsafe_overlap(&c.region, &s.workspace))
        .collect()
}

/// Weighted sum over `(edge bound, neighbor bound)` pairs, capped at 1.
pub fn naive_value(neighbors: &[(f64, f64)]) -> f64 {
    neighbors.iter().map(|(e, b)| e * b).sum::<f64>().clamp(0.0, 1.0)
}

/// Normalized sum over `(edge bound, neighbor bound)` pairs.
///
/// Neighbors are ordered by ascending bound (ties by position). With suffix
/// masses `S(m) = Σ_{i>m} e_i`, the cut `m̂` is the smallest position with
/// `S(m̂) <= 1`; the result is `Σ_{i>m̂} e_i b_i + (1 − S(m̂)) b_m̂`. When the
/// total mass is at most 1 this is the plain weighted sum.
pub fn tpn_value(neighbors: &[(f64, f64)]) -> f64 {
    let naive = naive_value(neighbors);
    let total: f64 = neighbors.iter().map(|n| n.0).sum();
    if total <= 1.0 {
        return naive;
    }
    let mut order: Vec<usize> = (0..neighbors.len()).collect();
    order.sort_by(|&a, &b| neighbors[a].1.total_cmp(&neighbors[b].1).then(a.cmp(&b)));
    // suffix[m] = mass of order[m..]
    let mut suffix = vec![0.0; order.len() + 1];
    for m in (0..order.len()).rev() {
        suffix[m] = suffix[m + 1] + neighbors[order[m]].0;
    }
    // 0-based cut: order[cut] is the partially weighted neighbor
    let cut = (0..order.len())
        .find(|&m| suffix[m + 1] <= 1.0)
        .expect("the empty suffix has mass 0");
    let tail: f64 = order[cut + 1..]
        .iter()
        .map(|&i| neighbors[i].0 * neighbors[i].1)
        .sum();
    let value = tail + (1.0 - suffix[cut + 1]) * neighbors[order[cut]].1;
    value.clamp(0.0, 1.0).min(naive)
}

/// `P̂_{k+1}` of every cell by the plain weighted sum.
pub fn naive_step(g: &TransitionGraph, prev: &[f64]) -> Vec<f64> {
    (0..g.cell_count())
        .map(|i| naive_value(&plain_neighbors(g, prev, i)))
        .collect()
}

/// `P̂_{k+1}` of every cell by the normalized sum.
pub fn tpn_step(g: &TransitionGraph, prev: &[f64]) -> Vec<f64> {
    (0..g.cell_count())
        .map(|i| tpn_value(&plain_neighbors(g, prev, i)))
        .collect()
}

fn plain_neighbors(g: &TransitionGraph, prev: &[f64], i: usize) -> Vec<(f64, f64)> {
    g.neighbors(i)
        .map(|(node, e)| {
            let b = match node {
                NodeId::Cell(j) => prev[j],
                _ => 1.0,
            };
            (e, b)
        })
        .collect()
}

/// Pairwise emptiness of augmented cells at one level, computed once.
#[derive(Debug, Clone)]
pub struct Disjointness {
    p: f64,
    table: Vec<Vec<bool>>,
}

impl Disjointness {
    pub fn new(s: &Scenario, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 0.5) {
            return Err(Error::InvalidProbability(p));
        }
        let n = s.state_dim();
        let augmented: Vec<Polytope> = s
            .partition
            .iter()
            .map(|c| geometry::augmented_set(&c.region, p, &s.dynamics.sigma))
            .collect::<Result<_>>()?;
        let boxes: Vec<Vec<(f64, f64)>> = augmented
            .iter()
            .map(|a| a.bounding_box(n))
            .collect::<Result<_>>()?;
        let count = augmented.len();
        let rows: Vec<Vec<bool>> = (0..count)
            .into_par_iter()
            .map(|i| {
                (0..count)
                    .map(|j| {
                        if i == j {
                            return false;
                        }
                        let separated = boxes[i]
                            .iter()
                            .zip(&boxes[j])
                            .any(|(a, b)| a.1 < b.0 || b.1 < a.0);
                        separated || geometry::is_empty_intersection(&augmented[i], &augmented[j])
                    })
                    .collect()
            })
            .collect();
        Ok(Disjointness { p, table: rows })
    }

    pub fn level(&self) -> f64 {
        self.p
    }

    pub fn disjoint(&self, i: usize, j: usize) -> bool {
        self.table[i][j]
    }

    fn all_disjoint(&self, a: &[usize], b: &[usize]) -> bool {
        a.iter().all(|&i| b.iter().all(|&j| self.table[i][j]))
    }
}

/// A neighbor of an owner during merging: member cells, edge bound and
/// the node's current safety bound.
#[derive(Debug, Clone, PartialEq)]
struct Slot {
    members: Vec<usize>,
    edge: f64,
    bound: f64,
}

impl Slot {
    fn node(&self) -> NodeId {
        if self.members.len() == 1 {
            NodeId::Cell(self.members[0])
        } else {
            NodeId::Merged(self.members.clone())
        }
    }
}

/// Edge bound of the union of two neighbor nodes whose member augmented
/// sets are pairwise disjoint. A mean lies in at most one member's augmented
/// set; every other member is then reached with probability below `p`.
pub fn merged_edge_bound(edge_a: f64, size_a: usize, edge_b: f64, size_b: usize, p: f64) -> f64 {
    let (na, nb) = (size_a as f64, size_b as f64);
    (edge_a + nb * p)
        .max(edge_b + na * p)
        .max((na + nb) * p)
        .min(1.0)
}

/// Gate for two singleton neighbors: returns the merged edge
/// bound if merging lowers the weighted sum.
pub fn merge_gain(edge_a: f64, bound_a: f64, edge_b: f64, bound_b: f64, p: f64) -> Option<f64> {
    let merged = merged_edge_bound(edge_a, 1, edge_b, 1, p);
    let before = edge_a * bound_a + edge_b * bound_b;
    (merged * bound_a.max(bound_b) < before).then_some(merged)
}

/// Merges neighbors of `owner` greedily (largest gain first) until no
/// admissible pair remains. Returns the final neighbor list (sink last) and
/// the merges performed.
pub fn merge_pass(
    g: &TransitionGraph,
    owner: usize,
    prev: &[f64],
    disjoint: &Disjointness,
    horizon: usize,
) -> (Vec<(NodeId, f64, f64)>, Vec<MergeRecord>) {
    let p = disjoint.level();
    let mut slots: Vec<Slot> = g.edges[owner]
        .iter()
        .enumerate()
        .map(|(j, &e)| Slot {
            members: vec![j],
            edge: e,
            bound: prev[j],
        })
        .collect();
    let mut records = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize, f64)> = None;
        for a in 0..slots.len() {
            for b in a + 1..slots.len() {
                let (sa, sb) = (&slots[a], &slots[b]);
                let merged = merged_edge_bound(sa.edge, sa.members.len(), sb.edge, sb.members.len(), p);
                let before = sa.edge * sa.bound + sb.edge * sb.bound;
                let gain = before - merged * sa.bound.max(sb.bound);
                if gain <= 0.0 || best.is_some_and(|bst| bst.0 >= gain) {
                    continue;
                }
                if disjoint.all_disjoint(&sa.members, &sb.members) {
                    best = Some((gain, a, b, merged));
                }
            }
        }
        let Some((_, a, b, merged)) = best else { break };
        let sb = slots.remove(b);
        let sa = slots.remove(a);
        let mut members = sa.members.clone();
        members.extend(&sb.members);
        members.sort_unstable();
        let slot = Slot {
            members,
            edge: merged,
            bound: sa.bound.max(sb.bound),
        };
        records.push(MergeRecord {
            owner: NodeId::Cell(owner),
            members: (sa.node(), sb.node()),
            merged: slot.node(),
            new_bound: merged,
            horizon,
        });
        slots.push(slot);
    }
    let mut out: Vec<(NodeId, f64, f64)> = slots.into_iter().map(|s| (s.node(), s.edge, s.bound)).collect();
    out.push((NodeId::UnsafeSink, g.sink[owner], 1.0));
    (out, records)
}

/// Propagates bounds to horizon `horizon`.
pub fn verify(
    g: &TransitionGraph,
    s: &Scenario,
    horizon: usize,
    merge_p: f64,
    mode: Mode,
) -> Result<SafetyBounds> {
    verify_with_prior(g, s, horizon, merge_p, mode, None)
}

/// As [`verify`], additionally capping each cell's bound at `prior[k][i]`
/// (bounds known to hold for a region containing the cell).
pub fn verify_with_prior(
    g: &TransitionGraph,
    s: &Scenario,
    horizon: usize,
    merge_p: f64,
    mode: Mode,
    prior: Option<&[Vec<f64>]>,
) -> Result<SafetyBounds> {
    if g.cell_count() != s.cell_count() {
        return Err(Error::Dimension(format!(
            "graph has {} cells, scenario {}",
            g.cell_count(),
            s.cell_count()
        )));
    }
    let disjoint = if mode.merges() {
        Some(Disjointness::new(s, merge_p)?)
    } else {
        None
    };
    let pinned = unsafe_cells(s);
    let mut p0: Vec<f64> = pinned.iter().map(|u| if *u { 1.0 } else { 0.0 }).collect();
    if let Some(prior) = prior {
        cap(&mut p0, &prior[0]);
    }
    let mut values = vec![p0];
    let mut merges = Vec::new();
    for k in 1..=horizon {
        let prev = &values[k - 1];
        let step: Vec<(f64, Vec<MergeRecord>)> = (0..g.cell_count())
            .into_par_iter()
            .map(|i| {
                if pinned[i] {
                    return (1.0, Vec::new());
                }
                let (list, recs) = match &disjoint {
                    Some(d) => {
                        let (nodes, recs) = merge_pass(g, i, prev, d, k);
                        (nodes.into_iter().map(|(_, e, b)| (e, b)).collect(), recs)
                    }
                    None => (plain_neighbors(g, prev, i), Vec::new()),
                };
                let v = if mode.normalizes() {
                    tpn_value(&list)
                } else {
                    naive_value(&list)
                };
                (v, recs)
            })
            .collect();
        let mut next = Vec::with_capacity(step.len());
        for (v, recs) in step {
            next.push(v);
            merges.extend(recs);
        }
        if let Some(prior) = prior {
            if let Some(row) = prior.get(k) {
                cap(&mut next, row);
            }
        }
        values.push(next);
    }
    Ok(SafetyBounds {
        mode,
        merge_p,
        values,
        merges,
    })
}

fn cap(values: &mut [f64], prior: &[f64]) {
    for (v, p) in values.iter_mut().zip(prior) {
        *v = v.min(*p);
    }
}
