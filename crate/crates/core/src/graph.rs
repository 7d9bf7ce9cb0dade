//! Upper-bound transition graph over partition cells.
//!
//! Each edge weight bounds the worst-case one-step probability of moving
//! from a source cell into a target region. Bounds come from bisection on
//! the chance level `q`: if no state in the source cell has its successor
//! mean inside the target's augmented set at level `q`, every state reaches
//! the target with probability below `q`.
//!
//! The unsafe set is split into convex pieces (each obstacle and the
//! complement of each domain halfspace). A cell's edge to the unsafe sink is
//! the sum of its per-piece bounds, capped at 1.

use std::fmt;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::geometry::{self, Polytope};
use crate::lp;
use crate::scenario::{interval_affine, Scenario};
use crate::smc::{self, Witness};
use crate::{Error, Result};

pub const FORMAT_VERSION: &str = "1";
pub const DEFAULT_DQ: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Cell(usize),
    /// Sorted member cells, at least two.
    Merged(Vec<usize>),
    UnsafeSink,
}

impl NodeId {
    /// The cell index of a single-cell node.
    pub fn index(&self) -> Option<usize> {
        match self {
            NodeId::Cell(i) => Some(*i),
            _ => None,
        }
    }
}

impl std::str::FromStr for NodeId {
    type Err = Error;

    /// Parses `cell:i`, a bare index, or `sink`.
    fn from_str(text: &str) -> Result<Self> {
        let t = text.trim();
        if t == "sink" {
            return Ok(NodeId::UnsafeSink);
        }
        let idx = t.strip_prefix("cell:").unwrap_or(t);
        idx.parse()
            .map(NodeId::Cell)
            .map_err(|_| Error::Parse(format!("bad node id `{text}`")))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Cell(i) => write!(f, "cell:{i}"),
            NodeId::Merged(m) => {
                let parts: Vec<String> = m.iter().map(usize::to_string).collect();
                write!(f, "merged:{}", parts.join("+"))
            }
            NodeId::UnsafeSink => write!(f, "sink"),
        }
    }
}

/// Number of bisection steps for precision `dq`.
pub fn bisection_steps(dq: f64) -> Result<u32> {
    if !(dq > 0.0 && dq < 1.0) {
        return Err(Error::InvalidProbability(dq));
    }
    let mut k = 0;
    let mut width = 1.0_f64;
    while width > dq {
        width *= 0.5;
        k += 1;
    }
    Ok(k)
}

/// Smallest bound bisection can return for precision `dq`: `2^-K`.
pub fn q_floor(dq: f64) -> Result<f64> {
    Ok(0.5_f64.powi(bisection_steps(dq)? as i32))
}

/// The queried levels and verdicts of one bisection.
#[derive(Debug, Clone, PartialEq)]
pub struct BisectionTrace {
    /// `(q, maybe_sat)` in query order.
    pub steps: Vec<(f64, bool)>,
    pub q_l: f64,
    pub q_r: f64,
}

/// Bisection on `q ∈ (0, 1)`: `q_r` moves down on Unsat, `q_l` up on Sat,
/// until `q_r − q_l <= dq`.
pub fn bisect(dq: f64, mut maybe_sat: impl FnMut(f64) -> Result<bool>) -> Result<BisectionTrace> {
    bisection_steps(dq)?;
    let (mut q_l, mut q_r) = (0.0_f64, 1.0_f64);
    let mut steps = Vec::new();
    while q_r - q_l > dq {
        let q = 0.5 * (q_l + q_r);
        let sat = maybe_sat(q)?;
        steps.push((q, sat));
        if sat {
            q_l = q;
        } else {
            q_r = q;
        }
    }
    Ok(BisectionTrace { steps, q_l, q_r })
}

/// Bisection for source cell `cell` against `target`, with SMC queries on
/// the augmented target. Unknown verdicts count as satisfiable.
pub fn estimate_bound(
    s: &Scenario,
    cell: usize,
    target: &Polytope,
    dq: f64,
) -> Result<BisectionTrace> {
    bisect(dq, |q| {
        Ok(smc::query_augmented(s, cell, target, q)?.maybe_sat())
    })
}

/// Interval box containing every successor mean of states in `cell`.
pub fn reach_box(s: &Scenario, cell: usize) -> Result<Vec<(f64, f64)>> {
    let n = s.state_dim();
    let bx = s.cell(cell).region.bounding_box(n)?;
    let lo: Vec<f64> = bx.iter().map(|b| b.0).collect();
    let hi: Vec<f64> = bx.iter().map(|b| b.1).collect();
    let meas = &s.cell(cell).measurement;
    let (dl, dh) = interval_affine(&meas.matrix, &meas.offset, &lo, &hi);
    let (ul, uh) = s.controller.forward_interval(&dl, &dh);
    let (al, ah) = interval_affine(&s.dynamics.a, &vec![0.0; n], &lo, &hi);
    let (bl, bh) = interval_affine(&s.dynamics.b, &vec![0.0; n], &ul, &uh);
    Ok((0..n).map(|r| (al[r] + bl[r], ah[r] + bh[r])).collect())
}

/// Cheap pre-filter: true when the reach box misses the target's augmented
/// set at the bisection floor. Then every SMC query of the bisection is
/// Unsat and the bound is exactly the floor.
pub fn prune_test(s: &Scenario, cell: usize, target: &Polytope, dq: f64) -> Result<bool> {
    let floor = q_floor(dq)?;
    let reach = reach_box(s, cell)?;
    let lo: Vec<f64> = reach.iter().map(|r| r.0).collect();
    let hi: Vec<f64> = reach.iter().map(|r| r.1).collect();
    let aug = geometry::augmented_set(target, floor, &s.dynamics.sigma)?;
    let both = Polytope::from_box(&lo, &hi).intersect(&aug);
    Ok(!lp::is_feasible(&both.feasibility_lp(s.state_dim()))?)
}

/// Pruned-or-bisected bound for one source/target pair.
pub fn pair_bound(s: &Scenario, cell: usize, target: &Polytope, dq: f64) -> Result<(f64, bool)> {
    if prune_test(s, cell, target, dq)? {
        return Ok((q_floor(dq)?, true));
    }
    Ok((estimate_bound(s, cell, target, dq)?.q_r, false))
}

/// Per-piece unsafe bounds and their capped sum.
pub fn unsafe_bound(s: &Scenario, cell: usize, dq: f64) -> Result<(f64, Vec<f64>)> {
    let pieces = s.workspace.unsafe_pieces();
    let bounds = pieces
        .iter()
        .map(|p| pair_bound(s, cell, p, dq).map(|b| b.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((sink_bound(&bounds), bounds))
}

fn sink_bound(pieces: &[f64]) -> f64 {
    pieces.iter().sum::<f64>().min(1.0)
}

/// Work counters from a graph build.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub pairs: usize,
    pub pruned: usize,
}

/// Dense upper-bound transition graph. Every cell has an edge to every cell
/// (possibly at the floor bound) and to the sink.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGraph {
    pub scenario_hash: String,
    pub dq: f64,
    pub q_floor: f64,
    /// `edges[i][j]` bounds the step from cell `i` into cell `j`.
    pub edges: Vec<Vec<f64>>,
    /// `pieces[i][k]` bounds the step from cell `i` into unsafe piece `k`.
    pub pieces: Vec<Vec<f64>>,
    /// `sink[i] = min(1, Σ_k pieces[i][k])`.
    pub sink: Vec<f64>,
}

impl TransitionGraph {
    pub fn cell_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, from: usize, to: &NodeId) -> Option<f64> {
        match to {
            NodeId::Cell(j) => self.edges.get(from)?.get(*j).copied(),
            NodeId::UnsafeSink => self.sink.get(from).copied(),
            NodeId::Merged(_) => None,
        }
    }

    /// Outgoing edges of cell `i`: every cell, then the sink.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.edges[i]
            .iter()
            .enumerate()
            .map(|(j, b)| (NodeId::Cell(j), *b))
            .chain(std::iter::once((NodeId::UnsafeSink, self.sink[i])))
    }

    /// Sum of outgoing bounds of cell `i`, sink included.
    /// Fails unless the graph was built for `s`.
    pub fn check_scenario(&self, s: &Scenario) -> Result<()> {
        if self.scenario_hash != s.content_hash() {
            return Err(Error::GraphFormat(
                "graph was built for a different scenario".into(),
            ));
        }
        Ok(())
    }

    pub fn out_mass(&self, i: usize) -> f64 {
        self.edges[i].iter().sum::<f64>() + self.sink[i]
    }

    pub fn set_pieces(&mut self, i: usize, pieces: Vec<f64>) {
        self.sink[i] = sink_bound(&pieces);
        self.pieces[i] = pieces;
    }
}

/// Row of a graph for one source cell: bounds to every cell, then to every
/// unsafe piece.
fn build_row(s: &Scenario, i: usize, dq: f64) -> Result<(Vec<f64>, Vec<f64>, BuildStats)> {
    let mut stats = BuildStats::default();
    let mut row = Vec::with_capacity(s.cell_count());
    for j in 0..s.cell_count() {
        let (b, pruned) = pair_bound(s, i, &s.cell(j).region, dq)?;
        stats.pairs += 1;
        stats.pruned += pruned as usize;
        row.push(b);
    }
    let mut pieces = Vec::new();
    for p in s.workspace.unsafe_pieces() {
        let (b, pruned) = pair_bound(s, i, &p, dq)?;
        stats.pairs += 1;
        stats.pruned += pruned as usize;
        pieces.push(b);
    }
    Ok((row, pieces, stats))
}

/// Builds the full graph with `jobs` worker threads (0 = rayon default).
pub fn build_graph(s: &Scenario, dq: f64, jobs: usize) -> Result<(TransitionGraph, BuildStats)> {
    let floor = q_floor(dq)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::validation("jobs", e.to_string()))?;
    let rows: Vec<Result<_>> = pool.install(|| {
        (0..s.cell_count())
            .into_par_iter()
            .map(|i| build_row(s, i, dq))
            .collect()
    });
    let mut g = TransitionGraph {
        scenario_hash: s.content_hash(),
        dq,
        q_floor: floor,
        edges: Vec::new(),
        pieces: Vec::new(),
        sink: Vec::new(),
    };
    let mut stats = BuildStats::default();
    let mut failures = Vec::new();
    for (i, r) in rows.into_iter().enumerate() {
        match r {
            Ok((row, pieces, st)) => {
                stats.pairs += st.pairs;
                stats.pruned += st.pruned;
                g.sink.push(sink_bound(&pieces));
                g.edges.push(row);
                g.pieces.push(pieces);
            }
            Err(e) => failures.push(format!("cell {i}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::GraphFormat(format!(
            "graph build failed for {} source cells: {}",
            failures.len(),
            failures.join("; ")
        )));
    }
    Ok((g, stats))
}

/// Bisection range `(q_l, q_r)` recorded for a bound: `q_l` is the last
/// level at which the query was satisfiable, or 0.
pub fn bracket(bound: f64, floor: f64) -> (f64, f64) {
    ((bound - floor).max(0.0), bound)
}

/// Re-solves the query for edge `cell → target` at its last satisfiable
/// level and returns the witness.
pub fn edge_witness(
    s: &Scenario,
    g: &TransitionGraph,
    cell: usize,
    target: &Polytope,
    bound: f64,
) -> Result<Witness> {
    let (q_l, _) = bracket(bound, g.q_floor);
    if q_l <= 0.0 {
        return Err(Error::FloorEdge {
            source_cell: cell,
            target: "target".into(),
        });
    }
    match smc::query_augmented(s, cell, target, q_l)? {
        smc::SmcOutcome::Sat(w) => Ok(w),
        _ => Err(Error::StaleEdge {
            source_cell: cell,
            target: format!("level {q_l}"),
        }),
    }
}

// ---------------------------------------------------------------------------
// document format

fn body_text(g: &TransitionGraph) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for (i, row) in g.edges.iter().enumerate() {
        for (j, b) in row.iter().enumerate() {
            let _ = writeln!(out, "E {i} {j} {b}");
        }
    }
    for (i, row) in g.pieces.iter().enumerate() {
        for (k, b) in row.iter().enumerate() {
            let _ = writeln!(out, "U {i} {k} {b}");
        }
    }
    out
}

/// Serializes the graph: a header, a `---` line, then one line per edge.
pub fn save_graph(g: &TransitionGraph) -> String {
    let body = body_text(g);
    let checksum = hex::encode(Sha256::digest(body.as_bytes()));
    let pieces = g.pieces.first().map_or(0, Vec::len);
    format!(
        "nnsafe-graph {FORMAT_VERSION}\n\
         tool nnsafe {}\n\
         scenario_hash {}\n\
         dq {}\n\
         q_floor {}\n\
         cells {}\n\
         pieces {pieces}\n\
         checksum {checksum}\n\
         ---\n{body}",
        env!("CARGO_PKG_VERSION"),
        g.scenario_hash,
        g.dq,
        g.q_floor,
        g.cell_count(),
    )
}

pub fn load_graph(text: &str) -> Result<TransitionGraph> {
    let (header, body) = text
        .split_once("---\n")
        .ok_or_else(|| Error::GraphFormat("missing header separator".into()))?;
    let mut fields = std::collections::HashMap::new();
    let mut lines = header.lines();
    let magic = lines
        .next()
        .ok_or_else(|| Error::GraphFormat("empty document".into()))?;
    let version = magic
        .strip_prefix("nnsafe-graph ")
        .ok_or_else(|| Error::GraphFormat("not a graph document".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    for line in lines {
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| Error::GraphFormat(format!("bad header line {line:?}")))?;
        fields.insert(k, v);
    }
    let field = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::GraphFormat(format!("missing header field {k}")))
    };
    if hex::encode(Sha256::digest(body.as_bytes())) != field("checksum")? {
        return Err(Error::Checksum);
    }
    let num = |k: &str| -> Result<f64> {
        field(k)?
            .parse()
            .map_err(|_| Error::GraphFormat(format!("bad number in {k}")))
    };
    let count = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| Error::GraphFormat(format!("bad count in {k}")))
    };
    let cells = count("cells")?;
    let npieces = count("pieces")?;
    let mut g = TransitionGraph {
        scenario_hash: field("scenario_hash")?.to_string(),
        dq: num("dq")?,
        q_floor: num("q_floor")?,
        edges: vec![vec![f64::NAN; cells]; cells],
        pieces: vec![vec![f64::NAN; npieces]; cells],
        sink: Vec::new(),
    };
    for line in body.lines() {
        let parts: Vec<&str> = line.split(' ').collect();
        let bad = || Error::GraphFormat(format!("bad edge line {line:?}"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let i: usize = parts[1].parse().map_err(|_| bad())?;
        let j: usize = parts[2].parse().map_err(|_| bad())?;
        let b: f64 = parts[3].parse().map_err(|_| bad())?;
        let slot = match parts[0] {
            "E" => g.edges.get_mut(i).and_then(|r| r.get_mut(j)),
            "U" => g.pieces.get_mut(i).and_then(|r| r.get_mut(j)),
            _ => None,
        }
        .ok_or_else(bad)?;
        *slot = b;
    }
    if g.edges.iter().chain(&g.pieces).flatten().any(|b| b.is_nan()) {
        return Err(Error::GraphFormat("missing edges".into()));
    }
    g.sink = g.pieces.iter().map(|p| sink_bound(p)).collect();
    Ok(g)
}
