//! Witness-guided cell splitting.
//!
//! The witness of an edge's last satisfiable query is a state whose
//! successor mean lands deepest in the target. Cutting the source cell with
//! a hyperplane through the witness, perpendicular to its motion, and then
//! sliding the cut away from it leaves one sub-cell that no longer contains
//! the worst-case states, so its bound to the target can drop.

use rayon::prelude::*;

use crate::geometry::{self, dot, Hyperplane, Polytope};
use crate::graph::{self, NodeId, TransitionGraph};
use crate::safety::SafetyBounds;
use crate::scenario::{PartitionCell, Scenario};
use crate::{Error, Result};

pub const DEFAULT_STEPS: usize = 4;

/// Hyperplane through `x` with unit normal along `x_next − x`.
pub fn propose_hyperplane(x: &[f64], x_next: &[f64]) -> Result<Hyperplane> {
    let dir: Vec<f64> = x_next.iter().zip(x).map(|(a, b)| a - b).collect();
    let norm = dot(&dir, &dir).sqrt();
    if !(norm > 1e-12) {
        return Err(Error::StationaryWitness);
    }
    let normal: Vec<f64> = dir.iter().map(|v| v / norm).collect();
    let offset = dot(&normal, x);
    Ok(Hyperplane { normal, offset })
}

/// Hyperplane halving the cell's bounding box along its longest axis.
pub fn longest_axis_hyperplane(cell: &Polytope, dim: usize) -> Result<Hyperplane> {
    let bx = cell.bounding_box(dim)?;
    let (axis, (lo, hi)) = bx
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| (a.1 .1 - a.1 .0).total_cmp(&(b.1 .1 - b.1 .0)).then(b.0.cmp(&a.0)))
        .ok_or(Error::EmptyPolytope)?;
    let mut normal = vec![0.0; dim];
    normal[axis] = 1.0;
    Ok(Hyperplane {
        normal,
        offset: 0.5 * (lo + hi),
    })
}

/// The region an edge points at: a cell, or for the sink the unsafe piece
/// with the largest bound.
pub fn target_region(s: &Scenario, g: &TransitionGraph, cell: usize, target: &NodeId) -> Result<(Polytope, f64)> {
    match target {
        NodeId::Cell(j) => Ok((s.cell(*j).region.clone(), g.edges[cell][*j])),
        NodeId::UnsafeSink => {
            let pieces = s.workspace.unsafe_pieces();
            let (k, b) = g.pieces[cell]
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .ok_or_else(|| Error::validation("refine", "scenario has no unsafe pieces"))?;
            Ok((pieces[k].clone(), b))
        }
        NodeId::Merged(_) => Err(Error::validation("refine", "merged nodes are not edge targets")),
    }
}

/// Witness of the edge `cell → target` at its last satisfiable level.
pub fn find_witness(
    s: &Scenario,
    g: &TransitionGraph,
    cell: usize,
    target: &NodeId,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (region, bound) = target_region(s, g, cell, target)?;
    let w = graph::edge_witness(s, g, cell, &region, bound).map_err(|e| match e {
        Error::StaleEdge { source_cell, .. } => Error::StaleEdge {
            source_cell,
            target: target.to_string(),
        },
        Error::FloorEdge { source_cell, .. } => Error::FloorEdge {
            source_cell,
            target: target.to_string(),
        },
        other => other,
    })?;
    Ok((w.x, w.x_next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementPlan {
    pub cell: NodeId,
    pub edge_target: NodeId,
    pub witness_x: Vec<f64>,
    pub witness_x_next: Vec<f64>,
    pub hyperplane: Hyperplane,
    /// `(offset, bound of the sub-cell away from the witness)`; degenerate
    /// offsets are left out.
    pub translations: Vec<(f64, f64)>,
    /// Offset of the committed cut.
    pub chosen: f64,
    /// Whether the witness was stationary and the longest-axis cut was used.
    pub fallback: bool,
}

/// The partition and graph after one split, plus bookkeeping.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub scenario: Scenario,
    pub graph: TransitionGraph,
    pub plan: RefinementPlan,
    /// `parent[i]` is the pre-split index of new cell `i`.
    pub parent: Vec<usize>,
}

impl Refinement {
    /// Per-horizon caps for the new cells, taken from the parent cells.
    pub fn prior(&self, old: &SafetyBounds) -> Vec<Vec<f64>> {
        old.values
            .iter()
            .map(|row| self.parent.iter().map(|&p| row[p]).collect())
            .collect()
    }
}

/// Splits `cell` against the edge to `target` and recomputes every edge
/// touching the two halves.
pub fn refine_cell(
    s: &Scenario,
    g: &TransitionGraph,
    cell: usize,
    target: &NodeId,
    steps: usize,
) -> Result<Refinement> {
    if steps == 0 {
        return Err(Error::validation("steps", "must be at least 1"));
    }
    let n = s.state_dim();
    let dq = g.dq;
    let (region, _) = target_region(s, g, cell, target)?;
    let (x, x_next) = find_witness(s, g, cell, target)?;
    let poly = &s.cell(cell).region;

    let (hyperplane, fallback) = match propose_hyperplane(&x, &x_next) {
        Ok(h) => (h, false),
        Err(Error::StationaryWitness) => (longest_axis_hyperplane(poly, n)?, true),
        Err(e) => return Err(e),
    };
    // moving towards the side with more room; the sub-cell on that side
    // does not contain the witness
    let (offsets, far_is_above) = if fallback {
        (vec![hyperplane.offset], true)
    } else {
        let hi = poly.support(&hyperplane.normal)?.ok_or(Error::UnboundedPolytope)?;
        let neg: Vec<f64> = hyperplane.normal.iter().map(|v| -v).collect();
        let lo = -poly.support(&neg)?.ok_or(Error::UnboundedPolytope)?;
        let w = hyperplane.offset;
        let (room, sign) = if hi - w >= w - lo { (hi - w, 1.0) } else { (w - lo, -1.0) };
        let offsets = (0..steps)
            .map(|k| w + sign * k as f64 * room / steps as f64)
            .collect();
        (offsets, sign > 0.0)
    };

    let candidates: Vec<Option<(f64, f64, Polytope, Polytope)>> = offsets
        .par_iter()
        .map(|&offset| -> Result<Option<(f64, f64, Polytope, Polytope)>> {
            let h = Hyperplane {
                normal: hyperplane.normal.clone(),
                offset,
            };
            let (below, above) = match geometry::split(poly, &h) {
                Ok(parts) => parts,
                Err(Error::DegenerateSplit) => return Ok(None),
                Err(e) => return Err(e),
            };
            let (near, far) = if far_is_above { (below, above) } else { (above, below) };
            let trial = with_region(s, cell, far.clone());
            let (bound, _) = graph::pair_bound(&trial, cell, &region, dq)?;
            Ok(Some((offset, bound, near, far)))
        })
        .collect::<Result<_>>()?;
    let mut translations = Vec::new();
    let mut best: Option<(f64, f64, Polytope, Polytope)> = None;
    for c in candidates.into_iter().flatten() {
        translations.push((c.0, c.1));
        if best.as_ref().is_none_or(|b| c.1 < b.1) {
            best = Some(c);
        }
    }
    let Some((chosen, _, near, far)) = best else {
        return Err(Error::NoRefinement);
    };

    let old = s.cell_count();
    let mut partition = s.partition.clone();
    let measurement = partition[cell].measurement.clone();
    partition[cell].region = near;
    partition.push(PartitionCell {
        id: old,
        region: far,
        measurement,
    });
    let scenario = Scenario::new(
        s.dynamics.clone(),
        s.controller.clone(),
        s.workspace.clone(),
        partition,
    )?;
    let graph = recompute_touching(&scenario, g, &[cell, old])?;
    let mut parent: Vec<usize> = (0..old).collect();
    parent.push(cell);
    Ok(Refinement {
        scenario,
        graph,
        plan: RefinementPlan {
            cell: NodeId::Cell(cell),
            edge_target: target.clone(),
            witness_x: x,
            witness_x_next: x_next,
            hyperplane,
            translations,
            chosen,
            fallback,
        },
        parent,
    })
}

/// A copy of `s` whose cell `cell` has region `region`. The result is not a
/// valid partition; it only serves single-cell queries.
fn with_region(s: &Scenario, cell: usize, region: Polytope) -> Scenario {
    let mut t = s.clone();
    t.partition[cell].region = region;
    t
}

/// New graph for `s` in which every edge touching one of `changed` is
/// recomputed and all others are copied from `g` (indices `>= g`'s cell
/// count are new).
fn recompute_touching(s: &Scenario, g: &TransitionGraph, changed: &[usize]) -> Result<TransitionGraph> {
    let p = s.cell_count();
    let dq = g.dq;
    let pieces = s.workspace.unsafe_pieces();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..p)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, Vec<f64>)> {
            let full = changed.contains(&i);
            let mut row = Vec::with_capacity(p);
            for j in 0..p {
                let b = if full || changed.contains(&j) {
                    graph::pair_bound(s, i, &s.cell(j).region, dq)?.0
                } else {
                    g.edges[i][j]
                };
                row.push(b);
            }
            let pc = if full {
                pieces
                    .iter()
                    .map(|pc| graph::pair_bound(s, i, pc, dq).map(|b| b.0))
                    .collect::<Result<Vec<_>>>()?
            } else {
                g.pieces[i].clone()
            };
            Ok((row, pc))
        })
        .collect::<Result<_>>()?;
    let mut out = TransitionGraph {
        scenario_hash: s.content_hash(),
        dq,
        q_floor: g.q_floor,
        edges: Vec::with_capacity(p),
        pieces: Vec::with_capacity(p),
        sink: Vec::with_capacity(p),
    };
    for (i, (row, pc)) in rows.into_iter().enumerate() {
        out.edges.push(row);
        out.pieces.push(Vec::new());
        out.sink.push(0.0);
        out.set_pieces(i, pc);
    }
    Ok(out)
}

/// Picks the edge maximizing `P̂(i, j) · P̂_k(j) · r(i)`, with `r` the
/// Chebyshev radius of cell `i`. Cells pinned at 1 by overlap with the
/// unsafe set, and edges at the floor bound, are skipped; a sink edge counts
/// as at the floor when its largest piece is. Ties go to the lowest cell,
/// then the lowest target (sink last).
pub fn select_target(
    s: &Scenario,
    g: &TransitionGraph,
    bounds: &SafetyBounds,
    k: usize,
) -> Result<Option<(usize, NodeId)>> {
    let n = s.state_dim();
    let k = k.min(bounds.horizon());
    let mut best: Option<(f64, usize, NodeId)> = None;
    for i in 0..g.cell_count() {
        if geometry::cell_unsafe_overlap(&s.cell(i).region, &s.workspace) {
            continue;
        }
        let (_, radius) = geometry::chebyshev_center(&s.cell(i).region, n)?;
        let top_piece = g.pieces[i].iter().cloned().fold(0.0, f64::max);
        for (node, e) in g.neighbors(i) {
            // a sink edge is split against its largest piece
            let witness_level = if node == NodeId::UnsafeSink { top_piece } else { e };
            if witness_level <= g.q_floor {
                continue;
            }
            let score = e * bounds.at(k, &node) * radius;
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, i, node));
            }
        }
    }
    Ok(best.map(|(_, i, node)| (i, node)))
}
