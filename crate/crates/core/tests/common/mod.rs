//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use nnsafe::geometry::{chebyshev_center, split, Halfspace, Hyperplane, Polytope};
use nnsafe::mc::hit_and_run;
use nnsafe::lp::EPS_STRICT;
use nnsafe::scenario::{
    Layer, Matrix, Measurement, PartitionCell, ReluNetwork, Scenario, SystemDynamics, Workspace,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Vertex margins at or above this count as feasible.
pub const ORACLE_FEASIBLE: f64 = -1e-9;
/// Vertex margins below this count as infeasible; between the two the
/// oracle abstains.
pub const ORACLE_INFEASIBLE: f64 = -1e-6;

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| uniform(rng, -scale, scale)).collect())
        .collect();
    Matrix::from_rows(&data, cols).unwrap()
}

pub fn random_network(rng: &mut ChaCha8Rng, input: usize, widths: &[usize], output: usize) -> ReluNetwork {
    let mut layers = Vec::new();
    let mut prev = input;
    for &w in widths.iter().chain(std::iter::once(&output)) {
        layers.push(Layer {
            weights: random_matrix(rng, w, prev, 1.0),
            bias: (0..w).map(|_| uniform(rng, -0.5, 0.5)).collect(),
        });
        prev = w;
    }
    ReluNetwork::new(layers).unwrap()
}

/// Hidden widths for `neurons` neurons: one layer up to 5, else two.
pub fn widths_for(neurons: usize) -> Vec<usize> {
    if neurons <= 5 {
        vec![neurons]
    } else {
        vec![neurons - neurons / 2, neurons / 2]
    }
}

/// Planar scenario on `[-1, 1]²` cut into two cells by a random line, with
/// a random network, a random source cell and a random target box that is
/// reachable roughly half the time.
pub fn random_instance(seed: u64, neurons: usize) -> (Scenario, usize, Polytope) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let controller = random_network(&mut rng, 2, &widths_for(neurons), 2);
    let mut a = random_matrix(&mut rng, 2, 2, 0.3);
    for i in 0..2 {
        a.set(i, i, a.get(i, i) + 1.0);
    }
    let dynamics = SystemDynamics {
        a,
        b: random_matrix(&mut rng, 2, 2, 0.5),
        sigma: vec![0.2, 0.2],
    };
    let domain = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]);
    let workspace = Workspace::new(
        domain.clone(),
        vec![Polytope::from_box(&[0.9, 0.9], &[1.0, 1.0])],
        vec![0, 1],
        2,
    );
    let angle = uniform(&mut rng, 0.0, std::f64::consts::TAU);
    let cut = Hyperplane {
        normal: vec![angle.cos(), angle.sin()],
        offset: uniform(&mut rng, -0.5, 0.5),
    };
    let (below, above) = split(&domain, &cut).unwrap();
    let cells = [below, above]
        .into_iter()
        .enumerate()
        .map(|(id, region)| PartitionCell {
            id,
            region,
            measurement: Measurement::identity(2),
        })
        .collect();
    let s = Scenario::new(dynamics, controller, workspace, cells).unwrap();
    let source = (rng.random::<f64>() < 0.5) as usize;
    let (center, _) = chebyshev_center(&s.cell(source).region, 2).unwrap();
    let x = hit_and_run(&s.cell(source).region, &center, 20, &mut rng);
    let y = s.mean_step_in(&x, source);
    let shift = uniform(&mut rng, 0.0, 1.5);
    let angle = uniform(&mut rng, 0.0, std::f64::consts::TAU);
    let half = [uniform(&mut rng, 0.05, 0.4), uniform(&mut rng, 0.05, 0.4)];
    let c = [y[0] + shift * angle.cos(), y[1] + shift * angle.sin()];
    let target = Polytope::from_box(&[c[0] - half[0], c[1] - half[1]], &[c[0] + half[0], c[1] + half[1]]);
    (s, source, target)
}

/// Constraints `a·x <= b` on the state of a planar scenario cell under a
/// fixed activation pattern, built by direct layer-by-layer composition.
pub fn pattern_constraints(s: &Scenario, cell: usize, target: &Polytope, pattern: &[bool]) -> Vec<([f64; 2], f64)> {
    let meas = &s.cell(cell).measurement;
    // current layer output as M x + m
    let mut m_rows: Vec<[f64; 2]> = (0..meas.matrix.rows())
        .map(|r| [meas.matrix.get(r, 0), meas.matrix.get(r, 1)])
        .collect();
    let mut m_off = meas.offset.clone();
    let mut out = Vec::new();
    for h in &s.cell(cell).region.halfspaces {
        out.push(([h.a[0], h.a[1]], h.b));
    }
    let mut idx = 0;
    for layer in s.controller.hidden_layers() {
        let mut rows = Vec::new();
        let mut offs = Vec::new();
        for r in 0..layer.weights.rows() {
            let mut a = [0.0; 2];
            let mut c = layer.bias[r];
            for k in 0..layer.weights.cols() {
                let w = layer.weights.get(r, k);
                a[0] += w * m_rows[k][0];
                a[1] += w * m_rows[k][1];
                c += w * m_off[k];
            }
            if pattern[idx] {
                out.push(([-a[0], -a[1]], c));
                rows.push(a);
                offs.push(c);
            } else {
                out.push((a, -EPS_STRICT - c));
                rows.push([0.0; 2]);
                offs.push(0.0);
            }
            idx += 1;
        }
        m_rows = rows;
        m_off = offs;
    }
    let o = s.controller.output_layer();
    let mut u_rows = Vec::new();
    let mut u_off = Vec::new();
    for r in 0..o.weights.rows() {
        let mut a = [0.0; 2];
        let mut c = o.bias[r];
        for k in 0..o.weights.cols() {
            let w = o.weights.get(r, k);
            a[0] += w * m_rows[k][0];
            a[1] += w * m_rows[k][1];
            c += w * m_off[k];
        }
        u_rows.push(a);
        u_off.push(c);
    }
    let (da, db) = (&s.dynamics.a, &s.dynamics.b);
    let mut next = Vec::new();
    for r in 0..2 {
        let mut a = [da.get(r, 0), da.get(r, 1)];
        let mut c = 0.0;
        for k in 0..db.cols() {
            let w = db.get(r, k);
            a[0] += w * u_rows[k][0];
            a[1] += w * u_rows[k][1];
            c += w * u_off[k];
        }
        next.push((a, c));
    }
    for h in &target.halfspaces {
        let a = [
            h.a[0] * next[0].0[0] + h.a[1] * next[1].0[0],
            h.a[0] * next[0].0[1] + h.a[1] * next[1].0[1],
        ];
        out.push((a, h.b - h.a[0] * next[0].1 - h.a[1] * next[1].1));
    }
    out
}

/// Largest normalized minimum slack over all vertices of the arrangement.
/// A non-empty bounded polygon has a vertex with every slack non-negative,
/// so the result is zero up to rounding; an empty one gives a negative
/// value. Boundedness comes from the cell rows.
pub fn vertex_margin(cons: &[([f64; 2], f64)]) -> f64 {
    let mut rows = Vec::new();
    for (a, b) in cons {
        let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
        if n < 1e-12 {
            if *b < ORACLE_INFEASIBLE {
                return -1.0;
            }
            continue;
        }
        rows.push(([a[0] / n, a[1] / n], b / n));
    }
    let mut best = f64::NEG_INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (a, b) = rows[i];
            let (c, d) = rows[j];
            let det = a[0] * c[1] - a[1] * c[0];
            if det.abs() < 1e-12 {
                continue;
            }
            let x = [(b * c[1] - a[1] * d) / det, (a[0] * d - b * c[0]) / det];
            let slack = rows
                .iter()
                .map(|(r, s)| s - (r[0] * x[0] + r[1] * x[1]))
                .fold(f64::INFINITY, f64::min);
            best = best.max(slack);
        }
    }
    best
}

/// Brute-force verdict over all `2^N` patterns: `Some(true)` if some pattern
/// is feasible, `Some(false)` if all are clearly infeasible, `None` if the
/// closest call falls between the two thresholds.
pub fn brute_force(s: &Scenario, cell: usize, target: &Polytope) -> Option<bool> {
    let n = s.controller.neuron_count();
    let mut ambiguous = false;
    for bits in 0..(1u32 << n) {
        let pattern: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        let m = vertex_margin(&pattern_constraints(s, cell, target, &pattern));
        if m >= ORACLE_FEASIBLE {
            return Some(true);
        }
        if m >= ORACLE_INFEASIBLE {
            ambiguous = true;
        }
    }
    if ambiguous {
        None
    } else {
        Some(false)
    }
}

/// Halfspaces of a random bounded 2-D polytope candidate: the box
/// `[-2, 2]²` plus `extra` random cuts.
pub fn random_cuts(rng: &mut ChaCha8Rng, extra: usize) -> Polytope {
    let mut p = Polytope::from_box(&[-2.0, -2.0], &[2.0, 2.0]);
    for _ in 0..extra {
        let t = uniform(rng, 0.0, std::f64::consts::TAU);
        p = p.with(Halfspace::new(vec![t.cos(), t.sin()], uniform(rng, -1.5, 1.5)));
    }
    p
}
