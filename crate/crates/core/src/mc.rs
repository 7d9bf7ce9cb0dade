//! Monte-Carlo ground truth for the closed loop.
//!
//! Every trajectory draws from its own ChaCha stream `(seed, index)`, so
//! results do not depend on thread scheduling and trajectories are
//! independent. Initial states are drawn uniformly from a cell by
//! hit-and-run started at the Chebyshev center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::geometry::{self, dot, Polytope};
use crate::graph::{NodeId, TransitionGraph};
use crate::scenario::Scenario;
use crate::Result;

pub const BURN_IN: usize = 50;

/// Generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Visited states; simulation stops at the first unsafe state.
    pub states: Vec<Vec<f64>>,
    /// Index of the first unsafe state, if any.
    pub unsafe_hit: Option<usize>,
    pub seed: u64,
    pub stream: u64,
}

/// Samples one noisy closed-loop trajectory of `k` steps from `x0`.
/// A state outside every cell counts as unsafe.
pub fn simulate(s: &Scenario, x0: &[f64], k: usize, seed: u64, stream: u64) -> Trajectory {
    let mut rng = stream_rng(seed, stream);
    simulate_with(s, x0, k, &mut rng, seed, stream)
}

fn simulate_with(
    s: &Scenario,
    x0: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
    seed: u64,
    stream: u64,
) -> Trajectory {
    let mut states = vec![x0.to_vec()];
    let mut unsafe_hit = None;
    let mut x = x0.to_vec();
    for t in 0..=k {
        let cell = s.locate(&x);
        if cell.is_none() || s.workspace.is_unsafe(&x) {
            unsafe_hit = Some(t);
            break;
        }
        if t == k {
            break;
        }
        let mut next = s.mean_step_in(&x, cell.expect("checked"));
        for (v, sd) in next.iter_mut().zip(&s.dynamics.sigma) {
            let w: f64 = rng.sample(StandardNormal);
            *v += sd * w;
        }
        states.push(next.clone());
        x = next;
    }
    Trajectory {
        states,
        unsafe_hit,
        seed,
        stream,
    }
}

/// One hit-and-run chain of `steps` moves inside `poly`, from `start`.
pub fn hit_and_run<R: Rng>(poly: &Polytope, start: &[f64], steps: usize, rng: &mut R) -> Vec<f64> {
    let n = start.len();
    let mut x = start.to_vec();
    for _ in 0..steps {
        let mut d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&d, &d).sqrt();
        if norm == 0.0 {
            continue;
        }
        d.iter_mut().for_each(|v| *v /= norm);
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for h in &poly.halfspaces {
            let ad = dot(&h.a, &d);
            let slack = h.b - dot(&h.a, &x);
            if ad > 1e-15 {
                hi = hi.min(slack / ad);
            } else if ad < -1e-15 {
                lo = lo.max(slack / ad);
            }
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            continue;
        }
        let lambda = lo + (hi - lo) * rng.random::<f64>();
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += lambda * di;
        }
    }
    x
}

/// A uniform-ish initial state in `cell`, from its own stream.
pub fn sample_in_cell(s: &Scenario, cell: usize, seed: u64, stream: u64) -> Result<Vec<f64>> {
    let region = &s.cell(cell).region;
    let (center, _) = geometry::chebyshev_center(region, s.state_dim())?;
    let mut rng = stream_rng(seed, stream);
    Ok(hit_and_run(region, &center, BURN_IN, &mut rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub cell: NodeId,
    pub horizon: usize,
    pub n_samples: usize,
    pub hit_fraction: f64,
    pub stddev: f64,
}

impl McEstimate {
    fn new(cell: usize, horizon: usize, hits: usize, n: usize) -> Self {
        let f = hits as f64 / n as f64;
        McEstimate {
            cell: NodeId::Cell(cell),
            horizon,
            n_samples: n,
            hit_fraction: f,
            stddev: binomial_stddev(f, n),
        }
    }

    /// Whether `bound` is consistent with this estimate at `sigmas` standard
    /// deviations.
    pub fn within(&self, bound: f64, sigmas: f64) -> bool {
        self.hit_fraction <= bound + sigmas * self.stddev
    }
}

pub fn binomial_stddev(f: f64, n: usize) -> f64 {
    (f * (1.0 - f) / n as f64).sqrt()
}

/// Fraction of `n` trajectories from uniform states in `cell` that hit the
/// unsafe set within `k` steps.
pub fn estimate_true_pk(s: &Scenario, cell: usize, k: usize, n: usize, seed: u64) -> Result<McEstimate> {
    Ok(estimate_pk_curve(s, cell, k, n, seed)?.pop().expect("k + 1 entries"))
}

/// As [`estimate_true_pk`] for every horizon `0..=k`, from one batch of
/// trajectories.
pub fn estimate_pk_curve(
    s: &Scenario,
    cell: usize,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    let region = &s.cell(cell).region;
    let (center, _) = geometry::chebyshev_center(region, s.state_dim())?;
    let hits: Vec<Option<usize>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let x0 = hit_and_run(region, &center, BURN_IN, &mut rng);
            simulate_with(s, &x0, k, &mut rng, seed, i).unsafe_hit
        })
        .collect();
    Ok((0..=k)
        .map(|h| {
            let count = hits.iter().filter(|t| t.is_some_and(|t| t <= h)).count();
            McEstimate::new(cell, h, count, n)
        })
        .collect())
}

/// Empirical one-step transition frequencies from the mean state `x` of
/// cell `cell`: into every cell, into every unsafe piece, and into the
/// union of the pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFrequencies {
    pub cells: Vec<f64>,
    pub pieces: Vec<f64>,
    pub unsafe_any: f64,
    pub draws: usize,
}

pub fn step_frequencies<R: Rng>(
    s: &Scenario,
    x: &[f64],
    cell: usize,
    draws: usize,
    rng: &mut R,
) -> StepFrequencies {
    let mean = s.mean_step_in(x, cell);
    let pieces = s.workspace.unsafe_pieces();
    let mut cells = vec![0usize; s.cell_count()];
    let mut piece_hits = vec![0usize; pieces.len()];
    let mut any = 0usize;
    let mut y = vec![0.0; mean.len()];
    for _ in 0..draws {
        for ((yi, m), sd) in y.iter_mut().zip(&mean).zip(&s.dynamics.sigma) {
            let w: f64 = rng.sample(StandardNormal);
            *yi = m + sd * w;
        }
        for (j, c) in s.partition.iter().enumerate() {
            if c.region.halfspaces.iter().all(|h| h.value(&y) <= 0.0) {
                cells[j] += 1;
            }
        }
        let mut hit = false;
        for (k, p) in pieces.iter().enumerate() {
            if p.halfspaces.iter().all(|h| h.value(&y) <= 0.0) {
                piece_hits[k] += 1;
                hit = true;
            }
        }
        any += hit as usize;
    }
    let f = |c: usize| c as f64 / draws as f64;
    StepFrequencies {
        cells: cells.into_iter().map(f).collect(),
        pieces: piece_hits.into_iter().map(f).collect(),
        unsafe_any: f(any),
        draws,
    }
}

/// Worst observed frequency for one edge across sampled source states.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCheck {
    pub source: usize,
    pub target: NodeId,
    /// For sink edges, the piece index; `None` for the union.
    pub piece: Option<usize>,
    pub bound: f64,
    pub max_fraction: f64,
    pub stddev: f64,
}

impl EdgeCheck {
    pub fn violated(&self, sigmas: f64) -> bool {
        self.max_fraction > self.bound + sigmas * self.stddev
    }
}

/// Checks every outgoing edge of `cell` against `states` sampled source
/// states with `draws` noise draws each. One batch of draws per state
/// serves all targets.
pub fn check_transitions(
    s: &Scenario,
    g: &TransitionGraph,
    cell: usize,
    states: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<EdgeCheck>> {
    let region = &s.cell(cell).region;
    let (center, _) = geometry::chebyshev_center(region, s.state_dim())?;
    let freqs: Vec<StepFrequencies> = (0..states as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let x = hit_and_run(region, &center, BURN_IN, &mut rng);
            step_frequencies(s, &x, cell, draws, &mut rng)
        })
        .collect();
    let worst = |f: &dyn Fn(&StepFrequencies) -> f64| freqs.iter().map(f).fold(0.0, f64::max);
    let mut out = Vec::new();
    for j in 0..s.cell_count() {
        let m = worst(&|f| f.cells[j]);
        out.push(EdgeCheck {
            source: cell,
            target: NodeId::Cell(j),
            piece: None,
            bound: g.edges[cell][j],
            max_fraction: m,
            stddev: binomial_stddev(m, draws),
        });
    }
    for k in 0..g.pieces[cell].len() {
        let m = worst(&|f| f.pieces[k]);
        out.push(EdgeCheck {
            source: cell,
            target: NodeId::UnsafeSink,
            piece: Some(k),
            bound: g.pieces[cell][k],
            max_fraction: m,
            stddev: binomial_stddev(m, draws),
        });
    }
    let m = worst(&|f| f.unsafe_any);
    out.push(EdgeCheck {
        source: cell,
        target: NodeId::UnsafeSink,
        piece: None,
        bound: g.sink[cell],
        max_fraction: m,
        stddev: binomial_stddev(m, draws),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::make_demo_scenario;

    #[test]
    fn same_seed_same_trajectory() {
        let s = make_demo_scenario(3, &[4], 0).unwrap();
        let a = simulate(&s, &[1.0, 1.0], 20, 9, 3);
        let b = simulate(&s, &[1.0, 1.0], 20, 9, 3);
        assert_eq!(a, b);
        let c = simulate(&s, &[1.0, 1.0], 20, 9, 4);
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn zero_step_hits_only_unsafe_starts() {
        let s = make_demo_scenario(5, &[4], 0).unwrap();
        assert_eq!(estimate_true_pk(&s, 0, 0, 50, 1).unwrap().hit_fraction, 0.0);
        // cell 13 is the obstacle [6,8]x[4,6]
        assert_eq!(estimate_true_pk(&s, 13, 0, 50, 1).unwrap().hit_fraction, 1.0);
    }

    #[test]
    fn hit_and_run_stays_inside() {
        let poly = Polytope::from_box(&[0.0, 0.0], &[1.0, 2.0]);
        let mut rng = stream_rng(5, 0);
        for _ in 0..200 {
            let x = hit_and_run(&poly, &[0.5, 1.0], 10, &mut rng);
            assert!(poly.contains(&x, 1e-12));
        }
    }
}
