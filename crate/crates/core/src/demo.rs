//! Generated 2-D single-integrator scenarios with a hand-built ReLU
//! controller implementing a saturated go-to-goal law.
//!
//! Per axis the first hidden layer computes `ReLU(k e + U)` and
//! `ReLU(k e − U)` with `e = goal − x`; the output takes their difference
//! minus `U`, which is exactly `clamp(k e, −U, U)`. If the first layer has
//! fewer than four neurons only the lower saturation is built,
//! `max(k e, −U)`. Deeper layers pass these values through unchanged. Any
//! remaining neurons get seeded random incoming weights and zero outgoing
//! weights, so they shape the activation space without changing the law.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Polytope;
use crate::scenario::{
    Layer, Matrix, Measurement, PartitionCell, ReluNetwork, Scenario, SystemDynamics, Workspace,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    /// Cells per axis.
    pub grid: usize,
    /// Hidden layer widths.
    pub widths: Vec<usize>,
    pub seed: u64,
    /// The domain is `[0, size]²`.
    pub size: f64,
    pub goal: [f64; 2],
    pub gain: f64,
    pub umax: f64,
    /// Noise standard deviation on both axes.
    pub sigma: f64,
    /// Axis-aligned obstacles as `(lo, hi)` corners.
    pub obstacles: Vec<([f64; 2], [f64; 2])>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            grid: 5,
            widths: vec![4, 4],
            seed: 7,
            size: 10.0,
            goal: [3.0, 5.0],
            gain: 0.5,
            umax: 1.0,
            sigma: 0.3,
            obstacles: vec![([6.0, 4.0], [8.0, 6.0])],
        }
    }
}

impl DemoConfig {
    pub fn build(&self) -> Result<Scenario> {
        if self.grid == 0 {
            return Err(Error::validation("demo", "grid must be at least 1"));
        }
        if self.widths.is_empty() || self.widths.iter().any(|w| *w == 0) {
            return Err(Error::validation("demo", "layer widths must be positive"));
        }
        if self.widths[0] < 2 {
            return Err(Error::validation(
                "demo",
                "the first hidden layer needs at least two neurons",
            ));
        }
        if !(self.size > 0.0 && self.gain >= 0.0 && self.umax > 0.0 && self.sigma > 0.0) {
            return Err(Error::validation(
                "demo",
                "size, umax and sigma must be positive and gain non-negative",
            ));
        }
        let controller = self.controller()?;
        let n = 2;
        let dynamics = SystemDynamics {
            a: Matrix::identity(n),
            b: Matrix::identity(n),
            sigma: vec![self.sigma; n],
        };
        let domain = Polytope::from_box(&[0.0, 0.0], &[self.size, self.size]);
        let obstacles = self
            .obstacles
            .iter()
            .map(|(lo, hi)| Polytope::from_box(lo, hi))
            .collect();
        let workspace = Workspace::new(domain, obstacles, vec![0, 1], n);
        let h = self.size / self.grid as f64;
        let mut partition = Vec::with_capacity(self.grid * self.grid);
        for r in 0..self.grid {
            for c in 0..self.grid {
                let lo = [c as f64 * h, r as f64 * h];
                // exact outer edges so the cells cover the domain
                let hi = [
                    if c + 1 == self.grid { self.size } else { (c + 1) as f64 * h },
                    if r + 1 == self.grid { self.size } else { (r + 1) as f64 * h },
                ];
                partition.push(PartitionCell {
                    id: partition.len(),
                    region: Polytope::from_box(&lo, &hi),
                    measurement: Measurement::identity(n),
                });
            }
        }
        Scenario::new(dynamics, controller, workspace, partition)
    }

    fn controller(&self) -> Result<ReluNetwork> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (k, u) = (self.gain, self.umax);
        let two_sided = self.widths[0] >= 4;
        let used = if two_sided { 4 } else { 2 };
        if self.widths.iter().any(|w| *w < used) {
            return Err(Error::validation(
                "demo",
                format!("every hidden layer needs at least {used} neurons"),
            ));
        }
        let mut layers = Vec::new();
        let mut prev = 2;
        for (l, &width) in self.widths.iter().enumerate() {
            let mut w = Matrix::zeros(width, prev);
            let mut b = vec![0.0; width];
            if l == 0 {
                for axis in 0..2 {
                    if two_sided {
                        w.set(2 * axis, axis, -k);
                        b[2 * axis] = k * self.goal[axis] + u;
                        w.set(2 * axis + 1, axis, -k);
                        b[2 * axis + 1] = k * self.goal[axis] - u;
                    } else {
                        w.set(axis, axis, -k);
                        b[axis] = k * self.goal[axis] + u;
                    }
                }
            } else {
                for i in 0..used {
                    w.set(i, i, 1.0);
                }
            }
            for i in used..width {
                for j in 0..prev {
                    w.set(i, j, rng.random_range(-1.0..1.0));
                }
                b[i] = rng.random_range(-1.0..1.0);
            }
            layers.push(Layer { weights: w, bias: b });
            prev = width;
        }
        let mut out = Matrix::zeros(2, prev);
        for axis in 0..2 {
            if two_sided {
                out.set(axis, 2 * axis, 1.0);
                out.set(axis, 2 * axis + 1, -1.0);
            } else {
                out.set(axis, axis, 1.0);
            }
        }
        layers.push(Layer {
            weights: out,
            bias: vec![-u; 2],
        });
        ReluNetwork::new(layers)
    }
}

/// Demo scenario with the default geometry and the given grid and widths.
pub fn make_demo_scenario(grid: usize, widths: &[usize], seed: u64) -> Result<Scenario> {
    DemoConfig {
        grid,
        widths: widths.to_vec(),
        seed,
        ..DemoConfig::default()
    }
    .build()
}
