//! Problem instance: plant, controller, workspace and partition, plus the
//! TOML scenario document they are loaded from.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{self, Halfspace, Polytope, EPS_INTERIOR};
use crate::{Error, Result};

/// Tolerance for membership checks on states handed to the mean step.
pub const EPS_MEMBER: f64 = 1e-7;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from a list of rows; `cols` is used when `rows` is empty.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let cols = rows.first().map_or(cols, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| geometry::dot(self.row(r), x))
            .collect()
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a != 0.0 {
                    for j in 0..other.cols {
                        out.data[i * other.cols + j] += a * other.get(k, j);
                    }
                }
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `x⁺ = A x + B u + w`, `w ~ N(0, diag(sigma²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemDynamics {
    pub a: Matrix,
    pub b: Matrix,
    /// Per-axis noise standard deviation.
    pub sigma: Vec<f64>,
}

impl SystemDynamics {
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn mean_step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let ax = self.a.mul_vec(x);
        let bu = self.b.mul_vec(u);
        ax.iter().zip(&bu).map(|(p, q)| p + q).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.weights.mul_vec(x);
        for (v, b) in t.iter_mut().zip(&self.bias) {
            *v += b;
        }
        t
    }
}

/// Fully connected ReLU network. Every layer but the last is followed by a
/// ReLU; the last layer is the affine output map.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNetwork {
    layers: Vec<Layer>,
}

impl ReluNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::validation(
                "controller",
                "needs at least one hidden layer and an output layer",
            ));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.rows() != layer.bias.len() {
                return Err(Error::validation(
                    format!("controller layer {l}"),
                    format!(
                        "weight rows {} do not match bias length {}",
                        layer.weights.rows(),
                        layer.bias.len()
                    ),
                ));
            }
            if layer.weights.rows() == 0 {
                return Err(Error::validation(
                    format!("controller layer {l}"),
                    "layer has no neurons",
                ));
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(
                    format!("controller layer {l}"),
                    "non-finite weight",
                ));
            }
            if l > 0 && layers[l - 1].weights.rows() != layer.weights.cols() {
                return Err(Error::validation(
                    format!("controller layer {l}"),
                    format!(
                        "expects {} inputs but previous layer has {} neurons",
                        layer.weights.cols(),
                        layers[l - 1].weights.rows()
                    ),
                ));
            }
        }
        Ok(ReluNetwork { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn hidden_layers(&self) -> &[Layer] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn output_layer(&self) -> &Layer {
        self.layers.last().expect("validated non-empty")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.output_layer().weights.rows()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden_layers().iter().map(|l| l.bias.len()).collect()
    }

    pub fn neuron_count(&self) -> usize {
        self.hidden_widths().iter().sum()
    }

    /// Evaluates the network and reports which neurons are active
    /// (pre-activation strictly positive), layer-major.
    pub fn forward(&self, d: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
        if d.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "controller expects {} inputs, got {}",
                self.input_dim(),
                d.len()
            )));
        }
        let mut pattern = Vec::with_capacity(self.neuron_count());
        let mut h = d.to_vec();
        for layer in self.hidden_layers() {
            let t = layer.apply(&h);
            pattern.extend(t.iter().map(|v| *v > 0.0));
            h = t.into_iter().map(|v| v.max(0.0)).collect();
        }
        Ok((self.output_layer().apply(&h), pattern))
    }

    /// The affine map `u = M d + v` the network reduces to when the activation
    /// pattern is fixed.
    pub fn affine_for_pattern(&self, pattern: &[bool]) -> Result<(Matrix, Vec<f64>)> {
        if pattern.len() != self.neuron_count() {
            return Err(Error::Dimension(format!(
                "pattern has {} entries for {} neurons",
                pattern.len(),
                self.neuron_count()
            )));
        }
        let mut m = Matrix::identity(self.input_dim());
        let mut v = vec![0.0; self.input_dim()];
        let mut offset = 0;
        for layer in self.hidden_layers() {
            let mut wm = layer.weights.mul(&m);
            let mut wv = layer.apply(&v);
            for i in 0..layer.bias.len() {
                if !pattern[offset + i] {
                    for j in 0..wm.cols() {
                        wm.set(i, j, 0.0);
                    }
                    wv[i] = 0.0;
                }
            }
            offset += layer.bias.len();
            m = wm;
            v = wv;
        }
        let out = self.output_layer();
        Ok((out.weights.mul(&m), out.apply(&v)))
    }

    /// Interval bounds on the output for inputs in the box `[lo, hi]`.
    pub fn forward_interval(&self, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut l = lo.to_vec();
        let mut h = hi.to_vec();
        let n = self.layers.len();
        for (idx, layer) in self.layers.iter().enumerate() {
            let (nl, nh) = interval_affine(&layer.weights, &layer.bias, &l, &h);
            if idx + 1 < n {
                l = nl.into_iter().map(|v| v.max(0.0)).collect();
                h = nh.into_iter().map(|v| v.max(0.0)).collect();
            } else {
                l = nl;
                h = nh;
            }
        }
        (l, h)
    }
}

/// Image of the box `[lo, hi]` under `x ↦ W x + b`, as a box.
pub(crate) fn interval_affine(
    w: &Matrix,
    b: &[f64],
    lo: &[f64],
    hi: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut out_lo = b.to_vec();
    let mut out_hi = b.to_vec();
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let a = w.get(r, c);
            if a >= 0.0 {
                out_lo[r] += a * lo[c];
                out_hi[r] += a * hi[c];
            } else {
                out_lo[r] += a * hi[c];
                out_hi[r] += a * lo[c];
            }
        }
    }
    (out_lo, out_hi)
}

/// Convex state domain, obstacles in position space and the position
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub domain: Polytope,
    pub obstacles: Vec<Polytope>,
    pub position: Vec<usize>,
    state_dim: usize,
}

impl Workspace {
    pub fn new(
        domain: Polytope,
        obstacles: Vec<Polytope>,
        position: Vec<usize>,
        state_dim: usize,
    ) -> Self {
        Workspace {
            domain,
            obstacles,
            position,
            state_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// An obstacle halfspace from position space lifted to state space.
    fn lift(&self, h: &Halfspace) -> Halfspace {
        let mut a = vec![0.0; self.state_dim];
        for (k, &idx) in self.position.iter().enumerate() {
            a[idx] += h.a[k];
        }
        Halfspace::new(a, h.b)
    }

    pub fn lifted_obstacle(&self, i: usize) -> Polytope {
        Polytope::new(
            self.obstacles[i]
                .halfspaces
                .iter()
                .map(|h| self.lift(h))
                .collect(),
        )
    }

    /// Convex pieces covering the unsafe set: every obstacle, then the closed
    /// complement of every domain halfspace.
    pub fn unsafe_pieces(&self) -> Vec<Polytope> {
        let mut pieces: Vec<Polytope> = (0..self.obstacles.len())
            .map(|i| self.lifted_obstacle(i))
            .collect();
        pieces.extend(
            self.domain
                .halfspaces
                .iter()
                .map(|h| Polytope::new(vec![h.reversed()])),
        );
        pieces
    }

    /// True if the state's position lies in an obstacle or the state is
    /// outside the domain.
    pub fn is_unsafe(&self, x: &[f64]) -> bool {
        if self.domain.halfspaces.iter().any(|h| h.value(x) > 0.0) {
            return true;
        }
        self.obstacles.iter().any(|o| {
            o.halfspaces.iter().all(|h| {
                let v: f64 = self
                    .position
                    .iter()
                    .enumerate()
                    .map(|(k, &idx)| h.a[k] * x[idx])
                    .sum();
                v <= h.b
            })
        })
    }
}

/// `d(x) = C x + c` on one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub matrix: Matrix,
    pub offset: Vec<f64>,
}

impl Measurement {
    pub fn identity(n: usize) -> Self {
        Measurement {
            matrix: Matrix::identity(n),
            offset: vec![0.0; n],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut d = self.matrix.mul_vec(x);
        for (v, c) in d.iter_mut().zip(&self.offset) {
            *v += c;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionCell {
    pub id: usize,
    pub region: Polytope,
    pub measurement: Measurement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub dynamics: SystemDynamics,
    pub controller: ReluNetwork,
    pub workspace: Workspace,
    pub partition: Vec<PartitionCell>,
}

impl Scenario {
    /// Validates every invariant and assembles the scenario.
    pub fn new(
        dynamics: SystemDynamics,
        controller: ReluNetwork,
        workspace: Workspace,
        partition: Vec<PartitionCell>,
    ) -> Result<Self> {
        let s = Scenario {
            dynamics,
            controller,
            workspace,
            partition,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn cell_count(&self) -> usize {
        self.partition.len()
    }

    pub fn cell(&self, i: usize) -> &PartitionCell {
        &self.partition[i]
    }

    /// Index of the first cell containing `x` (closed cells, no tolerance).
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        self.partition
            .iter()
            .position(|c| c.region.halfspaces.iter().all(|h| h.value(x) <= 0.0))
    }

    /// `A x + B f(C x + c)` without the membership check.
    pub fn mean_step_in(&self, x: &[f64], cell: usize) -> Vec<f64> {
        let d = self.partition[cell].measurement.apply(x);
        let (u, _) = self
            .controller
            .forward(&d)
            .expect("measurement dimension validated");
        self.dynamics.mean_step(x, &u)
    }

    /// Noise-free closed-loop successor of `x`, which must lie in `cell`.
    pub fn closed_loop_mean_step(&self, x: &[f64], cell: usize) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "state of length {} for a {}-dimensional system",
                x.len(),
                self.state_dim()
            )));
        }
        if !self.partition[cell].region.contains(x, EPS_MEMBER) {
            return Err(Error::OutsideCell(cell));
        }
        Ok(self.mean_step_in(x, cell))
    }

    fn validate(&self) -> Result<()> {
        let n = self.dynamics.a.rows();
        let dyn_el = "dynamics";
        if n == 0 || self.dynamics.a.cols() != n {
            return Err(Error::validation(dyn_el, "A must be square and non-empty"));
        }
        if self.dynamics.b.rows() != n || self.dynamics.b.cols() == 0 {
            return Err(Error::validation(
                dyn_el,
                format!("B must have {n} rows and at least one column"),
            ));
        }
        if !self.dynamics.a.is_finite() || !self.dynamics.b.is_finite() {
            return Err(Error::validation(dyn_el, "A and B must be finite"));
        }
        if self.dynamics.sigma.len() != n {
            return Err(Error::validation(
                dyn_el,
                format!("sigma must have {n} entries"),
            ));
        }
        if self
            .dynamics
            .sigma
            .iter()
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::validation(dyn_el, "sigma must be positive"));
        }
        if self.controller.output_dim() != self.dynamics.input_dim() {
            return Err(Error::validation(
                "controller",
                format!(
                    "output dimension {} does not match B's {} columns",
                    self.controller.output_dim(),
                    self.dynamics.input_dim()
                ),
            ));
        }
        self.validate_workspace(n)?;
        self.validate_partition(n)
    }

    fn validate_workspace(&self, n: usize) -> Result<()> {
        let ws = &self.workspace;
        if ws.state_dim != n {
            return Err(Error::validation("workspace", "state dimension mismatch"));
        }
        if ws.domain.is_empty_list() {
            return Err(Error::validation("workspace.domain", "no halfspaces"));
        }
        check_halfspaces(&ws.domain, n, "workspace.domain")?;
        match ws.domain.bounding_box(n) {
            Ok(_) => {}
            Err(Error::UnboundedPolytope) => {
                return Err(Error::validation("workspace.domain", "domain is unbounded"))
            }
            Err(Error::EmptyPolytope) => {
                return Err(Error::validation("workspace.domain", "domain is empty"))
            }
            Err(e) => return Err(e),
        }
        let mut seen = vec![false; n];
        if ws.position.is_empty() {
            return Err(Error::validation("workspace.position", "empty projection"));
        }
        for &p in &ws.position {
            if p >= n || seen[p] {
                return Err(Error::validation(
                    "workspace.position",
                    format!("index {p} is out of range or repeated"),
                ));
            }
            seen[p] = true;
        }
        for (i, o) in ws.obstacles.iter().enumerate() {
            let el = format!("workspace.obstacles[{i}]");
            check_halfspaces(o, ws.position.len(), &el)?;
            if o.is_empty_list() {
                return Err(Error::validation(el, "no halfspaces"));
            }
            if !crate::lp::is_feasible(&o.feasibility_lp(ws.position.len()))? {
                return Err(Error::validation(el, "obstacle is empty"));
            }
        }
        Ok(())
    }

    fn validate_partition(&self, n: usize) -> Result<()> {
        if self.partition.is_empty() {
            return Err(Error::validation("partition", "no cells"));
        }
        let q = self.controller.input_dim();
        let mut boxes = Vec::with_capacity(self.partition.len());
        for (i, cell) in self.partition.iter().enumerate() {
            let el = format!("partition[{i}]");
            check_halfspaces(&cell.region, n, &el)?;
            let m = &cell.measurement;
            if m.matrix.cols() != n || m.matrix.rows() != q || m.offset.len() != q {
                return Err(Error::validation(
                    el,
                    format!(
                        "measurement must be {q}x{n} with offset of length {q}, got {}x{} and {}",
                        m.matrix.rows(),
                        m.matrix.cols(),
                        m.offset.len()
                    ),
                ));
            }
            match cell.region.bounding_box(n) {
                Ok(b) => boxes.push(b),
                Err(Error::UnboundedPolytope) => {
                    return Err(Error::validation(el, "cell is unbounded"))
                }
                Err(Error::EmptyPolytope) => return Err(Error::validation(el, "cell is empty")),
                Err(e) => return Err(e),
            }
            for h in &self.workspace.domain.halfspaces {
                let top = cell.region.support(&h.a)?.unwrap_or(f64::INFINITY);
                if top > h.b + 1e-7 * h.norm().max(1.0) {
                    return Err(Error::validation(el, "cell extends outside the domain"));
                }
            }
        }
        for i in 0..self.partition.len() {
            for j in i + 1..self.partition.len() {
                let overlap_box = boxes[i]
                    .iter()
                    .zip(&boxes[j])
                    .all(|(a, b)| a.0 < b.1 && b.0 < a.1);
                if !overlap_box {
                    continue;
                }
                let shrunk = shrink(&self.partition[i].region.intersect(&self.partition[j].region));
                if crate::lp::is_feasible(&shrunk.feasibility_lp(n))? {
                    return Err(Error::validation(
                        format!("partition[{i}]"),
                        format!("overlaps partition[{j}]"),
                    ));
                }
            }
        }
        if !covers(&self.workspace.domain, &self.partition, n) {
            return Err(Error::validation(
                "partition",
                "cells do not cover the domain",
            ));
        }
        Ok(())
    }

    /// Stable content hash of the canonical scenario document.
    pub fn content_hash(&self) -> String {
        let text = self.to_document();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn from_document(text: &str) -> Result<Self> {
        load_scenario(text)
    }

    pub fn to_document(&self) -> String {
        let doc = Document::from_scenario(self);
        let body = toml::to_string(&doc).expect("scenario document serializes");
        format!("# closed-loop scenario; sigma is a per-axis standard deviation\n{body}")
    }
}

fn check_halfspaces(p: &Polytope, dim: usize, el: &str) -> Result<()> {
    for (k, h) in p.halfspaces.iter().enumerate() {
        if h.a.len() != dim {
            return Err(Error::validation(
                el,
                format!("halfspace {k} has dimension {} (expected {dim})", h.a.len()),
            ));
        }
        if h.a.iter().all(|v| *v == 0.0) {
            return Err(Error::validation(el, format!("halfspace {k} has zero normal")));
        }
        if h.a.iter().chain(std::iter::once(&h.b)).any(|v| !v.is_finite()) {
            return Err(Error::validation(el, format!("halfspace {k} is not finite")));
        }
    }
    Ok(())
}

fn shrink(p: &Polytope) -> Polytope {
    Polytope::new(
        p.halfspaces
            .iter()
            .map(|h| Halfspace::new(h.a.clone(), h.b - EPS_INTERIOR * h.norm()))
            .collect(),
    )
}

/// Whether the cells cover the domain, by subtracting cells one at a time
/// and checking that no full-dimensional remainder survives.
fn covers(domain: &Polytope, cells: &[PartitionCell], n: usize) -> bool {
    let full = |p: &Polytope| p.has_interior(n);
    let mut remainder = vec![domain.clone()];
    for cell in cells {
        let mut next = Vec::new();
        for piece in remainder {
            if !full(&piece.intersect(&cell.region)) {
                next.push(piece);
                continue;
            }
            // piece \ cell = ⋃_k (piece ∧ h_1 ∧ … ∧ h_{k-1} ∧ ¬h_k)
            let mut acc = piece.clone();
            for h in &cell.region.halfspaces {
                let part = acc.with(h.reversed());
                if full(&part) {
                    next.push(part);
                }
                acc = acc.with(h.clone());
            }
        }
        remainder = next;
        if remainder.is_empty() {
            return true;
        }
    }
    remainder.is_empty()
}

// ---------------------------------------------------------------------------
// document format

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Stddev,
    Variance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    dynamics: DynamicsDoc,
    controller: ControllerDoc,
    workspace: WorkspaceDoc,
    partition: Vec<CellDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsDoc {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    noise_kind: NoiseKind,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerDoc {
    input_dim: usize,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    #[serde(rename = "w")]
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkspaceDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<Vec<usize>>,
    domain: Vec<Halfspace>,
    #[serde(default)]
    obstacles: Vec<ObstacleDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleDoc {
    halfspaces: Vec<Halfspace>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    halfspaces: Vec<Halfspace>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    c_mat: Option<Vec<Vec<f64>>>,
    #[serde(rename = "c", default, skip_serializing_if = "Option::is_none")]
    c_vec: Option<Vec<f64>>,
}

impl Document {
    fn from_scenario(s: &Scenario) -> Document {
        let n = s.state_dim();
        let identity = Measurement::identity(n);
        Document {
            dynamics: DynamicsDoc {
                a: s.dynamics.a.to_rows(),
                b: s.dynamics.b.to_rows(),
                sigma: s.dynamics.sigma.clone(),
                noise_kind: NoiseKind::Stddev,
            },
            controller: ControllerDoc {
                input_dim: s.controller.input_dim(),
                layers: s
                    .controller
                    .layers()
                    .iter()
                    .map(|l| LayerDoc {
                        w: l.weights.to_rows(),
                        bias: l.bias.clone(),
                    })
                    .collect(),
            },
            workspace: WorkspaceDoc {
                position: Some(s.workspace.position.clone()),
                domain: s.workspace.domain.halfspaces.clone(),
                obstacles: s
                    .workspace
                    .obstacles
                    .iter()
                    .map(|o| ObstacleDoc {
                        halfspaces: o.halfspaces.clone(),
                    })
                    .collect(),
            },
            partition: s
                .partition
                .iter()
                .map(|c| {
                    let is_identity = c.measurement == identity;
                    CellDoc {
                        id: Some(c.id),
                        halfspaces: c.region.halfspaces.clone(),
                        c_mat: (!is_identity).then(|| c.measurement.matrix.to_rows()),
                        c_vec: (!is_identity).then(|| c.measurement.offset.clone()),
                    }
                })
                .collect(),
        }
    }
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario> {
    let doc: Document = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let n = doc.dynamics.a.len();
    let a = Matrix::from_rows(&doc.dynamics.a, n)
        .map_err(|_| Error::validation("dynamics.A", "ragged rows"))?;
    let b = Matrix::from_rows(&doc.dynamics.b, 0)
        .map_err(|_| Error::validation("dynamics.B", "ragged rows"))?;
    let sigma = match doc.dynamics.noise_kind {
        NoiseKind::Stddev => doc.dynamics.sigma.clone(),
        NoiseKind::Variance => {
            if doc.dynamics.sigma.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::validation("dynamics", "sigma must be positive"));
            }
            doc.dynamics.sigma.iter().map(|v| v.sqrt()).collect()
        }
    };
    let mut layers = Vec::with_capacity(doc.controller.layers.len());
    let mut prev = doc.controller.input_dim;
    for (l, ld) in doc.controller.layers.iter().enumerate() {
        let w = Matrix::from_rows(&ld.w, prev)
            .map_err(|_| Error::validation(format!("controller layer {l}"), "ragged rows"))?;
        prev = w.rows();
        layers.push(Layer {
            weights: w,
            bias: ld.bias.clone(),
        });
    }
    if layers
        .first()
        .is_some_and(|l| l.weights.cols() != doc.controller.input_dim)
    {
        return Err(Error::validation(
            "controller layer 0",
            format!(
                "expects {} inputs but input_dim is {}",
                layers[0].weights.cols(),
                doc.controller.input_dim
            ),
        ));
    }
    let controller = ReluNetwork::new(layers)?;
    let position = doc.workspace.position.unwrap_or_else(|| (0..n).collect());
    let workspace = Workspace::new(
        Polytope::new(doc.workspace.domain),
        doc.workspace
            .obstacles
            .into_iter()
            .map(|o| Polytope::new(o.halfspaces))
            .collect(),
        position,
        n,
    );
    let q = controller.input_dim();
    let mut partition = Vec::with_capacity(doc.partition.len());
    for (i, cd) in doc.partition.into_iter().enumerate() {
        let measurement = match (cd.c_mat, cd.c_vec) {
            (None, None) => {
                if q != n {
                    return Err(Error::validation(
                        format!("partition[{i}]"),
                        format!("identity measurement needs input_dim {n}, controller has {q}"),
                    ));
                }
                Measurement::identity(n)
            }
            (c_mat, c_vec) => {
                let matrix = match c_mat {
                    Some(rows) => Matrix::from_rows(&rows, n).map_err(|_| {
                        Error::validation(format!("partition[{i}].C"), "ragged rows")
                    })?,
                    None => Matrix::identity(n),
                };
                let offset = c_vec.unwrap_or_else(|| vec![0.0; matrix.rows()]);
                Measurement { matrix, offset }
            }
        };
        partition.push(PartitionCell {
            id: cd.id.unwrap_or(i),
            region: Polytope::new(cd.halfspaces),
            measurement,
        });
    }
    Scenario::new(
        SystemDynamics { a, b, sigma },
        controller,
        workspace,
        partition,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
[dynamics]
A = [[1.0]]
B = [[1.0]]
sigma = [0.1]
noise_kind = "stddev"

[controller]
input_dim = 1
[[controller.layers]]
W = [[1.0]]
w = [0.0]
[[controller.layers]]
W = [[1.0]]
w = [0.0]

[workspace]
domain = [{ a = [1.0], b = 1.0 }, { a = [-1.0], b = 1.0 }]

[[partition]]
halfspaces = [{ a = [1.0], b = 1.0 }, { a = [-1.0], b = 1.0 }]
"#;

    #[test]
    fn minimal_document_loads() {
        let s = load_scenario(MINIMAL).unwrap();
        assert_eq!(s.cell_count(), 1);
        assert_eq!(s.controller.hidden_layers().len(), 1);
        let again = load_scenario(&s.to_document()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn zero_sigma_is_rejected() {
        let text = MINIMAL.replace("sigma = [0.1]", "sigma = [0.0]");
        let err = load_scenario(&text).unwrap_err();
        assert!(err.to_string().contains("sigma must be positive"), "{err}");
    }

    #[test]
    fn variance_noise_kind_takes_square_root() {
        let text = MINIMAL
            .replace("sigma = [0.1]", "sigma = [4.0]")
            .replace("\"stddev\"", "\"variance\"");
        let s = load_scenario(&text).unwrap();
        assert_eq!(s.dynamics.sigma, vec![2.0]);
    }

    #[test]
    fn malformed_document_is_a_parse_error() {
        assert!(matches!(
            load_scenario("[dynamics\nA = 1"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn overlapping_and_uncovered_partitions_are_rejected() {
        let two = MINIMAL.replace(
            "[[partition]]\nhalfspaces = [{ a = [1.0], b = 1.0 }, { a = [-1.0], b = 1.0 }]",
            "[[partition]]\nhalfspaces = [{ a = [1.0], b = 0.5 }, { a = [-1.0], b = 1.0 }]\n\
             [[partition]]\nhalfspaces = [{ a = [1.0], b = 1.0 }, { a = [-1.0], b = 0.0 }]",
        );
        let err = load_scenario(&two).unwrap_err();
        assert!(err.to_string().contains("overlaps partition[1]"), "{err}");
        let gap = MINIMAL.replace(
            "[[partition]]\nhalfspaces = [{ a = [1.0], b = 1.0 }, { a = [-1.0], b = 1.0 }]",
            "[[partition]]\nhalfspaces = [{ a = [1.0], b = 0.0 }, { a = [-1.0], b = 1.0 }]\n\
             [[partition]]\nhalfspaces = [{ a = [1.0], b = 1.0 }, { a = [-1.0], b = -0.5 }]",
        );
        let err = load_scenario(&gap).unwrap_err();
        assert!(err.to_string().contains("do not cover"), "{err}");
        let split = MINIMAL.replace(
            "[[partition]]\nhalfspaces = [{ a = [1.0], b = 1.0 }, { a = [-1.0], b = 1.0 }]",
            "[[partition]]\nhalfspaces = [{ a = [1.0], b = 0.0 }, { a = [-1.0], b = 1.0 }]\n\
             [[partition]]\nhalfspaces = [{ a = [1.0], b = 1.0 }, { a = [-1.0], b = 0.0 }]",
        );
        assert_eq!(load_scenario(&split).unwrap().cell_count(), 2);
    }

    #[test]
    fn unbounded_cell_is_rejected() {
        let text = MINIMAL.replace(
            "[[partition]]\nhalfspaces = [{ a = [1.0], b = 1.0 }, { a = [-1.0], b = 1.0 }]",
            "[[partition]]\nhalfspaces = [{ a = [1.0], b = 1.0 }]",
        );
        let err = load_scenario(&text).unwrap_err();
        assert!(err.to_string().contains("partition[0]"), "{err}");
    }

    #[test]
    fn layer_dimension_mismatch_names_the_layer() {
        let text = MINIMAL.replacen("W = [[1.0]]\nw = [0.0]\n[[controller.layers]]\nW = [[1.0]]", "W = [[1.0]]\nw = [0.0]\n[[controller.layers]]\nW = [[1.0, 2.0]]", 1);
        let err = load_scenario(&text).unwrap_err();
        assert!(err.to_string().contains("controller layer 1"), "{err}");
    }

    fn net(layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>, input: usize) -> ReluNetwork {
        let mut prev = input;
        ReluNetwork::new(
            layers
                .into_iter()
                .map(|(w, b)| {
                    let m = Matrix::from_rows(&w, prev).unwrap();
                    prev = m.rows();
                    Layer {
                        weights: m,
                        bias: b,
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_neuron_forward() {
        let n = net(
            vec![(vec![vec![1.0]], vec![0.0]), (vec![vec![1.0]], vec![0.0])],
            1,
        );
        assert_eq!(n.forward(&[-1.0]).unwrap(), (vec![0.0], vec![false]));
        assert_eq!(n.forward(&[2.0]).unwrap(), (vec![2.0], vec![true]));
        // ties are inactive
        assert_eq!(n.forward(&[0.0]).unwrap().1, vec![false]);
        assert!(n.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn constant_controller_shifts_state() {
        let mut s = load_scenario(MINIMAL).unwrap();
        s.dynamics = SystemDynamics {
            a: Matrix::identity(1),
            b: Matrix::zeros(1, 1),
            sigma: vec![0.1],
        };
        assert_eq!(s.closed_loop_mean_step(&[0.3], 0).unwrap(), vec![0.3]);
        assert!(matches!(
            s.closed_loop_mean_step(&[3.0], 0),
            Err(Error::OutsideCell(0))
        ));
    }
}
