//! Convex polytopes in halfspace form and the Gaussian chance-constrained
//! sets built from them.

use serde::{Deserialize, Serialize};

use crate::lp::{self, Direction, Label, LinearProgram, OracleResult, Relation};
use crate::scenario::Workspace;
use crate::{Error, Result};

/// Emptiness tolerance on LP feasibility.
pub const EPS_GEO: f64 = 1e-9;

/// Smallest inscribed-ball radius that counts as a non-empty interior. It
/// sits well above the LP feasibility tolerance, so regions that only share
/// a face never pass.
pub const EPS_INTERIOR: f64 = 1e-6;

/// Radius cap for Chebyshev balls of unbounded regions.
const RADIUS_CAP: f64 = 1e6;

/// `a·x <= b`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub a: Vec<f64>,
    pub b: f64,
}

impl Halfspace {
    pub fn new(a: Vec<f64>, b: f64) -> Self {
        Halfspace { a, b }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        dot(&self.a, x) - self.b
    }

    /// The closed complement `a·x >= b`, as `-a·x <= -b`.
    pub fn reversed(&self) -> Halfspace {
        Halfspace {
            a: self.a.iter().map(|v| -v).collect(),
            b: -self.b,
        }
    }

    pub fn norm(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `normal·x = offset`
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    pub normal: Vec<f64>,
    pub offset: f64,
}

/// Intersection of finitely many halfspaces. Redundant rows are kept.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polytope {
    pub halfspaces: Vec<Halfspace>,
}

impl Polytope {
    pub fn new(halfspaces: Vec<Halfspace>) -> Self {
        Polytope { halfspaces }
    }

    /// Axis-aligned box `lo <= x <= hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        let n = lo.len();
        let mut hs = Vec::with_capacity(2 * n);
        for d in 0..n {
            let mut a = vec![0.0; n];
            a[d] = 1.0;
            hs.push(Halfspace::new(a.clone(), hi[d]));
            a[d] = -1.0;
            hs.push(Halfspace::new(a, -lo[d]));
        }
        Polytope::new(hs)
    }

    /// Dimension of the ambient space, if any halfspace is present.
    pub fn dim(&self) -> Option<usize> {
        self.halfspaces.first().map(Halfspace::dim)
    }

    pub fn len(&self) -> usize {
        self.halfspaces.len()
    }

    pub fn is_empty_list(&self) -> bool {
        self.halfspaces.is_empty()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.halfspaces
            .iter()
            .all(|h| h.value(x) <= tol * h.norm().max(1.0))
    }

    pub fn intersect(&self, other: &Polytope) -> Polytope {
        let mut hs = self.halfspaces.clone();
        hs.extend(other.halfspaces.iter().cloned());
        Polytope::new(hs)
    }

    pub fn with(&self, h: Halfspace) -> Polytope {
        let mut hs = self.halfspaces.clone();
        hs.push(h);
        Polytope::new(hs)
    }

    /// Feasibility LP over `dim` variables with one row per halfspace.
    pub fn feasibility_lp(&self, dim: usize) -> LinearProgram {
        let mut lp = LinearProgram::new(dim);
        for (i, h) in self.halfspaces.iter().enumerate() {
            lp.push(h.a.clone(), Relation::Le, h.b, Label::new("face", i as u32));
        }
        lp
    }

    /// Support value `max c·x` over the polytope, `None` when unbounded.
    pub fn support(&self, c: &[f64]) -> Result<Option<f64>> {
        let mut lp = self.feasibility_lp(c.len());
        lp.set_objective(Direction::Maximize, c.to_vec());
        match lp::solve(&lp) {
            Ok(OracleResult::Feasible {
                objective_value, ..
            }) => Ok(objective_value),
            Ok(OracleResult::Infeasible(_)) => Err(Error::EmptyPolytope),
            Err(lp::LpError::Unbounded) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Per-axis `[min, max]` extents.
    pub fn bounding_box(&self, dim: usize) -> Result<Vec<(f64, f64)>> {
        (0..dim)
            .map(|d| {
                let mut e = vec![0.0; dim];
                e[d] = 1.0;
                let hi = self.support(&e)?.ok_or(Error::UnboundedPolytope)?;
                e[d] = -1.0;
                let lo = -self.support(&e)?.ok_or(Error::UnboundedPolytope)?;
                Ok((lo, hi))
            })
            .collect()
    }

    /// True when the polytope has an interior ball of radius above
    /// [`EPS_INTERIOR`].
    pub fn has_interior(&self, dim: usize) -> bool {
        match chebyshev_center(self, dim) {
            Ok((_, r)) => r > EPS_INTERIOR,
            Err(_) => false,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation followed by one Newton step on `Φ`.
pub fn gaussian_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidProbability(q));
    }
    if q > 0.5 {
        // reflect so the Newton step works on the small tail probability
        return Ok(-lower_quantile(1.0 - q));
    }
    Ok(lower_quantile(q))
}

fn lower_quantile(q: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const LOW: f64 = 0.02425;
    let z = if q < LOW {
        let t = (-2.0 * q.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else {
        let s = q - 0.5;
        let r = s * s;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * s
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let pdf = normal_pdf(z);
    if pdf > 0.0 {
        z - (normal_cdf(z) - q) / pdf
    } else {
        z
    }
}

/// Means `X` of `N(X, diag(sigma²))` for which every halfspace of `poly`
/// holds with probability at least `q`.
pub fn augmented_set(poly: &Polytope, q: f64, sigma: &[f64]) -> Result<Polytope> {
    let z = gaussian_quantile(q)?;
    let halfspaces = poly
        .halfspaces
        .iter()
        .map(|h| {
            if h.dim() != sigma.len() {
                return Err(Error::Dimension(format!(
                    "halfspace of dimension {} against sigma of length {}",
                    h.dim(),
                    sigma.len()
                )));
            }
            let spread = h
                .a
                .iter()
                .zip(sigma)
                .map(|(a, s)| (a * s) * (a * s))
                .sum::<f64>()
                .sqrt();
            Ok(Halfspace::new(h.a.clone(), h.b - z * spread))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Polytope::new(halfspaces))
}

/// True iff `p1 ∩ p2` is infeasible. Boundary contact counts as non-empty,
/// and a numerical failure is reported as non-empty.
pub fn is_empty_intersection(p1: &Polytope, p2: &Polytope) -> bool {
    let Some(dim) = p1.dim().or(p2.dim()) else {
        return false;
    };
    let lp = p1.intersect(p2).feasibility_lp(dim);
    matches!(lp::solve(&lp), Ok(OracleResult::Infeasible(_)))
}

/// Largest inscribed ball `(center, radius)`; radius is capped at 1e6 for
/// unbounded regions.
pub fn chebyshev_center(poly: &Polytope, dim: usize) -> Result<(Vec<f64>, f64)> {
    let mut lp = LinearProgram::new(dim + 1);
    for (i, h) in poly.halfspaces.iter().enumerate() {
        let mut row = h.a.clone();
        row.push(h.norm());
        lp.push(row, Relation::Le, h.b, Label::new("face", i as u32));
    }
    let mut r = vec![0.0; dim + 1];
    r[dim] = 1.0;
    lp.push(r.clone(), Relation::Ge, 0.0, Label::new("radius", 0));
    lp.push(r.clone(), Relation::Le, RADIUS_CAP, Label::new("radius", 1));
    lp.set_objective(Direction::Maximize, r);
    match lp::solve(&lp)? {
        OracleResult::Feasible { point, .. } => {
            let radius = point[dim];
            Ok((point[..dim].to_vec(), radius))
        }
        OracleResult::Infeasible(_) => Err(Error::EmptyPolytope),
    }
}

/// Splits `poly` by `h` into `(normal·x <= offset, normal·x >= offset)`.
pub fn split(poly: &Polytope, h: &Hyperplane) -> Result<(Polytope, Polytope)> {
    let dim = h.normal.len();
    let below = poly.with(Halfspace::new(h.normal.clone(), h.offset));
    let above = poly.with(Halfspace::new(
        h.normal.iter().map(|v| -v).collect(),
        -h.offset,
    ));
    if !below.has_interior(dim) || !above.has_interior(dim) {
        return Err(Error::DegenerateSplit);
    }
    Ok((below, above))
}

/// True iff `cell` shares interior with an obstacle or sticks out of the
/// domain. Contact along a boundary does not count.
pub fn cell_unsafe_overlap(cell: &Polytope, ws: &Workspace) -> bool {
    let dim = ws.state_dim();
    ws.unsafe_pieces()
        .iter()
        .any(|piece| cell.intersect(piece).has_interior(dim))
}
