//! Dense simplex engine for linear feasibility and optimization.
//!
//! Every row is normalized to unit Euclidean norm before pivoting, so the
//! feasibility tolerance [`EPS_LP`] is an absolute distance-like quantity.
//! Variables are free (unbounded in both directions); a free column that
//! enters the basis never leaves it.
//!
//! Infeasible systems come back with a Farkas certificate read off the final
//! phase-one duals. The certificate is machine-checked before it is returned;
//! a certificate that fails the check is reported as a numerical failure
//! rather than handed to the caller.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Absolute feasibility tolerance on normalized rows.
pub const EPS_LP: f64 = 1e-7;

/// Margin used to encode strict inequalities `t < 0` as `t <= -EPS_STRICT`.
pub const EPS_STRICT: f64 = 1e-9;

/// Tolerance on `|yᵀA|` in the certificate check.
pub const EPS_CERT: f64 = 1e-6;

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;
const MAX_PIVOTS: usize = 50_000;
/// Consecutive degenerate pivots tolerated before switching to Bland's rule.
const DEGENERATE_STREAK: usize = 40;

static INFEASIBLE_SEEN: AtomicU64 = AtomicU64::new(0);
static CERTIFICATES_PASSED: AtomicU64 = AtomicU64::new(0);

/// Process-wide counters of infeasibility verdicts and certificate checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CertificateAudit {
    /// Phase-one runs that ended with a positive infeasibility measure.
    pub infeasible: u64,
    /// Of those, certificates that passed [`Certificate::check`].
    pub passed: u64,
}

impl CertificateAudit {
    pub fn snapshot() -> Self {
        CertificateAudit {
            infeasible: INFEASIBLE_SEEN.load(Ordering::SeqCst),
            passed: CERTIFICATES_PASSED.load(Ordering::SeqCst),
        }
    }

    pub fn since(self, earlier: CertificateAudit) -> CertificateAudit {
        CertificateAudit {
            infeasible: self.infeasible - earlier.infeasible,
            passed: self.passed - earlier.passed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

/// Row label: a constraint family plus an index inside that family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    pub group: &'static str,
    pub index: u32,
}

impl Label {
    pub const fn new(group: &'static str, index: u32) -> Self {
        Label { group, index }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.group, self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
    pub label: Label,
}

impl Row {
    /// Signed violation of this row at `x` (positive means violated).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs: f64 = self.coeffs.iter().zip(x).map(|(a, v)| a * v).sum();
        match self.relation {
            Relation::Le => lhs - self.rhs,
            Relation::Ge => self.rhs - lhs,
            Relation::Eq => (lhs - self.rhs).abs(),
        }
    }

    fn norm(&self) -> f64 {
        self.coeffs.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub direction: Direction,
    pub cost: Vec<f64>,
}

/// A linear system over free real variables, optionally with an objective.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    dim: usize,
    rows: Vec<Row>,
    labels: HashSet<Label>,
    objective: Option<Objective>,
}

impl LinearProgram {
    pub fn new(dim: usize) -> Self {
        LinearProgram {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn objective(&self) -> Option<&Objective> {
        self.objective.as_ref()
    }

    /// Appends a row.
    ///
    /// Panics if the coefficient vector has the wrong length or the label is
    /// already in use; both are construction bugs in the caller.
    pub fn push(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64, label: Label) {
        assert_eq!(coeffs.len(), self.dim, "row {label} has wrong dimension");
        assert!(self.labels.insert(label), "duplicate row label {label}");
        self.rows.push(Row {
            coeffs,
            relation,
            rhs,
            label,
        });
    }

    pub fn set_objective(&mut self, direction: Direction, cost: Vec<f64>) {
        assert_eq!(cost.len(), self.dim, "objective has wrong dimension");
        self.objective = Some(Objective { direction, cost });
    }

    pub fn clear_objective(&mut self) {
        self.objective = None;
    }

    /// Copy of this program restricted to the rows whose index is in `keep`.
    pub fn subset(&self, keep: &[usize]) -> LinearProgram {
        let mut lp = LinearProgram::new(self.dim);
        for &i in keep {
            let r = &self.rows[i];
            lp.push(r.coeffs.clone(), r.relation, r.rhs, r.label);
        }
        lp
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| r.violation(x) / r.norm().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    /// Labelled text dump, one row per line.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for r in &self.rows {
            let rel = match r.relation {
                Relation::Le => "<=",
                Relation::Eq => "==",
                Relation::Ge => ">=",
            };
            let terms: Vec<String> = r
                .coeffs
                .iter()
                .enumerate()
                .filter(|(_, a)| **a != 0.0)
                .map(|(j, a)| format!("{a}*v{j}"))
                .collect();
            let lhs = if terms.is_empty() {
                "0".to_string()
            } else {
                terms.join(" + ")
            };
            let _ = writeln!(out, "{}: {} {} {}", r.label, lhs, rel, r.rhs);
        }
        out
    }
}

/// Which side of a row a certificate multiplier applies to, in `<=` form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `a·x <= b`
    Upper,
    /// `-a·x <= -b`
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Multiplier {
    pub row: usize,
    pub side: Side,
    pub value: f64,
}

/// Farkas certificate: non-negative multipliers over `<=`-form rows whose
/// combination reads `0·x <= c` with `c < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub multipliers: Vec<Multiplier>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertificateError {
    #[error("negative multiplier {value} on row {row}")]
    Negative { row: usize, value: f64 },
    #[error("certificate cites row {row} on a side it does not have")]
    WrongSide { row: usize },
    #[error("combined row is not zero (max |coefficient| = {residual:e})")]
    NonZeroCombination { residual: f64 },
    #[error("combined right-hand side {rhs:e} is not below -{EPS_LP:e}")]
    NotContradiction { rhs: f64 },
}

impl Certificate {
    /// Rows with non-zero multiplier, in ascending index order.
    pub fn support(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .multipliers
            .iter()
            .filter(|m| m.value > 0.0)
            .map(|m| m.row)
            .collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    /// Combined `(Σ yᵢaᵢ, Σ yᵢbᵢ)` in `<=` form.
    pub fn combine(&self, lp: &LinearProgram) -> (Vec<f64>, f64) {
        let mut coeffs = vec![0.0; lp.dim];
        let mut rhs = 0.0;
        for m in &self.multipliers {
            let row = &lp.rows[m.row];
            let s = match m.side {
                Side::Upper => 1.0,
                Side::Lower => -1.0,
            };
            for (c, a) in coeffs.iter_mut().zip(&row.coeffs) {
                *c += m.value * s * a;
            }
            rhs += m.value * s * row.rhs;
        }
        (coeffs, rhs)
    }

    /// Machine check: `y >= 0`, `yᵀA = 0` within [`EPS_CERT`], `yᵀb < -EPS_LP`.
    pub fn check(&self, lp: &LinearProgram) -> Result<(), CertificateError> {
        for m in &self.multipliers {
            if !(m.value >= 0.0) {
                return Err(CertificateError::Negative {
                    row: m.row,
                    value: m.value,
                });
            }
            let ok = match (lp.rows[m.row].relation, m.side) {
                (Relation::Le, Side::Upper) | (Relation::Ge, Side::Lower) | (Relation::Eq, _) => {
                    true
                }
                _ => false,
            };
            if !ok {
                return Err(CertificateError::WrongSide { row: m.row });
            }
        }
        let (coeffs, rhs) = self.combine(lp);
        let residual = coeffs.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()));
        if residual > EPS_CERT {
            return Err(CertificateError::NonZeroCombination { residual });
        }
        if !(rhs < -EPS_LP) {
            return Err(CertificateError::NotContradiction { rhs });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleResult {
    Feasible {
        point: Vec<f64>,
        objective_value: Option<f64>,
    },
    Infeasible(Certificate),
}

impl OracleResult {
    pub fn is_feasible(&self) -> bool {
        matches!(self, OracleResult::Feasible { .. })
    }

    pub fn point(&self) -> Option<&[f64]> {
        match self {
            OracleResult::Feasible { point, .. } => Some(point),
            OracleResult::Infeasible(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("objective is unbounded")]
    Unbounded,
    #[error("pivot limit of {0} exceeded")]
    PivotLimit(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// Row-major `rows x (cols + 1)`, last column is the right-hand side.
    data: Vec<f64>,
    /// Reduced costs, last entry is minus the objective value.
    cost: Vec<f64>,
    basis: Vec<usize>,
    /// Columns that are free variables (never leave once basic).
    free: usize,
    /// Columns barred from entering (artificials in phase two).
    barred_from: usize,
    flipped: Vec<bool>,
}

impl Tableau {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * (self.cols + 1) + c]
    }

    #[inline]
    fn rhs(&self, r: usize) -> f64 {
        self.data[r * (self.cols + 1) + self.cols]
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.cols + 1;
        let inv = 1.0 / self.data[pr * w + pc];
        for v in &mut self.data[pr * w..(pr + 1) * w] {
            *v *= inv;
        }
        self.data[pr * w + pc] = 1.0;
        let (before, rest) = self.data.split_at_mut(pr * w);
        let (prow, after) = rest.split_at_mut(w);
        for row in before.chunks_exact_mut(w).chain(after.chunks_exact_mut(w)) {
            let f = row[pc];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * p;
                }
                row[pc] = 0.0;
            }
        }
        let f = self.cost[pc];
        if f != 0.0 {
            for (v, p) in self.cost.iter_mut().zip(prow.iter()) {
                *v -= f * p;
            }
            self.cost[pc] = 0.0;
        }
        self.basis[pr] = pc;
    }

    fn negate_column(&mut self, c: usize) {
        let w = self.cols + 1;
        for r in 0..self.rows {
            self.data[r * w + c] = -self.data[r * w + c];
        }
        self.cost[c] = -self.cost[c];
        self.flipped[c] = !self.flipped[c];
    }

    /// Runs the simplex loop to optimality. Returns `Err(Unbounded)` if an
    /// improving ray exists.
    fn optimize(&mut self, pivots: &mut usize) -> Result<(), LpError> {
        let mut in_basis = vec![false; self.cols];
        for &b in &self.basis {
            in_basis[b] = true;
        }
        let mut degenerate = 0usize;
        loop {
            let bland = degenerate >= DEGENERATE_STREAK;
            let mut entering: Option<usize> = None;
            let mut best = 0.0;
            for c in 0..self.barred_from {
                if in_basis[c] {
                    continue;
                }
                let d = self.cost[c];
                let score = if c < self.free { d.abs() } else { -d };
                if score > COST_TOL {
                    if bland {
                        entering = Some(c);
                        break;
                    }
                    if score > best {
                        best = score;
                        entering = Some(c);
                    }
                }
            }
            let Some(pc) = entering else {
                return Ok(());
            };
            if pc < self.free && self.cost[pc] > 0.0 {
                self.negate_column(pc);
            }
            // ratio test; free basic variables never block
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                if self.basis[r] < self.free {
                    continue;
                }
                let a = self.at(r, pc);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(r).max(0.0) / a;
                    match leave {
                        None => leave = Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - 1e-12
                                || (ratio <= lratio + 1e-12 && self.basis[r] < self.basis[lr])
                            {
                                leave = Some((r, ratio));
                            }
                        }
                    }
                }
            }
            let Some((pr, ratio)) = leave else {
                return Err(LpError::Unbounded);
            };
            if ratio <= 1e-12 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            in_basis[self.basis[pr]] = false;
            in_basis[pc] = true;
            self.pivot(pr, pc);
            *pivots += 1;
            if *pivots > MAX_PIVOTS {
                return Err(LpError::PivotLimit(MAX_PIVOTS));
            }
        }
    }
}

/// Solves a linear program.
///
/// Without an objective this is a pure feasibility check. With an objective
/// the returned point is optimal, or [`LpError::Unbounded`] is reported.
pub fn solve(lp: &LinearProgram) -> Result<OracleResult, LpError> {
    let n = lp.dim;
    // Normalize every row into `<=` or `==` form with unit norm.
    struct NormRow {
        coeffs: Vec<f64>,
        rhs: f64,
        equality: bool,
        // original row index, sign applied (+1 or -1), scale applied
        source: usize,
        sign: f64,
        scale: f64,
    }
    let mut norm_rows = Vec::with_capacity(lp.rows.len());
    for (i, row) in lp.rows.iter().enumerate() {
        let norm = row.norm();
        let sign = if row.relation == Relation::Ge { -1.0 } else { 1.0 };
        if norm < 1e-300 {
            // 0 <= rhs (after sign). A violated constant row is its own certificate.
            let b = sign * row.rhs;
            let bad = match row.relation {
                Relation::Eq => b.abs() > EPS_LP,
                _ => b < -EPS_LP,
            };
            if bad {
                let side = match (row.relation, b < 0.0) {
                    (Relation::Ge, _) => Side::Lower,
                    (Relation::Eq, false) => Side::Lower,
                    _ => Side::Upper,
                };
                let cert = Certificate {
                    multipliers: vec![Multiplier {
                        row: i,
                        side,
                        value: 1.0,
                    }],
                };
                return certified(lp, cert);
            }
            continue;
        }
        let scale = 1.0 / norm;
        norm_rows.push(NormRow {
            coeffs: row.coeffs.iter().map(|a| a * sign * scale).collect(),
            rhs: row.rhs * sign * scale,
            equality: row.relation == Relation::Eq,
            source: i,
            sign,
            scale,
        });
    }

    let m = norm_rows.len();
    let slack_count = norm_rows.iter().filter(|r| !r.equality).count();
    // columns: [x (n, free) | slacks | artificials]
    let mut slack_col = vec![usize::MAX; m];
    let mut next = n;
    for (i, r) in norm_rows.iter().enumerate() {
        if !r.equality {
            slack_col[i] = next;
            next += 1;
        }
    }
    debug_assert_eq!(next, n + slack_count);
    // rows whose right-hand side is negative, or equalities, need artificials
    let mut rhs_sign = vec![1.0; m];
    let mut art_col = vec![usize::MAX; m];
    for (i, r) in norm_rows.iter().enumerate() {
        if r.rhs < 0.0 {
            rhs_sign[i] = -1.0;
        }
        if r.equality || r.rhs < 0.0 {
            art_col[i] = next;
            next += 1;
        }
    }
    let cols = next;
    let art_start = n + slack_count;
    let w = cols + 1;
    let mut data = vec![0.0; m * w];
    let mut basis = vec![0usize; m];
    let mut cost = vec![0.0; w];
    for (i, r) in norm_rows.iter().enumerate() {
        let s = rhs_sign[i];
        let row = &mut data[i * w..(i + 1) * w];
        for (j, a) in r.coeffs.iter().enumerate() {
            row[j] = s * a;
        }
        if slack_col[i] != usize::MAX {
            row[slack_col[i]] = s;
        }
        row[cols] = s * r.rhs;
        if art_col[i] != usize::MAX {
            row[art_col[i]] = 1.0;
            basis[i] = art_col[i];
        } else {
            basis[i] = slack_col[i];
        }
    }
    // phase-one reduced costs: c_j - Σ_{rows with artificial basis} a_ij
    for c in art_start..cols {
        cost[c] = 1.0;
    }
    for i in 0..m {
        if art_col[i] != usize::MAX {
            for c in 0..w {
                cost[c] -= data[i * w + c];
            }
        }
    }
    let mut tab = Tableau {
        rows: m,
        cols,
        data,
        cost,
        basis,
        free: n,
        barred_from: cols,
        flipped: vec![false; cols],
    };
    let mut pivots = 0usize;
    match tab.optimize(&mut pivots) {
        Ok(()) => {}
        Err(LpError::Unbounded) => {
            return Err(LpError::Numerical("phase one reported unbounded".into()))
        }
        Err(e) => return Err(e),
    }
    let infeasibility = -tab.cost[cols];

    if infeasibility > EPS_LP {
        INFEASIBLE_SEEN.fetch_add(1, Ordering::SeqCst);
        // duals: y_i = c_init - d_init for the initial basis column of row i
        let mut multipliers = Vec::new();
        for (i, r) in norm_rows.iter().enumerate() {
            let (init, c_init) = if art_col[i] != usize::MAX {
                (art_col[i], 1.0)
            } else {
                (slack_col[i], 0.0)
            };
            let mut d = tab.cost[init];
            if tab.flipped[init] {
                d = -d;
            }
            let y = c_init - d;
            // multiplier on the normalized `<=` row: z = -y * rhs_sign
            let z = -y * rhs_sign[i];
            if z.abs() < 1e-14 {
                continue;
            }
            let orig = z * r.scale;
            let (side, value) = if r.equality {
                if orig >= 0.0 {
                    (Side::Upper, orig)
                } else {
                    (Side::Lower, -orig)
                }
            } else if r.sign > 0.0 {
                (Side::Upper, orig.max(0.0))
            } else {
                (Side::Lower, orig.max(0.0))
            };
            if value > 0.0 {
                multipliers.push(Multiplier {
                    row: r.source,
                    side,
                    value,
                });
            }
        }
        return certified(lp, Certificate { multipliers });
    }

    let read_point = |tab: &Tableau| {
        let mut x = vec![0.0; n];
        for r in 0..tab.rows {
            let b = tab.basis[r];
            if b < n {
                x[b] = if tab.flipped[b] { -tab.rhs(r) } else { tab.rhs(r) };
            }
        }
        x
    };

    let Some(obj) = &lp.objective else {
        return Ok(OracleResult::Feasible {
            point: read_point(&tab),
            objective_value: None,
        });
    };

    // drive zero-level artificials out of the basis where possible
    for r in 0..m {
        if tab.basis[r] >= art_start {
            if let Some(c) = (0..art_start).find(|&c| tab.at(r, c).abs() > 1e-9) {
                tab.pivot(r, c);
            }
        }
    }
    tab.barred_from = art_start;
    let sgn = match obj.direction {
        Direction::Minimize => 1.0,
        Direction::Maximize => -1.0,
    };
    let mut c2 = vec![0.0; w];
    for j in 0..n {
        let cj = sgn * obj.cost[j];
        c2[j] = if tab.flipped[j] { -cj } else { cj };
    }
    let mut reduced = c2.clone();
    for r in 0..m {
        let cb = c2[tab.basis[r]];
        if cb != 0.0 {
            for c in 0..w {
                reduced[c] -= cb * tab.data[r * w + c];
            }
        }
    }
    tab.cost = reduced;
    tab.optimize(&mut pivots)?;
    let point = read_point(&tab);
    let value: f64 = obj.cost.iter().zip(&point).map(|(c, x)| c * x).sum();
    Ok(OracleResult::Feasible {
        point,
        objective_value: Some(value),
    })
}

fn certified(lp: &LinearProgram, cert: Certificate) -> Result<OracleResult, LpError> {
    match cert.check(lp) {
        Ok(()) => {
            CERTIFICATES_PASSED.fetch_add(1, Ordering::SeqCst);
            Ok(OracleResult::Infeasible(cert))
        }
        Err(e) => Err(LpError::Numerical(format!("certificate rejected: {e}"))),
    }
}

/// Feasibility only, ignoring any objective.
pub fn is_feasible(lp: &LinearProgram) -> Result<bool, LpError> {
    if lp.objective.is_some() {
        let mut copy = lp.clone();
        copy.clear_objective();
        return Ok(solve(&copy)?.is_feasible());
    }
    Ok(solve(lp)?.is_feasible())
}

/// Irreducible infeasible subset by deletion filtering, seeded with the
/// certificate's support. Returns row indices into `lp`.
///
/// If a re-solve fails numerically the row is conservatively kept, so the
/// worst case is the seed itself.
pub fn minimal_infeasible_subset(lp: &LinearProgram, cert: &Certificate) -> Vec<usize> {
    let mut keep = cert.support();
    let mut i = 0;
    while i < keep.len() {
        let mut trial = keep.clone();
        trial.remove(i);
        let mut sub = lp.subset(&trial);
        sub.clear_objective();
        match solve(&sub) {
            Ok(OracleResult::Infeasible(_)) => keep = trial,
            _ => i += 1,
        }
    }
    keep
}
