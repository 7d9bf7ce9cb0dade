//! Side-by-side comparison of the propagation modes, one refinement round,
//! and a Monte-Carlo curve for one cell.

use std::io;

use crate::graph::TransitionGraph;
use crate::mc::{self, McEstimate};
use crate::refine::{self, Refinement};
use crate::safety::{self, Mode, SafetyBounds};
use crate::scenario::Scenario;
use crate::Result;

/// Fixed header of the per-cell comparison CSV.
pub const COMPARE_HEADER: [&str; 10] = [
    "cell_id",
    "parent",
    "k",
    "naive",
    "merge",
    "tpn",
    "merge_tpn",
    "refined_merge_tpn",
    "mc_fraction",
    "mc_stddev",
];

/// Fixed header of the aggregate CSV.
pub const SUMMARY_HEADER: [&str; 4] = ["column", "k", "mean", "max"];

/// Standard deviations allowed between a bound and a Monte-Carlo estimate.
pub const MC_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub horizon: usize,
    pub merge_p: f64,
    /// Horizon at which the refinement target is selected.
    pub select_k: usize,
    pub steps: usize,
    /// Cell (in refined indexing) for the Monte-Carlo curve; defaults to the
    /// refined cell.
    pub mc_cell: Option<usize>,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            horizon: 9,
            merge_p: safety::DEFAULT_MERGE_P,
            select_k: 6,
            steps: refine::DEFAULT_STEPS,
            mc_cell: None,
            mc_samples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub cell: usize,
    pub parent: usize,
    pub k: usize,
    /// Bounds per column, in header order from `naive` to `refined_merge_tpn`.
    pub bounds: [f64; 5],
    pub mc: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<CompareRow>,
    pub refinement: Option<Refinement>,
    pub mc: Vec<McEstimate>,
    /// Rows where a bound lies below the Monte-Carlo estimate by more than
    /// [`MC_SIGMAS`] standard deviations: `(cell, k, column)`.
    pub violations: Vec<(usize, usize, &'static str)>,
}

const COLUMNS: [&str; 5] = ["naive", "merge", "tpn", "merge_tpn", "refined_merge_tpn"];

/// Runs every mode on `g`, refines once against the merge+tpn bounds and
/// re-verifies, then simulates the designated cell.
pub fn compare(s: &Scenario, g: &TransitionGraph, cfg: &CompareConfig) -> Result<Report> {
    let by_mode: Vec<SafetyBounds> = Mode::ALL
        .iter()
        .map(|&m| safety::verify(g, s, cfg.horizon, cfg.merge_p, m))
        .collect::<Result<_>>()?;
    let best = &by_mode[3];
    let refinement = match refine::select_target(s, g, best, cfg.select_k)? {
        Some((cell, target)) => Some(refine::refine_cell(s, g, cell, &target, cfg.steps)?),
        None => None,
    };
    let (rs, parent, refined) = match &refinement {
        Some(r) => {
            let prior = r.prior(best);
            let b = safety::verify_with_prior(
                &r.graph,
                &r.scenario,
                cfg.horizon,
                cfg.merge_p,
                Mode::MergeTpn,
                Some(&prior),
            )?;
            (&r.scenario, r.parent.clone(), b)
        }
        None => (s, (0..s.cell_count()).collect(), best.clone()),
    };
    let mc_cell = cfg
        .mc_cell
        .or(refinement.as_ref().and_then(|r| r.plan.cell.index()))
        .unwrap_or(0);
    let mc = if cfg.mc_samples > 0 && mc_cell < rs.cell_count() {
        mc::estimate_pk_curve(rs, mc_cell, cfg.horizon, cfg.mc_samples, cfg.seed)?
    } else {
        Vec::new()
    };

    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for (i, &p) in parent.iter().enumerate() {
        for k in 0..=cfg.horizon {
            let bounds = [
                by_mode[0].values[k][p],
                by_mode[1].values[k][p],
                by_mode[2].values[k][p],
                by_mode[3].values[k][p],
                refined.values[k][i],
            ];
            let est = (i == mc_cell).then(|| mc.get(k)).flatten();
            if let Some(e) = est {
                for (b, name) in bounds.iter().zip(COLUMNS) {
                    if !e.within(*b, MC_SIGMAS) {
                        violations.push((i, k, name));
                    }
                }
            }
            rows.push(CompareRow {
                cell: i,
                parent: p,
                k,
                bounds,
                mc: est.map(|e| (e.hit_fraction, e.stddev)),
            });
        }
    }
    Ok(Report {
        rows,
        refinement,
        mc,
        violations,
    })
}

impl Report {
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(COMPARE_HEADER)?;
        for r in &self.rows {
            let mut rec = vec![r.cell.to_string(), r.parent.to_string(), r.k.to_string()];
            rec.extend(r.bounds.iter().map(|b| b.to_string()));
            match r.mc {
                Some((f, sd)) => rec.extend([f.to_string(), sd.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean and max over cells per column and horizon.
    pub fn summary(&self) -> Vec<(&'static str, usize, f64, f64)> {
        let horizon = self.rows.iter().map(|r| r.k).max().unwrap_or(0);
        let mut out = Vec::new();
        for (c, name) in COLUMNS.iter().enumerate() {
            for k in 0..=horizon {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.k == k)
                    .map(|r| r.bounds[c])
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
                let max = vals.iter().cloned().fold(0.0, f64::max);
                out.push((*name, k, mean, max));
            }
        }
        out
    }

    pub fn write_summary_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SUMMARY_HEADER)?;
        for (name, k, mean, max) in self.summary() {
            out.write_record([name.to_string(), k.to_string(), mean.to_string(), max.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}
