//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Runs without the test harness, so the lines always reach the output and
//! the process-wide certificate counters only see the graph build they
//! audit.

mod common;

use std::time::{Duration, Instant};

use common::*;
use nnsafe::demo::make_demo_scenario;
use nnsafe::graph::{self, build_graph, NodeId, TransitionGraph, DEFAULT_DQ};
use nnsafe::lp::CertificateAudit;
use nnsafe::mc;
use nnsafe::refine;
use nnsafe::render::render_heatmap;
use nnsafe::safety::{self, naive_value, tpn_value, Mode, SafetyBounds, DEFAULT_MERGE_P};
use nnsafe::scenario::Scenario;
use nnsafe::smc::{self, SmcOutcome};

const SIGMAS: f64 = 4.0;
const HORIZON: usize = 9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(results: &mut Vec<(usize, bool)>, id: usize, name: &str, elapsed: Duration, o: Outcome) {
    println!(
        "criterion {id} {}: {name}: {} ({:.1?})",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed
    );
    results.push((id, o.pass));
}

fn demo() -> Scenario {
    make_demo_scenario(5, &[4, 4], 7).unwrap()
}

/// Verdict agreement between the solver and exhaustive enumeration.
fn smc_exactness() -> Outcome {
    let mut instances = 0;
    let mut disagree = Vec::new();
    let mut oracle_mismatch = 0;
    let mut oracle_ambiguous = 0;
    let (mut sat, mut unsat) = (0, 0);
    for seed in 0..60u64 {
        let neurons = 1 + (seed as usize % 10);
        let (s, source, target) = random_instance(1000 + seed, neurons);
        let p = smc::build_encoding(&s, source, &target).unwrap();
        let out = p.solve().unwrap();
        // exhaustive enumeration with one LP per pattern
        let mut any = false;
        for bits in 0..(1u32 << neurons) {
            let pattern: Vec<bool> = (0..neurons).map(|i| bits >> i & 1 == 1).collect();
            if p.check_pattern(&pattern).unwrap() {
                any = true;
                break;
            }
        }
        let agrees = match &out {
            SmcOutcome::Sat(w) => any && p.recheck(w),
            SmcOutcome::Unsat => !any,
            SmcOutcome::Unknown => false,
        };
        if !agrees {
            disagree.push(seed);
        }
        // independent vertex-enumeration oracle
        match brute_force(&s, source, &target) {
            Some(v) if v != any => oracle_mismatch += 1,
            None => oracle_ambiguous += 1,
            _ => {}
        }
        if any {
            sat += 1;
        } else {
            unsat += 1;
        }
        instances += 1;
    }
    Outcome {
        pass: disagree.is_empty() && oracle_mismatch == 0,
        detail: format!(
            "{instances} instances ({sat} sat, {unsat} unsat), disagreements {:?}, \
             vertex-oracle mismatches {oracle_mismatch}, ambiguous {oracle_ambiguous}",
            disagree
        ),
    }
}

fn targets(s: &Scenario, g: &TransitionGraph) -> Vec<(usize, NodeId, nnsafe::geometry::Polytope, f64)> {
    let pieces = s.workspace.unsafe_pieces();
    let mut out = Vec::new();
    for i in 0..g.cell_count() {
        for j in 0..g.cell_count() {
            out.push((i, NodeId::Cell(j), s.cell(j).region.clone(), g.edges[i][j]));
        }
        for (k, p) in pieces.iter().enumerate() {
            out.push((i, NodeId::UnsafeSink, p.clone(), g.pieces[i][k]));
        }
    }
    out
}

/// Every edge's bracket re-solves to Unsat at `q_r` and Sat at `q_l`.
fn bisection_contract(s: &Scenario, g: &TransitionGraph) -> Outcome {
    let mut bad = Vec::new();
    let all = targets(s, g);
    for (i, node, region, bound) in &all {
        let (q_l, q_r) = graph::bracket(*bound, g.q_floor);
        let width_ok = q_r - q_l <= g.dq + 1e-15;
        let upper_ok = q_r >= 1.0
            || matches!(smc::query_augmented(s, *i, region, q_r).unwrap(), SmcOutcome::Unsat);
        let lower_ok = q_l <= 0.0 || smc::query_augmented(s, *i, region, q_l).unwrap().maybe_sat();
        if !(width_ok && upper_ok && lower_ok) {
            bad.push(format!("{i}->{node}"));
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!("{} edges, {} violations {:?}", all.len(), bad.len(), bad),
    }
}

/// Sampled one-step transition frequencies stay below the edge bounds.
fn transition_soundness(s: &Scenario, g: &TransitionGraph) -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    let mut tightest = f64::INFINITY;
    for i in 0..s.cell_count() {
        for c in mc::check_transitions(s, g, i, 200, 10_000, 31 + i as u64).unwrap() {
            checked += 1;
            if c.max_fraction > 0.0 {
                tightest = tightest.min(c.bound - c.max_fraction);
            }
            if c.violated(SIGMAS) {
                bad.push(format!("{}->{}{:?}: {} > {}", c.source, c.target, c.piece, c.max_fraction, c.bound));
            }
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!(
            "{checked} edge checks, {} violations {:?}, smallest slack {tightest:.4}",
            bad.len(),
            bad
        ),
    }
}

/// Simulated within-k unsafe fractions stay below every mode's bounds.
fn safety_soundness(s: &Scenario, by_mode: &[SafetyBounds]) -> Outcome {
    let mut bad = Vec::new();
    let mut checks = 0;
    for i in 0..s.cell_count() {
        let curve = mc::estimate_pk_curve(s, i, HORIZON, 10_000, 77 + i as u64).unwrap();
        for k in 1..=HORIZON {
            for b in by_mode {
                checks += 1;
                if !curve[k].within(b.values[k][i], SIGMAS) {
                    bad.push(format!("{} cell {i} k={k}", b.mode));
                }
            }
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!("{checks} checks, {} violations {:?}", bad.len(), bad),
    }
}

fn dominance(g: &TransitionGraph, naive: &SafetyBounds, best: &SafetyBounds) -> Outcome {
    let mut worse = 0;
    let mut strict = 0;
    for (rn, rb) in naive.values.iter().zip(&best.values) {
        for (a, b) in rn.iter().zip(rb) {
            if *b > a + 1e-12 {
                worse += 1;
            }
            if *b < a - 1e-12 {
                strict += 1;
            }
        }
    }
    let excess = (0..g.cell_count()).any(|i| g.out_mass(i) > 1.0);
    let needs_strict = excess || !best.merges.is_empty();
    Outcome {
        pass: worse == 0 && (!needs_strict || strict > 0),
        detail: format!(
            "{worse} entries above naive, {strict} strictly below, {} merges, excess mass {excess}",
            best.merges.len()
        ),
    }
}

fn worked_example() -> Outcome {
    let pairs = [(0.6, 0.1), (0.6, 0.5), (0.6, 1.0)];
    let tpn = tpn_value(&pairs);
    let naive = naive_value(&pairs);
    Outcome {
        pass: (tpn - 0.8).abs() <= 1e-12 && (naive - 0.96).abs() <= 1e-12,
        detail: format!("tpn {tpn}, naive {naive}"),
    }
}

/// One automatic refinement round against the merge+tpn bounds.
fn refinement(s: &Scenario, g: &TransitionGraph, best: &SafetyBounds) -> Outcome {
    let k = 6;
    let Some((cell, target)) = refine::select_target(s, g, best, k).unwrap() else {
        return Outcome {
            pass: false,
            detail: "no refinement target".into(),
        };
    };
    let r = refine::refine_cell(s, g, cell, &target, refine::DEFAULT_STEPS).unwrap();
    // raw re-verification, without capping by the parent bounds
    let raw = safety::verify(&r.graph, &r.scenario, HORIZON, DEFAULT_MERGE_P, Mode::MergeTpn).unwrap();
    let children: Vec<usize> = (0..r.parent.len()).filter(|&c| r.parent[c] == cell).collect();
    let before = best.values[k][cell];
    let after: Vec<f64> = children.iter().map(|&c| raw.values[k][c]).collect();
    let reduced = after.iter().any(|v| *v < before);
    let mut rises = 0;
    let mut worst_rise: f64 = 0.0;
    for kk in 0..=HORIZON {
        for (c, &p) in r.parent.iter().enumerate() {
            let d = raw.values[kk][c] - best.values[kk][p];
            worst_rise = worst_rise.max(d);
            if d > g.dq {
                rises += 1;
            }
        }
    }
    Outcome {
        pass: reduced && rises == 0,
        detail: format!(
            "cell {cell} against {target}: P6 {before:.4} -> sub-cells {after:.4?}; \
             {rises} bounds rose by more than dq (largest rise {worst_rise:.2e})"
        ),
    }
}

fn certificate_audit(s: &Scenario) -> (Outcome, TransitionGraph) {
    let before = CertificateAudit::snapshot();
    let (g, stats) = build_graph(s, DEFAULT_DQ, 0).unwrap();
    let audit = CertificateAudit::snapshot().since(before);
    (
        Outcome {
            pass: audit.infeasible > 0 && audit.passed == audit.infeasible,
            detail: format!(
                "{} infeasible results, {} certificates passed ({} pairs, {} pruned)",
                audit.infeasible, audit.passed, stats.pairs, stats.pruned
            ),
        },
        g,
    )
}

fn render_sweep() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for run in 0..2 {
        let s = demo();
        let (g, _) = build_graph(&s, DEFAULT_DQ, 0).unwrap();
        let b = safety::verify(&g, &s, HORIZON, DEFAULT_MERGE_P, Mode::MergeTpn).unwrap();
        let mut images = Vec::new();
        for t in [3, 6, 9] {
            let img = render_heatmap(&b.values[t], &s, 200).unwrap();
            let path = dir.path().join(format!("run{run}_k{t}.ppm"));
            std::fs::write(&path, &img).unwrap();
            images.push(std::fs::read(&path).unwrap());
        }
        runs.push(images);
    }
    let same = runs[0] == runs[1];
    let distinct = runs[0][0] != runs[0][2];
    Outcome {
        pass: same,
        detail: format!("T in {{3, 6, 9}} identical across runs: {same}; T=3 differs from T=9: {distinct}"),
    }
}

fn main() {
    let mut results = Vec::new();
    let s = demo();

    let t = Instant::now();
    let o = smc_exactness();
    report(&mut results, 1, "SMC exactness", t.elapsed(), o);

    let t = Instant::now();
    let (audit, g) = certificate_audit(&s);
    let audit_time = t.elapsed();

    let t2 = Instant::now();
    let o = bisection_contract(&s, &g);
    report(&mut results, 2, "bisection contract", t2.elapsed(), o);

    let t3 = Instant::now();
    let o = transition_soundness(&s, &g);
    report(&mut results, 3, "transition-bound soundness", t3.elapsed(), o);

    let t4 = Instant::now();
    let by_mode: Vec<SafetyBounds> = Mode::ALL
        .iter()
        .map(|&m| safety::verify(&g, &s, HORIZON, DEFAULT_MERGE_P, m).unwrap())
        .collect();
    let o = safety_soundness(&s, &by_mode);
    report(&mut results, 4, "safety-bound soundness", t4.elapsed(), o);

    let t5 = Instant::now();
    let o = dominance(&g, &by_mode[0], &by_mode[3]);
    report(&mut results, 5, "dominance", t5.elapsed(), o);

    let t6 = Instant::now();
    let o = worked_example();
    report(&mut results, 6, "normalization example", t6.elapsed(), o);

    let t7 = Instant::now();
    let o = refinement(&s, &g, &by_mode[3]);
    report(&mut results, 7, "refinement effectiveness", t7.elapsed(), o);

    report(&mut results, 8, "certificate audit", audit_time, audit);

    let t9 = Instant::now();
    let o = render_sweep();
    report(&mut results, 9, "deterministic heatmaps", t9.elapsed(), o);

    results.sort();
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
