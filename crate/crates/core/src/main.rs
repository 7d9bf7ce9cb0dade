//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nnsafe::demo::DemoConfig;
use nnsafe::graph::{self, NodeId, TransitionGraph};
use nnsafe::mc;
use nnsafe::refine;
use nnsafe::render;
use nnsafe::report::{self, CompareConfig};
use nnsafe::safety::{self, Mode, SafetyBounds};
use nnsafe::scenario::{load_scenario, Scenario};
use nnsafe::{Error, Result};

#[derive(Parser)]
#[command(name = "nnsafe", version, about = "Reach-unsafe probability bounds for NN-controlled stochastic systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generated demo scenario.
    MakeDemo(MakeDemo),
    /// Build the transition graph of a scenario.
    BuildGraph(BuildGraph),
    /// Propagate bounds over a transition graph.
    Verify(Verify),
    /// Split one cell and update the graph.
    Refine(Refine),
    /// Estimate reach-unsafe probabilities by simulation.
    Simulate(Simulate),
    /// Render per-cell bounds as a PPM heatmap.
    Render(Render),
    /// Compare all modes, one refinement round and simulation.
    Compare(Compare),
}

#[derive(Args)]
struct MakeDemo {
    #[arg(long, default_value_t = 5)]
    grid: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4,4")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildGraph {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = graph::DEFAULT_DQ)]
    dq: f64,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyOpts {
    #[arg(long, default_value_t = 9)]
    horizon: usize,
    #[arg(long, default_value_t = safety::DEFAULT_MERGE_P)]
    merge_p: f64,
    /// naive, merge, tpn or merge+tpn.
    #[arg(long, default_value = "merge+tpn")]
    mode: Mode,
}

#[derive(Args)]
struct Verify {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    opts: VerifyOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Refine {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// Bounds table used for automatic target selection.
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Select the cell and edge automatically.
    #[arg(long, conflicts_with_all = ["cell", "target"])]
    auto: bool,
    #[arg(long, requires = "target")]
    cell: Option<usize>,
    /// Target node: a cell index, `cell:i` or `sink`.
    #[arg(long, requires = "cell")]
    target: Option<NodeId>,
    /// Horizon used by automatic selection.
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = refine::DEFAULT_STEPS)]
    steps: usize,
    #[command(flatten)]
    opts: VerifyOpts,
    /// Output directory for scenario.toml, graph.txt and bounds.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Simulate {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    cell: usize,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bounds table to check the estimates against.
    #[arg(long)]
    bounds: Option<PathBuf>,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    bounds: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 400)]
    width: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Compare {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 9)]
    horizon: usize,
    #[arg(long, default_value_t = safety::DEFAULT_MERGE_P)]
    merge_p: f64,
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = refine::DEFAULT_STEPS)]
    steps: usize,
    /// Cell for the simulation curve, in refined indexing.
    #[arg(long)]
    mc_cell: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-column mean and max table.
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn scenario_at(path: &Path) -> Result<Scenario> {
    load_scenario(&read(path)?)
}

fn graph_for(path: &Path, s: &Scenario) -> Result<TransitionGraph> {
    let g = graph::load_graph(&read(path)?)?;
    g.check_scenario(s)?;
    Ok(g)
}

fn bounds_at(path: &Path, mode: Mode, merge_p: f64) -> Result<SafetyBounds> {
    SafetyBounds::read_csv(fs::File::open(path)?, mode, merge_p)
}

fn write_bounds(path: &Path, b: &SafetyBounds) -> Result<()> {
    b.write_csv(fs::File::create(path)?)
}

/// Returns `true` if a soundness violation was found.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::MakeDemo(a) => {
            let cfg = DemoConfig {
                grid: a.grid,
                widths: a.widths,
                seed: a.seed,
                sigma: a.sigma,
                ..DemoConfig::default()
            };
            let s = cfg.build()?;
            fs::write(&a.out, s.to_document())?;
            println!("wrote {} cells to {}", s.cell_count(), a.out.display());
        }
        Command::BuildGraph(a) => {
            let s = scenario_at(&a.scenario)?;
            let start = std::time::Instant::now();
            let (g, stats) = graph::build_graph(&s, a.dq, a.jobs)?;
            fs::write(&a.out, graph::save_graph(&g))?;
            println!(
                "{} pairs, {} pruned, q_floor {}, {:.2?}",
                stats.pairs,
                stats.pruned,
                g.q_floor,
                start.elapsed()
            );
        }
        Command::Verify(a) => {
            let s = scenario_at(&a.scenario)?;
            let g = graph_for(&a.graph, &s)?;
            let o = a.opts;
            let b = safety::verify(&g, &s, o.horizon, o.merge_p, o.mode)?;
            write_bounds(&a.out, &b)?;
            let last = &b.values[o.horizon];
            let max = last.iter().cloned().fold(0.0, f64::max);
            let mean = last.iter().sum::<f64>() / last.len() as f64;
            println!("{} at k={}: mean {mean:.4}, max {max:.4}, {} merges", o.mode, o.horizon, b.merges.len());
        }
        Command::Refine(a) => {
            let s = scenario_at(&a.scenario)?;
            let g = graph_for(&a.graph, &s)?;
            let o = a.opts;
            let old = match &a.bounds {
                Some(p) => bounds_at(p, o.mode, o.merge_p)?,
                None => safety::verify(&g, &s, o.horizon, o.merge_p, o.mode)?,
            };
            let (cell, target) = match (a.cell, a.target) {
                (Some(c), Some(t)) if !a.auto => (c, t),
                _ => refine::select_target(&s, &g, &old, a.k)?.ok_or(Error::NoRefinement)?,
            };
            let r = refine::refine_cell(&s, &g, cell, &target, a.steps)?;
            let prior = r.prior(&old);
            let horizon = old.horizon();
            let b = safety::verify_with_prior(&r.graph, &r.scenario, horizon, o.merge_p, o.mode, Some(&prior))?;
            fs::create_dir_all(&a.out)?;
            fs::write(a.out.join("scenario.toml"), r.scenario.to_document())?;
            fs::write(a.out.join("graph.txt"), graph::save_graph(&r.graph))?;
            write_bounds(&a.out.join("bounds.csv"), &b)?;
            let new = r.scenario.cell_count() - 1;
            println!(
                "split cell {cell} against {target} at offset {}{}",
                r.plan.chosen,
                if r.plan.fallback { " (axis fallback)" } else { "" }
            );
            println!(
                "k={horizon}: cell {cell} {:.4} -> {:.4}, new cell {new} {:.4}",
                old.values[horizon][cell], b.values[horizon][cell], b.values[horizon][new]
            );
        }
        Command::Simulate(a) => {
            let s = scenario_at(&a.scenario)?;
            if a.cell >= s.cell_count() {
                return Err(Error::validation("cell", "index out of range"));
            }
            let curve = mc::estimate_pk_curve(&s, a.cell, a.k, a.n, a.seed)?;
            let bounds = match &a.bounds {
                Some(p) => Some(bounds_at(p, Mode::Naive, 0.0)?),
                None => None,
            };
            let mut violated = false;
            for e in &curve {
                let mut line = format!("k={} hit {:.4} sd {:.4}", e.horizon, e.hit_fraction, e.stddev);
                if let Some(b) = bounds.as_ref().filter(|b| e.horizon <= b.horizon()) {
                    let bound = b.values[e.horizon][a.cell];
                    let ok = e.within(bound, report::MC_SIGMAS);
                    violated |= !ok;
                    line.push_str(&format!(" bound {bound:.4} {}", if ok { "ok" } else { "VIOLATED" }));
                }
                println!("{line}");
            }
            return Ok(violated);
        }
        Command::Render(a) => {
            let s = scenario_at(&a.scenario)?;
            let b = bounds_at(&a.bounds, Mode::Naive, 0.0)?;
            if a.k > b.horizon() {
                return Err(Error::validation("k", "beyond the bounds horizon"));
            }
            let img = render::render_heatmap(&b.values[a.k], &s, a.width)?;
            fs::write(&a.out, img)?;
        }
        Command::Compare(a) => {
            let s = scenario_at(&a.scenario)?;
            let g = graph_for(&a.graph, &s)?;
            let cfg = CompareConfig {
                horizon: a.horizon,
                merge_p: a.merge_p,
                select_k: a.k,
                steps: a.steps,
                mc_cell: a.mc_cell,
                mc_samples: a.n,
                seed: a.seed,
            };
            let rep = report::compare(&s, &g, &cfg)?;
            rep.write_csv(fs::File::create(&a.out)?)?;
            if let Some(p) = &a.summary {
                rep.write_summary_csv(fs::File::create(p)?)?;
            }
            for (name, k, mean, max) in rep.summary().into_iter().filter(|r| r.1 == a.horizon) {
                println!("{name:<18} k={k} mean {mean:.4} max {max:.4}");
            }
            for (cell, k, col) in &rep.violations {
                eprintln!("soundness violation: cell {cell} k={k} {col}");
            }
            return Ok(!rep.violations.is_empty());
        }
    }
    Ok(false)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
