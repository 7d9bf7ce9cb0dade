//! Graph, verification and refinement on the demo scenario.

use nnsafe::demo::make_demo_scenario;
use nnsafe::geometry::Polytope;
use nnsafe::graph::{self, build_graph, load_graph, save_graph, NodeId};
use nnsafe::mc;
use nnsafe::refine;
use nnsafe::safety::{self, Mode, SafetyBounds};
use nnsafe::scenario::Scenario;
use nnsafe::Error;

fn small() -> Scenario {
    make_demo_scenario(3, &[4], 2).unwrap()
}

#[test]
fn graph_document_round_trips() {
    let s = small();
    let (g, _) = build_graph(&s, 0.05, 2).unwrap();
    let text = save_graph(&g);
    let back = load_graph(&text).unwrap();
    assert_eq!(back, g);
    back.check_scenario(&s).unwrap();
    let cut = &text[..text.len() - 10];
    assert!(matches!(load_graph(cut), Err(Error::Checksum)));
    let other = make_demo_scenario(3, &[6], 2).unwrap();
    assert!(back.check_scenario(&other).is_err());
}

#[test]
fn parallel_build_is_deterministic() {
    let s = small();
    let (a, _) = build_graph(&s, 0.05, 1).unwrap();
    let (b, _) = build_graph(&s, 0.05, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pinned_and_sink_rows() {
    let s = make_demo_scenario(5, &[4], 0).unwrap();
    let (g, _) = build_graph(&s, 0.05, 0).unwrap();
    for i in 0..g.cell_count() {
        let sum: f64 = g.pieces[i].iter().sum();
        assert!((g.sink[i] - sum.min(1.0)).abs() < 1e-15);
        assert!(g.edges[i].iter().all(|e| (g.q_floor..=1.0).contains(e)));
    }
    let b = safety::verify(&g, &s, 4, 0.01, Mode::Naive).unwrap();
    // the obstacle cell stays at 1 at every horizon
    assert!(b.values.iter().all(|row| row[13] == 1.0));
    for k in 1..=4 {
        for i in 0..g.cell_count() {
            assert!(b.values[k][i] >= b.values[k - 1][i] - 1e-12, "cell {i} k {k}");
        }
    }
}

#[test]
fn bounds_csv_round_trips() {
    let s = small();
    let (g, _) = build_graph(&s, 0.05, 0).unwrap();
    let b = safety::verify(&g, &s, 3, 0.01, Mode::Tpn).unwrap();
    let mut buf = Vec::new();
    b.write_csv(&mut buf).unwrap();
    let back = SafetyBounds::read_csv(buf.as_slice(), Mode::Tpn, 0.01).unwrap();
    assert_eq!(back.values, b.values);
    assert!(String::from_utf8(buf).unwrap().starts_with("cell_id,k,bound\n"));
}

#[test]
fn refinement_update_matches_rebuild() {
    let s = small();
    let (g, _) = build_graph(&s, 0.05, 0).unwrap();
    let b = safety::verify(&g, &s, 6, 0.01, Mode::MergeTpn).unwrap();
    let (cell, target) = refine::select_target(&s, &g, &b, 6).unwrap().expect("a target");
    let r = refine::refine_cell(&s, &g, cell, &target, 3).unwrap();
    assert_eq!(r.scenario.cell_count(), s.cell_count() + 1);
    assert_eq!(r.parent[cell], cell);
    assert_eq!(*r.parent.last().unwrap(), cell);
    let (fresh, _) = build_graph(&r.scenario, 0.05, 0).unwrap();
    assert_eq!(r.graph.edges, fresh.edges);
    assert_eq!(r.graph.pieces, fresh.pieces);
    assert_eq!(r.graph.sink, fresh.sink);
    assert_eq!(r.graph.scenario_hash, r.scenario.content_hash());
    // the halves tile the parent cell
    let parent = &s.cell(cell).region;
    let halves: Vec<&Polytope> = [cell, s.cell_count()]
        .iter()
        .map(|&i| &r.scenario.cell(i).region)
        .collect();
    for stream in 0..200 {
        let x = mc::sample_in_cell(&s, cell, 5, stream).unwrap();
        assert!(halves.iter().any(|h| h.contains(&x, 1e-9)));
    }
    for h in halves {
        let x = mc::sample_in_cell(&r.scenario, cell, 6, 0).unwrap();
        assert!(parent.contains(&x, 1e-9));
        assert!(h.has_interior(2));
    }
}

#[test]
fn witness_lies_in_source_and_reaches_target() {
    let s = small();
    let (g, _) = build_graph(&s, 0.05, 0).unwrap();
    for i in 0..g.cell_count() {
        for j in 0..g.cell_count() {
            let (q_l, _) = graph::bracket(g.edges[i][j], g.q_floor);
            if q_l <= 0.0 {
                continue;
            }
            let w = graph::edge_witness(&s, &g, i, &s.cell(j).region, g.edges[i][j]).unwrap();
            assert!(s.cell(i).region.contains(&w.x, 1e-6));
            let next = s.mean_step_in(&w.x, i);
            for (a, b) in next.iter().zip(&w.x_next) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn manual_refinement_and_floor_edges() {
    let s = make_demo_scenario(5, &[4], 0).unwrap();
    let (g, _) = build_graph(&s, 0.05, 0).unwrap();
    let cell = (0..25)
        .find(|&i| i != 13 && g.pieces[i].iter().any(|p| *p > g.q_floor))
        .expect("a cell near the unsafe set");
    let r = refine::refine_cell(&s, &g, cell, &NodeId::UnsafeSink, 2).unwrap();
    assert!(r.plan.translations.len() <= 2);
    assert!(r.plan.fallback || r.plan.translations.iter().any(|t| t.0 == r.plan.chosen));
    // an edge at the floor bound has no witness to split against
    let floor = (0..25).find(|&j| g.edges[0][j] <= g.q_floor).unwrap();
    assert!(matches!(
        refine::refine_cell(&s, &g, 0, &NodeId::Cell(floor), 2),
        Err(Error::FloorEdge { .. })
    ));
}
