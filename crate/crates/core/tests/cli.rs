//! The command-line front end, end to end.

use std::path::Path;
use std::process::{Command, Output};

fn nnsafe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnsafe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nnsafe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (s, g, b) = (p(d, "s.toml"), p(d, "g.txt"), p(d, "b.csv"));
    ok(&["make-demo", "--grid", "3", "--widths", "4", "--seed", "1", "--out", &s]);
    ok(&["build-graph", "--scenario", &s, "--dq", "0.05", "--jobs", "2", "--out", &g]);
    let out = ok(&["verify", "--graph", &g, "--scenario", &s, "--horizon", "4", "--mode", "tpn", "--out", &b]);
    assert!(out.contains("tpn at k=4"));
    let bounds = std::fs::read_to_string(&b).unwrap();
    assert_eq!(bounds.lines().count(), 1 + 9 * 5);

    let img = p(d, "h.ppm");
    ok(&["render", "--scenario", &s, "--bounds", &b, "--k", "4", "--width", "60", "--out", &img]);
    assert!(std::fs::read(&img).unwrap().starts_with(b"P6\n60 60\n255\n"));

    let rdir = p(d, "r");
    ok(&["refine", "--scenario", &s, "--graph", &g, "--bounds", &b, "--mode", "tpn", "--auto", "--steps", "2", "--out", &rdir]);
    let rs = p(d, "r/scenario.toml");
    let rg = p(d, "r/graph.txt");
    ok(&["verify", "--graph", &rg, "--scenario", &rs, "--horizon", "2", "--out", &p(d, "rb.csv")]);

    let sim = ok(&["simulate", "--scenario", &s, "--cell", "0", "--k", "4", "--n", "300", "--bounds", &b]);
    assert_eq!(sim.lines().count(), 5);
    assert!(!sim.contains("VIOLATED"));

    let c = p(d, "c.csv");
    ok(&["compare", "--scenario", &s, "--graph", &g, "--horizon", "3", "--n", "300", "--out", &c, "--summary", &p(d, "sum.csv")]);
    let header = std::fs::read_to_string(&c).unwrap();
    assert!(header.starts_with("cell_id,parent,k,naive,merge,tpn,merge_tpn,refined_merge_tpn,mc_fraction,mc_stddev\n"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (s, g) = (p(d, "s.toml"), p(d, "g.txt"));
    ok(&["make-demo", "--grid", "2", "--widths", "4", "--out", &s]);
    ok(&["build-graph", "--scenario", &s, "--dq", "0.1", "--out", &g]);

    let text = std::fs::read_to_string(&g).unwrap();
    let cut = p(d, "cut.txt");
    std::fs::write(&cut, &text[..text.len() / 2]).unwrap();
    let out = nnsafe(&["verify", "--graph", &cut, "--scenario", &s, "--out", &p(d, "b.csv")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));

    let out = nnsafe(&["verify", "--graph", &g, "--scenario", &s, "--mode", "fast", "--out", &p(d, "b.csv")]);
    assert!(!out.status.success());

    let other = p(d, "o.toml");
    ok(&["make-demo", "--grid", "2", "--widths", "4", "--sigma", "0.4", "--out", &other]);
    let out = nnsafe(&["verify", "--graph", &g, "--scenario", &other, "--out", &p(d, "b.csv")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("different scenario"));
}

#[test]
fn soundness_violation_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = p(d, "s.toml");
    ok(&["make-demo", "--grid", "5", "--widths", "4", "--out", &s]);
    // the obstacle cell hits at k = 0; claim it never does
    let b = p(d, "zero.csv");
    let mut table = String::from("cell_id,k,bound\n");
    for i in 0..25 {
        table.push_str(&format!("{i},0,0\n"));
    }
    std::fs::write(&b, table).unwrap();
    let out = nnsafe(&["simulate", "--scenario", &s, "--cell", "13", "--k", "0", "--n", "50", "--bounds", &b]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("VIOLATED"));
}
