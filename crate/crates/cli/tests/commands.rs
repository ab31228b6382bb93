use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distobs::io::{self, GainsFile, NodeGainsFile, ProblemFile};
use distobs::synthesis::{self, synthesize};
use nalgebra::DMatrix;
use serde_json::Value;
use tempfile::TempDir;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn distobs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distobs")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON error in {text:?}"));
    serde_json::from_str::<Value>(line).unwrap()["error"].clone()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesize `problem` into `dir/gains.json`, asserting success.
fn synthesize_into(dir: &TempDir, problem: &Path) -> PathBuf {
    let gains = dir.path().join("gains.json");
    let out = distobs(&["synthesize", path_str(problem), path_str(&gains), "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    gains
}

fn write_problem(dir: &TempDir, name: &str, edit: impl FnOnce(&mut ProblemFile)) -> PathBuf {
    let mut pf: ProblemFile = io::read_json(&data("standard_problem.json")).unwrap();
    edit(&mut pf);
    let path = dir.path().join(name);
    io::write_json(&path, &pf).unwrap();
    path
}

#[test]
fn standard_problem_has_order_nine() {
    let dir = TempDir::new().unwrap();
    let gains = dir.path().join("gains.json");
    let out = distobs(&["synthesize", path_str(&data("standard_problem.json")), path_str(&gains), "--json"]);
    assert_eq!(code(&out), 0);
    let report = stdout_json(&out);
    assert_eq!(report["total_order"], 9);
    let file: GainsFile = io::read_json(&gains).unwrap();
    assert_eq!(file.total_order, 9);
    assert_eq!(file.nodes.len(), 3);
}

#[test]
fn broken_graph_is_infeasible() {
    let dir = TempDir::new().unwrap();
    let problem = write_problem(&dir, "broken.json", |pf| {
        pf.graph.edges.pop();
    });
    let out = distobs(&["synthesize", path_str(&problem), path_str(&dir.path().join("g.json"))]);
    assert_eq!(code(&out), 2);
    assert_eq!(stderr_error(&out)["step"], "graph");
    assert!(!dir.path().join("g.json").exists());
}

#[test]
fn unobservable_plant_is_infeasible() {
    let dir = TempDir::new().unwrap();
    let problem = write_problem(&dir, "unobs.json", |pf| {
        // nobody measures the oscillator
        pf.c[0] = vec![0.0, 0.0, 1.0, 1.0];
    });
    let out = distobs(&["synthesize", path_str(&problem), path_str(&dir.path().join("g.json"))]);
    assert_eq!(code(&out), 2);
    assert_eq!(stderr_error(&out)["step"], "observability");
}

#[test]
fn malformed_problem_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let problem = dir.path().join("bad.json");
    std::fs::write(&problem, "{\"A\": [[1, 2], [3]]").unwrap();
    let out = distobs(&["synthesize", path_str(&problem), path_str(&dir.path().join("g.json"))]);
    assert_eq!(code(&out), 1);
    let out = distobs(&["synthesize", path_str(&dir.path().join("missing.json")), path_str(&dir.path().join("g.json"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn default_simulation_reaches_the_design_rate() {
    let dir = TempDir::new().unwrap();
    let problem = data("standard_problem.json");
    let gains = synthesize_into(&dir, &problem);
    let trace = dir.path().join("trace.csv");
    let summary = dir.path().join("summary.json");
    let out = distobs(&[
        "simulate",
        path_str(&gains),
        path_str(&problem),
        "--trace-out",
        path_str(&trace),
        "--summary-out",
        path_str(&summary),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert!(doc["alpha_hat"].as_f64().unwrap() >= 1.0 - 0.05);
    assert_eq!(doc["low_confidence"], false);
    assert!(doc["max_invariance_residual"].as_f64().unwrap() <= 1e-6);
    let written: Value = io::read_json(&summary).unwrap();
    assert_eq!(written, doc);

    let csv = std::fs::read_to_string(&trace).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("t,x_1,x_2,x_3,x_4,z_1_1"));
    assert!(csv.lines().count() > 100);
}

#[test]
fn short_horizon_is_low_confidence_not_divergence() {
    let dir = TempDir::new().unwrap();
    let problem = data("standard_problem.json");
    let gains = synthesize_into(&dir, &problem);
    let out = distobs(&["simulate", path_str(&gains), path_str(&problem), "--tfinal", "0.001"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert_eq!(doc["low_confidence"], true);
    assert!(doc["alpha_hat"].is_null());
}

#[test]
fn corrupted_or_mismatched_gains_are_input_errors() {
    let dir = TempDir::new().unwrap();
    let problem = data("standard_problem.json");
    let gains = synthesize_into(&dir, &problem);

    let text = std::fs::read_to_string(&gains).unwrap();
    let cut = dir.path().join("cut.json");
    std::fs::write(&cut, &text[..text.len() / 2]).unwrap();
    assert_eq!(code(&distobs(&["simulate", path_str(&cut), path_str(&problem)])), 1);
    assert_eq!(code(&distobs(&["verify", path_str(&cut), path_str(&problem)])), 1);

    let out = distobs(&["simulate", path_str(&gains), path_str(&data("single_node.json"))]);
    assert_eq!(code(&out), 1);

    let out = distobs(&["simulate", path_str(&gains), path_str(&problem), "--x0", "1,2"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn pipeline_output_verifies() {
    for name in ["standard_problem.json", "rank_deficient.json", "single_node.json"] {
        let dir = TempDir::new().unwrap();
        let problem = data(name);
        let gains = synthesize_into(&dir, &problem);
        let out = distobs(&["verify", path_str(&gains), path_str(&problem), "--json"]);
        assert_eq!(code(&out), 0, "{name}: {}", String::from_utf8_lossy(&out.stdout));
        let doc = stdout_json(&out);
        assert_eq!(doc["pass"], true);
        let names: Vec<_> = doc["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap().to_string()).collect();
        for required in ["cancellation", "lmi", "rate", "invariance"] {
            assert!(names.iter().any(|n| n == required), "{name}: missing {required}");
        }
    }
}

#[test]
fn perturbed_output_gain_fails_cancellation() {
    let dir = TempDir::new().unwrap();
    let problem = data("standard_problem.json");
    let gains = synthesize_into(&dir, &problem);
    let mut file: GainsFile = io::read_json(&gains).unwrap();
    file.nodes[0].l_gain[0][0] += 1e-3;
    io::write_json(&gains, &file).unwrap();

    let out = distobs(&["verify", path_str(&gains), path_str(&problem)]);
    assert_eq!(code(&out), 4);
    let err = stderr_error(&out);
    assert_eq!(err["step"], "certification");
    assert!(err["message"].as_str().unwrap().contains("cancellation"));
    let table = String::from_utf8_lossy(&out.stdout);
    let row = table.lines().find(|l| l.starts_with("cancellation")).unwrap();
    assert!(row.ends_with("FAIL"));
}

/// Gains for the single-node problem rebuilt with `H = 0`.
fn zero_injection_gains(dir: &TempDir, problem: &Path, gains: &Path) -> PathBuf {
    let p = io::read_problem(problem).unwrap();
    let s = synthesize(&p.plant, &p.graph, &p.params).unwrap();
    let d = &s.decompositions[0];
    assert!(distobs::linalg::spectral_abscissa(&d.a22) > -p.params.alpha, "A_22 already meets the rate");
    let zero = DMatrix::zeros(d.estimated_dim(), d.p_dim);
    let g = synthesis::assemble_gains(d, &s.factorizations[0], &zero, &s.realization.nodes[0].p_ie).unwrap();
    let mut file: GainsFile = io::read_json(gains).unwrap();
    file.nodes[0] = NodeGainsFile::from_gains(&g);
    let out = dir.path().join("zeroed.json");
    io::write_json(&out, &file).unwrap();
    out
}

#[test]
fn zeroed_injection_fails_the_rate() {
    let dir = TempDir::new().unwrap();
    let problem = data("single_node.json");
    let gains = synthesize_into(&dir, &problem);
    let zeroed = zero_injection_gains(&dir, &problem, &gains);

    let out = distobs(&["verify", path_str(&zeroed), path_str(&problem), "--json"]);
    assert_eq!(code(&out), 4);
    let doc = stdout_json(&out);
    let checks = doc["checks"].as_array().unwrap();
    let row = |name: &str| checks.iter().find(|c| c["name"] == name).unwrap().clone();
    assert_eq!(row("cancellation")["pass"], true);
    assert_eq!(row("rate")["pass"], false);

    let out = distobs(&["simulate", path_str(&zeroed), path_str(&problem), "--tfinal", "20"]);
    assert_eq!(code(&out), 3);
    assert_eq!(stderr_error(&out)["step"], "simulation");
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let problem = data("standard_problem.json");
    let run = || {
        let dir = TempDir::new().unwrap();
        let gains = dir.path().join("gains.json");
        let trace = dir.path().join("trace.csv");
        let synth = distobs(&["synthesize", path_str(&problem), path_str(&gains)]);
        let sim = distobs(&[
            "simulate",
            path_str(&gains),
            path_str(&problem),
            "--seed",
            "7",
            "--stride",
            "5",
            "--trace-out",
            path_str(&trace),
        ]);
        let verify = distobs(&["verify", path_str(&gains), path_str(&problem), "--seed", "3"]);
        (
            synth.stdout,
            std::fs::read(&gains).unwrap(),
            sim.stdout,
            std::fs::read(&trace).unwrap(),
            verify.stdout,
        )
    };
    assert_eq!(run(), run());
}
