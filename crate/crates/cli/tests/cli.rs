use std::path::Path;
use std::process::{Command, Output};

use ncrough::matrix_model::read_path;

fn ncrough(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncrough"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_row<'a>(text: &'a str, first: &str) -> Vec<&'a str> {
    text.lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|r| r[0] == first)
        .unwrap_or_else(|| panic!("no row {first} in\n{text}"))
}

#[test]
fn moments_catalan_and_q_half() {
    let o = ncrough(&["moments", "--q", "0", "--order", "8"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().next().unwrap(), "order,pairing,density,difference");
    assert_eq!(csv_row(&text, "8")[1], "14");
    let o = ncrough(&["moments", "--q", "0.5", "--order", "4"]);
    let text = stdout(&o);
    let row = csv_row(&text, "4");
    for cell in &row[1..3] {
        assert!((cell.parse::<f64>().unwrap() - 2.5).abs() < 1e-8);
    }
}

#[test]
fn moments_rejects_bad_q_and_order() {
    assert_eq!(ncrough(&["moments", "--q", "1.5"]).status.code(), Some(2));
    assert_eq!(ncrough(&["moments", "--q", "-1"]).status.code(), Some(2));
    assert_eq!(ncrough(&["moments", "--q", "0", "--order", "0"]).status.code(), Some(2));
    assert_eq!(ncrough(&["moments"]).status.code(), Some(2));
}

#[test]
fn validation_failures_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    for args in [
        vec!["study", "bg", "--n", "0"],
        vec!["study", "bg", "--bogus", "1"],
        vec!["study", "area-convergence", "--mesh_levels", "[3,2]"],
        vec!["solve", "--mesh_level", "12"],
        vec!["simulate", "--n", "512", "--level", "14"],
        vec!["study", "bg", "--seed", "minus"],
    ] {
        let mut a = args.clone();
        let o_str = out_arg(&out);
        a.extend(["--output", &o_str]);
        let o = ncrough(&a);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(!out.exists(), "{args:?} left output behind");
    }
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_ncrough"))
        .args(["study", "bg", "--print-config"])
        .env("NCROUGH_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solve_with_unit_coefficients_is_initial_plus_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = ncrough(&[
        "solve",
        "--n",
        "6",
        "--level",
        "7",
        "--mesh_level",
        "4",
        "--f",
        r#"[{"kind":"poly","coeffs":[1]}]"#,
        "--output",
        &out_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let y = read_path(std::fs::File::open(dir.path().join("solution.ncrp")).unwrap()).unwrap();
    let x = read_path(std::fs::File::open(dir.path().join("driving.ncrp")).unwrap()).unwrap();
    assert_eq!(y.len(), 17);
    let a = y.value(0);
    for k in 0..y.len() {
        let expect = a + x.value(k);
        assert!(y.value(k).max_abs_diff(&expect) < 1e-12);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["summary"]["self_adjoint_defect"].as_f64().unwrap() < 1e-12);
}

#[test]
fn blow_up_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = ncrough(&[
        "solve",
        "--n",
        "4",
        "--level",
        "6",
        "--mesh_level",
        "3",
        "--initial",
        r#"{"kind":"gue","scale":5}"#,
        "--f",
        r#"[{"kind":"poly","coeffs":[0,0,0,1]}]"#,
        "--output",
        &out_arg(&out),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn simulate_then_integrate_a_stored_path() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let o = ncrough(&["simulate", "--n", "8", "--level", "6", "--seed", "3", "--output", &out_arg(&sim)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stored = sim.join("path.ncrp");
    let path = read_path(std::fs::File::open(&stored).unwrap()).unwrap();
    assert_eq!((path.dim(), path.steps(), path.seed()), (8, 64, Some(3)));
    let text = std::fs::read_to_string(sim.join("simulate.csv")).unwrap();
    assert_eq!(text.lines().count(), 66);

    let int = dir.path().join("int");
    let input = out_arg(&stored);
    let o = ncrough(&[
        "integrate", "--n", "8", "--level", "6", "--f", r#"{"kind":"poly","coeffs":[0,1]}"#, "--input", &input,
        "--output", &out_arg(&int),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(int.join("integrate.csv")).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    assert!(row[0] < 1e-10 && row[1] < 1e-10, "{row:?}");

    let o = ncrough(&["integrate", "--n", "16", "--level", "6", "--input", &input, "--output", &out_arg(&int)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn printed_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = ncrough(&["study", "solution-convergence", "--print-config", "--n", "24", "--f.0.coeffs", "[0,2]"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = stdout(&o);
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["n"], 24);
    assert_eq!(v["seed"], 42);
    assert_eq!(v["f"][0]["coeffs"][1], 2.0);
    let file = dir.path().join("c.json");
    std::fs::write(&file, &first).unwrap();
    let o = ncrough(&["study", "solution-convergence", "--config", &out_arg(&file), "--print-config"]);
    assert_eq!(stdout(&o), first);
}

#[test]
fn failed_checks_exit_3_and_keep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = ncrough(&["study", "ito-strato", "--n", "16", "--level", "6", "--output", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("ito-strato residual"));
    let checks = std::fs::read_to_string(dir.path().join("checks.csv")).unwrap();
    assert!(checks.lines().any(|l| l.contains(",false,")));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["passed"], false);
    assert!(!manifest["failures"].as_array().unwrap().is_empty());
}

#[test]
fn ito_strato_passes_at_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = ncrough(&["study", "ito-strato", "--output", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["config"]["n"], 128);
    assert!(!manifest["git_describe"].as_str().unwrap().is_empty());
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ncrough(&["study", "bg", "--seeds", "4", "--seed", "11", "--output", &out_arg(out)]);
        assert_eq!(o.status.code(), Some(0));
    }
    for name in ["bg.csv", "checks.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let o = ncrough(&["study", "bg", "--seeds", "4", "--seed", "12", "--output", &out_arg(&b)]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(std::fs::read(a.join("bg.csv")).unwrap(), std::fs::read(b.join("bg.csv")).unwrap());
}
