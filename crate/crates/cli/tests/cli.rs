//! Exit statuses and output formats of the command-line tool.

use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_descent-mean"))
        .args(args)
        .output()
        .expect("failed to launch the CLI")
}

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("descent-mean-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn estimate_prints_one_row() {
    let input = scratch("samples.csv");
    let mut text = String::from("x,y\n");
    for i in 0..60 {
        text += &format!("{},{}\n", 1.0 + (i % 5) as f64 * 0.1, -2.0 + (i % 3) as f64 * 0.1);
    }
    std::fs::write(&input, text).unwrap();
    let out = run(&["estimate", "--input", input.to_str().unwrap(), "--k", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let row = String::from_utf8(out.stdout).unwrap();
    let values: Vec<f64> = row.trim().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 2);
    assert!((values[0] - 1.2).abs() < 0.2 && (values[1] + 1.9).abs() < 0.2, "{values:?}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["estimate", "--input", "/nonexistent/file.csv"]).status.code(), Some(1));
    assert_eq!(run(&["conc", "--grid", "1,-2"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn property_failures_exit_with_two() {
    let out = run(&["props", "--solver-tol", "100"]);
    assert_eq!(out.status.code(), Some(2));
    let ok = run(&["props"]);
    assert_eq!(ok.status.code(), Some(0));
    let csv = String::from_utf8(ok.stdout).unwrap();
    for name in ["dominance", "monotonicity", "bounded_difference", "equivariance", "contraction"] {
        assert!(csv.contains(name), "missing {name}");
    }
}

#[test]
fn concentration_table_has_one_row_per_multiplier() {
    let out = run(&["conc", "--k", "20", "--d", "4", "--trials", "10", "--grid", "1,4"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("c,radius,trials,exceed_fraction"));
}
