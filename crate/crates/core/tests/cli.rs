use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use fedtop::cli::experiment::CSV_HEADER;

const QUICK: &str = "\
dataset = synthetic
n = 20
d = 400
M = 10
S = 10
J = 1
I = 50
";

fn fedtop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedtop"))
        .args(args)
        .env_remove("FEDTOP_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn zero_iterations_print_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "zero.cfg", "dataset = synthetic\nI = 0\n");
    let text = stdout(&fedtop(&["run", "--config", &cfg]));
    assert_eq!(text.trim_end(), CSV_HEADER);
}

#[test]
fn quick_run_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.cfg", QUICK);
    let start = Instant::now();
    let first = stdout(&fedtop(&["run", "--config", &cfg, "--workers", "1"]));
    assert!(start.elapsed() < Duration::from_secs(5));
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + 51);
    let second = stdout(&fedtop(&["run", "--config", &cfg, "--workers", "3"]));
    assert_eq!(first, second);

    let out = dir.path().join("m.csv");
    stdout(&fedtop(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(std::fs::read_to_string(out).unwrap(), first);
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "M = 200\nS = 300\n");
    let out = fedtop(&["run", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`S`"));
}

#[test]
fn missing_mnist_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mnist.cfg", "I = 10\n");
    let out = fedtop(&[
        "run",
        "--config",
        &cfg,
        "--data-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn compare_writes_per_algorithm_files_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.cfg", QUICK);
    let out_dir = dir.path().join("cmp");
    let summary = stdout(&fedtop(&[
        "compare",
        "--config",
        &cfg,
        "--algorithms",
        "fedadmm,fedtop-admm-1,fedavg",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    for name in ["fedadmm", "fedtop-admm-1", "fedavg"] {
        let csv = std::fs::read_to_string(out_dir.join(format!("{name}.csv"))).unwrap();
        assert!(csv.starts_with(CSV_HEADER));
        assert!(summary.contains(name));
    }
    assert_eq!(
        std::fs::read_to_string(out_dir.join("summary.csv")).unwrap(),
        summary
    );
}

#[test]
fn gen_synth_writes_label_then_features() {
    let text = stdout(&fedtop(&[
        "gen-synth",
        "--n",
        "5",
        "--d",
        "7",
        "--density",
        "0.4",
        "--seed",
        "3",
    ]));
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 7);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert!(fields[0] == "0" || fields[0] == "1");
        assert!(fields[1..].iter().all(|f| f.parse::<f64>().is_ok()));
    }
    let again = stdout(&fedtop(&[
        "gen-synth",
        "--n",
        "5",
        "--d",
        "7",
        "--density",
        "0.4",
        "--seed",
        "3",
    ]));
    assert_eq!(text, again);
}
