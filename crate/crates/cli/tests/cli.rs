use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use contistream::commands::{self, METRICS_CSV};

const TINY: &str = r#"strategy = "md"
seeds = [0, 1]

[scenario]
task_count = 2

[scenario.synthetic]
classes = 4
per_class = 30
feature_dim = 3

[train]
epochs = 1
batch_size = 16
memory_capacity = 12
hidden = [6]
embedding_dim = 5
head_mode = "cascaded_gates"

[grid]
lambdas = [0.5, 0.1]
"#;

fn contistream(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contistream"))
        .args(args)
        .current_dir(dir)
        .env_remove(contistream::config::SEED_ENV)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_then_report_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), TINY);
    let run = contistream(&["run", "--config", "exp.toml", "--out", "out"], dir.path());
    assert!(run.status.success(), "{}", stderr(&run));
    let out = dir.path().join("out");
    assert_eq!(commands::read_runs(&out).unwrap().len(), 2);
    let metrics = std::fs::read_to_string(out.join(METRICS_CSV)).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(out.join("resolved_config.toml").is_file());

    let report = contistream(&["report", "--out", "out"], dir.path());
    assert!(report.status.success(), "{}", stderr(&report));
    assert!(out.join("summary.csv").is_file());
}

#[test]
fn seed_flag_overrides_environment_and_file() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_contistream"))
        .args([
            "run", "--config", "exp.toml", "--out", "out", "--seeds", "3",
        ])
        .env(contistream::config::SEED_ENV, "4")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let docs = commands::read_runs(&dir.path().join("out")).unwrap();
    assert_eq!(
        docs.iter().map(|d| d.metrics.seed).collect::<Vec<_>>(),
        vec![3]
    );
}

#[test]
fn grid_writes_selection() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), TINY);
    let o = contistream(&["grid", "--config", "exp.toml", "--out", "g"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = std::fs::read_to_string(dir.path().join("g/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 3);
}

#[test]
fn config_errors_exit_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        TINY.replace("strategy = \"md\"\n", ""),
        TINY.replace("epochs = 1", "epochs = 1\nepoch = 2"),
        TINY.replace("batch_size = 16", "batch_size = 0"),
        TINY.replace("[train]\n", "[train]\nlearning_rate = -1.0\n"),
    ];
    for body in cases {
        write_config(dir.path(), &body);
        let o = contistream(&["run", "--config", "exp.toml", "--out", "out"], dir.path());
        assert_eq!(o.status.code(), Some(2), "{body}\n{}", stderr(&o));
        assert!(stderr(&o).contains("exp.toml"), "{}", stderr(&o));
        assert!(!dir.path().join("out").exists());
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        &TINY.replace("strategy = \"md\"", "strategy = \"naive\""),
    );
    let grid = contistream(&["grid", "--config", "exp.toml", "--out", "g"], dir.path());
    assert_eq!(grid.status.code(), Some(2), "{}", stderr(&grid));
    let missing = contistream(&["run", "--config", "nope.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let report = contistream(&["report", "--out", "empty"], dir.path());
    assert_eq!(report.status.code(), Some(2));
    let seeds = contistream(&["run", "--config", "exp.toml", "--seeds", "x"], dir.path());
    assert_eq!(seeds.status.code(), Some(2));
}

#[test]
fn timing_and_overhead_print_tables() {
    let dir = tempfile::tempdir().unwrap();
    let t = contistream(
        &["timing", "--tasks", "3", "--repeats", "10", "--out", "t"],
        dir.path(),
    );
    assert!(t.status.success(), "{}", stderr(&t));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("t/timing.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    let few = contistream(&["timing", "--repeats", "2"], dir.path());
    assert_eq!(few.status.code(), Some(2));
    write_config(dir.path(), TINY);
    let o = contistream(&["overhead", "--config", "exp.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("memory_floats"));
}
