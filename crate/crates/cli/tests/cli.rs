use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ppfl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppfl"))
        .args(args)
        .current_dir(dir)
        .env_remove("PPFL_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn adult() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/adult.csv")
}

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    let body = format!(
        "n_clients = 4\nrounds = 2\nlocal_iterations = 3\nlocal_size = 20\ndataset = {:?}\noutput_dir = \"out\"\n{extra}",
        adult().display().to_string()
    );
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn show_config_prints_defaults_that_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = ppfl(dir.path(), &["show-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("n_clients = 100"));
    let path = dir.path().join("defaults.toml");
    fs::write(&path, &text).unwrap();
    let again = ppfl(dir.path(), &["-c", path.to_str().unwrap(), "show-config"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "n_clients = 0\n").unwrap();
    let out = ppfl(dir.path(), &["-c", path.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(&path, "n_clients = \"many\"\n").unwrap();
    assert_eq!(ppfl(dir.path(), &["-c", path.to_str().unwrap(), "run"]).status.code(), Some(1));
    fs::write(&path, "no_such_key = 1\n").unwrap();
    assert_eq!(ppfl(dir.path(), &["-c", path.to_str().unwrap(), "run"]).status.code(), Some(1));
    assert_eq!(ppfl(dir.path(), &["attack", "--scenarios", "SNEAKY"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, "dataset = \"missing.csv\"\n").unwrap();
    let out = ppfl(dir.path(), &["-c", path.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn preprocess_reports_the_adult_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ppfl(dir.path(), &["preprocess", adult().to_str().unwrap(), "--out", "snap"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("45222 rows, 104 features (+intercept), 11208 positive\n"), "{text}");
    let again = String::from_utf8(ppfl(dir.path(), &["preprocess", adult().to_str().unwrap(), "--out", "snap"]).stdout).unwrap();
    assert_eq!(text, again);
    let snap = fs::read_dir(dir.path().join("snap")).unwrap().next().unwrap().unwrap().path();
    let out = ppfl(dir.path(), &["preprocess", snap.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_identical_outputs_twice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    let first = ppfl(dir.path(), &["-c", c, "run"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let read = |name: &str| fs::read(dir.path().join("out").join(name)).unwrap();
    let (m, w, t) = (read("metrics.csv"), read("weights.csv"), read("timing.csv"));
    assert!(String::from_utf8_lossy(&m).starts_with("config_hash,round,mode,epsilon,n,mcc,mse\n"));
    assert_eq!(String::from_utf8_lossy(&w).lines().count(), 106);
    assert!(ppfl(dir.path(), &["-c", c, "run"]).status.success());
    assert_eq!(m, read("metrics.csv"));
    assert_eq!(w, read("weights.csv"));
    assert_eq!(t, read("timing.csv"));
}

#[test]
fn output_dir_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = Command::new(env!("CARGO_BIN_EXE_ppfl"))
        .args(["-c", cfg.to_str().unwrap(), "run"])
        .current_dir(dir.path())
        .env("PPFL_OUTPUT_DIR", "elsewhere")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("elsewhere/metrics.csv").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn a_single_attack_iteration_is_flagged_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = ppfl(dir.path(), &["-c", cfg.to_str().unwrap(), "attack", "--scenarios", "NAIVE,DIFF", "--iterations", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("NAIVE") && text.contains("(undefined)"), "{text}");
    let csv = fs::read_to_string(dir.path().join("out/attack.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let summary = fs::read_to_string(dir.path().join("out/attack_summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().contains(",false,"));
}

#[test]
fn sweep_resumes_from_done_markers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[sweep]\nepsilons = [5e-4, 5e-7]\nclients = [3, 4]\nreplicates = 1\n");
    let c = cfg.to_str().unwrap();
    let first = ppfl(dir.path(), &["-c", c, "sweep"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(String::from_utf8(first.stdout).unwrap().contains("4 cells run, 0 resumed, 0 failed"));
    let merged = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(merged.lines().count(), 1 + 4 * 2);

    fs::remove_dir_all(dir.path().join("out/sweep/n4_eps5e-7_r0")).unwrap();
    let second = ppfl(dir.path(), &["-c", c, "sweep"]);
    assert!(String::from_utf8(second.stdout).unwrap().contains("1 cells run, 3 resumed, 0 failed"));
    assert_eq!(fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap(), merged);
}
