use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mvhedge"));
    c.env_remove("MVHEDGE_OUT").env("RUST_LOG", "error");
    c
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mvhedge-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

#[test]
fn figure_one_endpoint() {
    let dir = scratch("fig1");
    let o = run(&["figure", "1", "--paths", "20", "--gnuplot"], &dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.join("figure1.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "T,P0,Var,Herr,Error,sim_mse,sim_se");
    let last: Vec<f64> = csv.lines().last().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(last[0], 4e4);
    assert!((last[4] - 5.0664e-6).abs() < 1e-9);
    assert!((last[3] - 45.0141).abs() < 1e-3);
    assert!(fs::read_to_string(dir.join("figure1.gp")).unwrap().contains("figure1.csv"));
}

#[test]
fn figures_are_deterministic() {
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    for d in [&a, &b] {
        let o = run(&["figure", "3", "--paths", "200", "--horizon", "5", "--sweep-points", "5"], d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(a.join("figure3.csv")).unwrap(), fs::read(b.join("figure3.csv")).unwrap());
}

#[test]
fn unknown_figure_is_a_usage_error() {
    let dir = scratch("fig4");
    let o = run(&["figure", "4"], &dir);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn endowment_equal_to_claim_zeroes_the_errors() {
    let dir = scratch("pv");
    let o = run(&["figure", "2", "--paths", "10", "--endowment", "30000"], &dir);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.join("figure2.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(cols[2..].iter().all(|&x| x == 0.0), "{line}");
    }
}

#[test]
fn config_file_with_flag_override() {
    let dir = scratch("cfg");
    let cfg = dir.join("c.json");
    fs::write(&cfg, r#"{"horizon": 0.5, "paths": 500, "step": 0.05}"#).unwrap();
    let o = run(&["solve-bsde", "-c", cfg.to_str().unwrap(), "--constant", "123"], &dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.join("bsde.csv")).unwrap();
    assert!(csv.starts_with("t,mean_V,mean_Vbar_1,R2\n"));
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("0.45,123"), "{last}");
    assert!(dir.join("surface.csv").exists());
}

#[test]
fn malformed_config_is_rejected() {
    let dir = scratch("bad");
    let cfg = dir.join("c.json");
    fs::write(&cfg, r#"{"horizon": -1}"#).unwrap();
    let o = run(&["price", "-c", cfg.to_str().unwrap()], &dir);
    assert!(!o.status.success());
    fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    let o = run(&["price", "-c", cfg.to_str().unwrap()], &dir);
    assert!(!o.status.success());
}

#[test]
fn simulate_writes_paths() {
    let dir = scratch("sim");
    let o = run(&["simulate", "--count", "3", "--horizon", "0.1"], &dir);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.join("paths.csv")).unwrap();
    assert!(csv.starts_with("path,t,Y_1,S_1,D_1\n"));
    assert!(csv.lines().filter(|l| l.starts_with("2,")).count() >= 11);
}

#[test]
fn hedge_with_closed_form_value() {
    let dir = scratch("hedge");
    let o = run(
        &["hedge", "--closed-form-v", "--hedge-paths", "400", "--horizon", "0.5"],
        &dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("Herr"));
    assert!(dir.join("hedge_traces.csv").exists());
}

#[test]
fn validate_passes_on_defaults_and_fails_on_broken_moments() {
    let dir = scratch("val");
    let o = run(&["validate"], &dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let cfg = dir.join("c.json");
    fs::write(&cfg, r#"{"moment_exponent": 8.5}"#).unwrap();
    let o = run(&["validate", "-c", cfg.to_str().unwrap()], &dir);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL moment condition"));
}

#[test]
fn validate_with_doubled_step() {
    let dir = scratch("val2");
    let o = run(&["validate", "--step", "0.02"], &dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn env_var_sets_output_directory() {
    let dir = scratch("env");
    let o = bin()
        .args(["figure", "2", "--paths", "5"])
        .env("MVHEDGE_OUT", &dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.join("figure2.csv").exists());
}
