use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bmix(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmix"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = bmix(dir, args);
    assert!(
        o.status.success(),
        "bmix {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn log(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

const SMALL: &str = "[run]\nmc_events = 100000\n";

#[test]
fn curves_grid_and_first_row() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["--out", "o", "curves", "--step", "0.1", "--dm", "0.507"]);
    let mut r = csv::Reader::from_path(tmp.path().join("o/curves.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["dt", "a_qm", "a_sd", "ps_min", "ps_max"]);
    let rows: Vec<Vec<f64>> = r
        .records()
        .map(|x| x.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 201);
    let first = &rows[0];
    assert_eq!(first[0], 0.0);
    assert!((first[1] - 1.0).abs() < 1e-15);
    // equal decay times with weight e^{-2t/tau}: <cos^2(dm t)> = (1 + 1/(1 + (dm tau)^2)) / 2
    let y2 = (0.507 * 1.53f64).powi(2);
    assert!((first[2] - 0.5 * (1.0 + 1.0 / (1.0 + y2))).abs() < 1e-9);
    assert!((first[2] - 0.8122).abs() < 5e-5);
    assert!((first[4] - 1.0).abs() < 1e-12);
    assert!(first[3] <= first[2]);
    assert!(tmp.path().join("o/curves.log.json").exists());
}

#[test]
fn curves_bad_grid_is_validation_error() {
    let tmp = TempDir::new().unwrap();
    let o = bmix(tmp.path(), &["curves", "--step", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reproduce_prints_table_and_logs_midpoint_shift() {
    let tmp = TempDir::new().unwrap();
    let o = ok(tmp.path(), &["--out", "o", "reproduce"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let qm = text.lines().find(|l| l.starts_with("qm dm ")).unwrap();
    assert!(qm.contains("0.5010") && qm.ends_with("PASS"), "{qm}");
    assert!(text.contains("sigma qm-sd") && text.contains("zeta_err"));
    let l = log(&tmp.path().join("o"), "reproduce.log.json");
    let shifts = l["details"]["midpoint_rule_shift"].as_array().unwrap();
    assert_eq!(shifts.len(), 4);
    assert!(shifts.iter().all(|s| s["d_chi2"].as_f64().unwrap().is_finite()));
    assert_eq!(l["details"]["checks"].as_array().unwrap().len(), 11);
}

#[test]
fn reproduce_missing_fixture() {
    let tmp = TempDir::new().unwrap();
    let o = bmix(tmp.path(), &["reproduce", "--fixture", "absent.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.csv"));
}

#[test]
fn stochastic_commands_need_a_seed() {
    let tmp = TempDir::new().unwrap();
    let o = bmix(tmp.path(), &["generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
}

#[test]
fn config_errors_carry_location() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[model]\ndm = 0.5\nmass = 1\n").unwrap();
    let o = bmix(tmp.path(), &["--config", "bad.toml", "curves"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml") && err.contains("mass") && err.contains("line 3"), "{err}");
}

#[test]
fn fit_boundary_is_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let mut s = String::from("bin,lo_ps,hi_ps,a,total,stat,syst_total\n");
    let edges = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 9.0, 13.0, 20.0];
    for i in 0..11 {
        s.push_str(&format!("{},{},{},1.0,0.05,0.05,0\n", i + 1, edges[i], edges[i + 1]));
    }
    fs::write(tmp.path().join("flat.csv"), s).unwrap();
    fs::write(tmp.path().join("loose.toml"), "[constraint]\nsigma = 1000.0\n").unwrap();
    let o = bmix(tmp.path(), &["--config", "loose.toml", "fit", "flat.csv", "--models", "qm"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["--out", "a", "--seed", "17", "generate", "--n-signal", "3000"]);
    ok(tmp.path(), &["--out", "b", "--seed", "17", "generate", "--n-signal", "3000"]);
    ok(tmp.path(), &["--out", "c", "--seed", "18", "generate", "--n-signal", "3000"]);
    let read = |d: &str, f: &str| fs::read(tmp.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "events.csv"), read("b", "events.csv"));
    assert_eq!(read("a", "generate.log.json"), read("b", "generate.log.json"));
    assert_ne!(read("a", "events.csv"), read("c", "events.csv"));
    let l = log(&tmp.path().join("a"), "generate.log.json");
    assert_eq!(l["seed"], 17);
    assert_eq!(l["outputs"]["events.csv"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_background_subtraction_is_noop() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("clean.toml"), "[backgrounds]\n").unwrap();
    ok(tmp.path(), &["--config", "clean.toml", "--seed", "3", "--out", "o", "generate", "--n-signal", "5000"]);
    ok(tmp.path(), &["--config", "clean.toml", "--out", "o", "analyze", "o/events.csv"]);
    let o = tmp.path().join("o");
    assert_eq!(fs::read(o.join("counts.csv")).unwrap(), fs::read(o.join("counts_subtracted.csv")).unwrap());
    assert_eq!(log(&o, "analyze.log.json")["details"]["background_subtracted"], 0.0);
}

#[test]
fn qm_chain_prefers_qm() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), SMALL).unwrap();
    let common = ["--config", "run.toml", "--seed", "21", "--replicas", "30", "--out", "o"];
    let with = |extra: &[&str]| -> Vec<String> { common.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());
    };
    run(&["generate", "--model", "qm"]);
    run(&["analyze", "o/events.csv"]);
    run(&["unfold", "o/counts.csv"]);
    run(&["fit", "o/unfolded.csv", "--models", "qm,sd,ps"]);

    let o = dir.join("o");
    let fits = log(&o, "fit.log.json")["details"]["fits"].as_array().unwrap().clone();
    let chi2 = |m: &str| fits.iter().find(|f| f["model"] == m).unwrap()["chi2"].as_f64().unwrap();
    assert!(chi2("sd") > chi2("qm"));
    assert!(chi2("ps") > chi2("qm"));

    // the unfolding log chains to the analysis output by hash
    let analyze = log(&o, "analyze.log.json");
    let unfold = log(&o, "unfold.log.json");
    assert_eq!(unfold["inputs"]["o/counts.csv"], analyze["outputs"]["counts.csv"]);
    let spectrum = fs::read_to_string(o.join("unfolded.csv")).unwrap();
    for col in ["event_sel", "bkgd_sub", "wrong_tags", "deconvolution"] {
        assert!(spectrum.lines().next().unwrap().contains(col));
    }

    // a stored response reproduces the unfolded spectrum
    fs::create_dir(dir.join("p")).unwrap();
    let args = [
        "--config", "run.toml", "--seed", "21", "--replicas", "30", "--out", "p", "unfold", "o/counts.csv",
        "--response", "o",
    ];
    ok(dir, &args);
    assert_eq!(fs::read(o.join("unfolded.csv")).unwrap(), fs::read(dir.join("p/unfolded.csv")).unwrap());
}

#[test]
fn unfold_rejects_mismatched_binning() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("counts.csv"), "bin,lo_ps,hi_ps,n_of,n_sf,var_of,var_sf,cov_of_sf\n1,0,1,5,5,5,5,0\n2,1,2,5,5,5,5,0\n").unwrap();
    let o = bmix(dir, &["--seed", "1", "unfold", "counts.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("binning mismatch"));
}
