use std::path::Path;
use std::process::{Command, Output};

fn sdpcoulomb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdpcoulomb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn report(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("report.json")).expect("report written");
    serde_json::from_str(&text).expect("valid json")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn solve2_three_sites_three_electrons() {
    let out = sdpcoulomb(&[
        "solve2",
        "--grid",
        "3",
        "--electrons",
        "3",
        "--marginal",
        "uniform",
        "--tol",
        "1e-7",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let lower = r["lower_bound"].as_f64().unwrap();
    assert!((lower - 1.25).abs() <= 10.0 * 1e-7 * 1.25, "{lower}");
    assert_eq!(r["lower_source"], "sdp-coulomb");
}

#[test]
fn solve3_needs_three_electrons() {
    let out = sdpcoulomb(&["solve3", "--grid", "4", "--electrons", "2"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&sdpcoulomb(&["solve2", "--bogus"])), 1);
    assert_eq!(code(&sdpcoulomb(&["frobnicate"])), 1);
    assert_eq!(code(&sdpcoulomb(&["solve2", "--marginal", "lumpy"])), 1);
    assert_eq!(code(&sdpcoulomb(&["--help"])), 0);
}

#[test]
fn large_grids_need_opt_in() {
    let out = sdpcoulomb(&["solve2", "--grid", "1600", "--electrons", "8"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("1600"));
}

#[test]
fn oracle_examples() {
    let out = sdpcoulomb(&["oracle", "--grid", "4", "--electrons", "3"]);
    assert_eq!(code(&out), 0);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((r["metrics"]["exact"].as_f64().unwrap() - 11.0 / 8.0).abs() < 1e-14);

    let out = sdpcoulomb(&["oracle", "--grid", "4", "--electrons", "2"]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((r["metrics"]["exact"].as_f64().unwrap() - 0.25).abs() < 1e-15);
}

#[test]
fn oracle_sandwich_check() {
    let out = sdpcoulomb(&[
        "oracle",
        "--grid",
        "6",
        "--electrons",
        "3",
        "--marginal",
        "gaussian",
        "--compare-truth",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["metrics"]["sandwich_pass"], 1.0);
    assert!(r["lower_bound"].as_f64().unwrap() <= r["upper_bound"].as_f64().unwrap() + 1e-5);
}

#[test]
fn unconstrained_round_closes_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = sdpcoulomb(&[
        "round",
        "--grid",
        "3",
        "--electrons",
        "3",
        "--tol",
        "1e-8",
        "--out",
        out_dir,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    assert!(r["e_gap"].as_f64().unwrap().abs() < 1e-8);
    assert_eq!(r["upper_source"], "rounded");
    assert!(dir.path().join("gamma_rounded.csv").exists());
    assert!(dir.path().join("gamma_relaxed.csv").exists());
}

#[test]
fn report_gap_matches_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdpcoulomb(&[
        "round",
        "--grid",
        "6",
        "--electrons",
        "3",
        "--marginal",
        "gaussian",
        "--tol",
        "1e-6",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    let lower = r["lower_bound"].as_f64().unwrap();
    let upper = r["upper_bound"].as_f64().unwrap();
    assert!(((upper - lower) / lower - r["e_gap"].as_f64().unwrap()).abs() <= 1e-15);
    assert_eq!(r["lower_source"], "sdp-coulomb2");
}

#[test]
fn potential_csv_reproduces_reported_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdpcoulomb(&[
        "dual",
        "--grid",
        "12",
        "--electrons",
        "2",
        "--marginal",
        "uniform",
        "--compare-truth",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let reported = report(dir.path())["metrics"]["error_v"].as_f64().unwrap();
    let mut rd = csv::Reader::from_path(dir.path().join("potential.csv")).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for rec in rd.records() {
        let rec = rec.unwrap();
        let v: f64 = rec[1].parse().unwrap();
        let w: f64 = rec[2].parse().unwrap();
        num += (v - w).powi(2);
        den += v * v;
    }
    assert!(((num / den).sqrt() - reported).abs() <= 1e-12 * reported.max(1.0));
}

#[test]
fn compare_truth_needs_one_dimension() {
    let out = sdpcoulomb(&[
        "dual",
        "--dim",
        "2",
        "--grid",
        "3",
        "--electrons",
        "2",
        "--marginal",
        "gaussian2d",
        "--compare-truth",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "points_per_dim = 4\nelectrons = 2\nmarginal = \"uniform\"\n",
    )
    .unwrap();
    let out = sdpcoulomb(&[
        "oracle",
        "--config",
        cfg.to_str().unwrap(),
        "--electrons",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["config"]["points_per_dim"], 4);
    assert_eq!(r["config"]["electrons"], 3);

    std::fs::write(&cfg, "gridd = 4\n").unwrap();
    let out = sdpcoulomb(&["oracle", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn marginal_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("rho.txt");
    std::fs::write(&file, "# weights\n1\n2\n2\n1\n").unwrap();
    let spec = format!("file:{}", file.display());
    let out = sdpcoulomb(&[
        "oracle",
        "--grid",
        "4",
        "--electrons",
        "2",
        "--marginal",
        &spec,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_sigma_table_has_no_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("table.toml");
    std::fs::write(
        &cfg,
        "points_per_dim = 5\ntable_electrons = [2, 3]\ntable_sigmas = [0.0, 0.5]\nrealizations = 2\nseed = 7\n",
    )
    .unwrap();
    let out = sdpcoulomb(&[
        "bench-table",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let mut table = csv::Reader::from_path(dir.path().join("table.csv")).unwrap();
    assert_eq!(table.headers().unwrap().len(), 3);
    assert_eq!(table.records().count(), 2);

    let mut runs = csv::Reader::from_path(dir.path().join("table_runs.csv")).unwrap();
    let mut zero: Vec<(String, f64)> = Vec::new();
    for rec in runs.records() {
        let rec = rec.unwrap();
        if &rec[1] == "0" {
            zero.push((rec[0].to_string(), rec[3].parse().unwrap()));
        }
    }
    assert_eq!(zero.len(), 4);
    for pair in zero.chunks(2) {
        assert_eq!(pair[0].1, pair[1].1);
    }
}
