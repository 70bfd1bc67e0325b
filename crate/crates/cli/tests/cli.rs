use std::path::Path;
use std::process::{Command, Output};

fn flurlab(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flurlab"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("FLURLAB_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_one_row_per_observation_and_fit_kernel_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("path.csv");
    let o = flurlab(&["simulate", "--d", "0.3", "--lambda", "0.025", "--n", "1024", "--seed", "7", "--out", path_str(&path)], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "j,x");
    assert_eq!(lines.len(), 1025);

    let again = dir.path().join("again.csv");
    flurlab(&["simulate", "--d", "0.3", "--lambda", "0.025", "--n", "1024", "--seed", "7", "--out", path_str(&again)], None);
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let fitted = flurlab(&["fit-kernel", "--input", path_str(&path), "--points", "5"], None);
    assert!(fitted.status.success(), "{}", stderr(&fitted));
    assert_eq!(String::from_utf8_lossy(&fitted.stdout).lines().count(), 6);
}

#[test]
fn variance_matches_the_library() {
    let o = flurlab(&["variance", "--case", "moderate", "--d", "0.3", "--lambda-star", "1", "--kernel", "epanechnikov"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let kernel = flurlab::kernel::KernelSpec::epanechnikov();
    let want = flurlab::kernel::asymptotic_variance(flurlab::process::RegimeClass::Moderate, 0.3, 1.0, 1.0, &kernel).unwrap();
    assert_eq!(v["sigma2"].as_f64().unwrap(), want);

    let knot = flurlab(&["variance", "--case", "moderate", "--d", "0.3", "--lambda-star", "1", "--q", "1", "--p", "2", "--eta", "0.5", "--a", "1,-2"], None);
    assert!(knot.status.success(), "{}", stderr(&knot));
    let k: serde_json::Value = serde_json::from_slice(&knot.stdout).unwrap();
    assert_eq!(k["covariance"].as_array().unwrap().len(), 3);
}

#[test]
fn errors_carry_codes_and_exit_statuses() {
    let o = flurlab(&["experiment", "--config", "missing.toml"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("code=config_not_found"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "kind = \"kernel_fdd\"\nd = 0.3\nn = 1024\nreplications = 100\nmaster_seed = 1\ncolour = 3\n[regime]\nschedule = \"fixed\"\nlambda = 0.5\n").unwrap();
    let o = flurlab(&["experiment", "--config", path_str(&bad)], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("code=config_invalid"), "{}", stderr(&o));

    let o = flurlab(&["simulate", "--d", "-2", "--n", "4"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("code=domain"));

    let o = flurlab(&["acvf", "--d", "0.7", "--lambda", "0", "--n", "4"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("code=divergence"));

    let flat = dir.path().join("flat.csv");
    std::fs::write(&flat, "y\n".to_string() + &(1..=200).map(|j| format!("{}\n", 1.0 + j as f64 / 200.0)).collect::<String>()).unwrap();
    let o = flurlab(&["fit-knot", "--input", path_str(&flat), "--q", "2", "--p", "3"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("code=degenerate_profile"));

    let o = flurlab(&["fit-kernel", "--input", "nowhere.csv"], None);
    assert!(stderr(&o).starts_with("code=input_not_found"));
}

#[test]
fn fit_knot_emits_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("y.csv");
    let n = 400;
    let rows: String = (1..=n)
        .map(|j| {
            let s = j as f64 / n as f64;
            format!("{j},{}\n", 1.0 + 2.0 * s + 3.0 * (s - 0.5).max(0.0))
        })
        .collect();
    std::fs::write(&data, format!("j,y\n{rows}")).unwrap();
    let o = flurlab(&["fit-knot", "--input", path_str(&data), "--q", "2", "--p", "3"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["eta_hat"].as_f64().unwrap() - 0.5).abs() < 1e-5);
    assert_eq!(v["a_hat"].as_array().unwrap().len(), 3);
    assert!(v["rss"].as_f64().unwrap() >= 0.0);
    assert!(v["profile"].as_array().unwrap()[0].as_array().unwrap().len() == 2);
}

#[test]
fn experiment_reports_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.toml");
    std::fs::write(
        &cfg,
        "kind = \"knot_law\"\nd = 0.3\nn = 1024\nreplications = 100\nmaster_seed = 4\n[regime]\nschedule = \"moderate\"\nlambda_star = 1.0\n[model]\nq = 2\np = 3\neta = 0.5\na = [1.0, 2.0, 3.0]\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for t in ["1", "4", "1"] {
        let json = dir.path().join(format!("r{}.json", outputs.len()));
        let csv = dir.path().join(format!("r{}.csv", outputs.len()));
        let o = flurlab(&["experiment", "--config", path_str(&cfg), "--out", path_str(&json), "--csv", path_str(&csv)], Some(t));
        assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", stderr(&o));
        outputs.push((std::fs::read(&json).unwrap(), std::fs::read(&csv).unwrap()));
    }
    assert!(outputs.iter().all(|o| o == &outputs[0]));
    assert!(String::from_utf8_lossy(&outputs[0].1).starts_with("test,statistic,target,threshold,pass\n"));
}
