use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn exdeform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exdeform")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_shape(path: &Path) -> (usize, usize) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let cols = lines.next().unwrap().split(',').count();
    (lines.count(), cols)
}

fn small_data(dir: &Path) -> PathBuf {
    let cfg = dir.join("sim.json");
    std::fs::write(
        &cfg,
        r#"{"kind": "br", "variogram": {"lambda": 2.0, "kappa": 0.8, "centre": [0.0, 0.0]},
            "n_obs": 400, "grid": {"n": 5, "lo": -1.0, "hi": 1.0}}"#,
    )
    .unwrap();
    let out = dir.join("data");
    let o = exdeform(&["--config", p(&cfg), "--out", p(&out), "--seed", "3", "simulate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn simulate_presets_have_paper_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("br");
    assert!(exdeform(&["--out", p(&a), "simulate", "--preset", "ns-br"]).status.success());
    assert_eq!(csv_shape(&a.join("observations.csv")), (1000, 64));
    assert_eq!(csv_shape(&a.join("sites.csv")), (64, 3));
    let b = dir.path().join("gm");
    assert!(exdeform(&["--out", p(&b), "simulate", "--preset", "gaussian-mixture"]).status.success());
    assert_eq!(csv_shape(&b.join("observations.csv")), (1000, 81));
}

#[test]
fn invalid_kind_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"kind": "brown_resnik", "n_obs": 10}"#).unwrap();
    let o = exdeform(&["--config", p(&cfg), "--out", p(dir.path()), "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = exdeform(&["--out", p(dir.path()), "simulate", "--preset", "smith"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn deform_fit_diagnose_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (obs, sites) = (data.join("observations.csv"), data.join("sites.csv"));
    let deform_out = dir.path().join("deform");
    let args = [
        "--out",
        p(&deform_out),
        "--seed",
        "5",
        "deform",
        "--obs",
        p(&obs),
        "--sites",
        p(&sites),
        "--method",
        "chi-br",
        "--m-star",
        "6",
    ];
    let o = exdeform(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in
        ["deformation.json", "stages.csv", "d_sites.csv", "d_sites_unit.csv", "dependence_g.csv", "dependence_d.csv"]
    {
        assert!(deform_out.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(deform_out.join("deform_summary.json")).unwrap()).unwrap();
    let (g, d) = (summary["residual_rms_g"].as_f64().unwrap(), summary["residual_rms_d"].as_f64().unwrap());
    assert!(d < g, "residual RMS {d} not below {g}");
    let first = std::fs::read(deform_out.join("deformation.json")).unwrap();
    assert!(exdeform(&args).status.success());
    assert_eq!(first, std::fs::read(deform_out.join("deformation.json")).unwrap());

    let fit_out = dir.path().join("fit");
    let d_sites = deform_out.join("d_sites.csv");
    let o = exdeform(&["--out", p(&fit_out), "fit", "--obs", p(&obs), "--sites", p(&sites), "--d-sites", p(&d_sites)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_shape(&fit_out.join("fit_table.csv")), (4, 7));
    let o = exdeform(&["--out", p(&fit_out), "fit", "--obs", p(&obs), "--sites", p(&sites), "--block-b", "400"]);
    assert_eq!(o.status.code(), Some(2));

    let diag_out = dir.path().join("diag");
    let o = exdeform(&[
        "--out",
        p(&diag_out),
        "diagnose",
        "--obs",
        p(&obs),
        "--sites",
        p(&sites),
        "--fit",
        p(&fit_out.join("fit_report.json")),
        "--d-sites",
        p(&d_sites),
        "--n-boot",
        "100",
        "--q",
        "0.9",
        "--n-triples",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_shape(&diag_out.join("triples.csv")), (4, 9));
    // every pair on both planes
    assert_eq!(csv_shape(&diag_out.join("condext.csv")).0, 2 * 25 * 24 / 2);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (obs, sites) = (data.join("observations.csv"), data.join("sites.csv"));
    let o = exdeform(&["--out", p(dir.path()), "deform", "--obs", p(&obs), "--sites", p(&sites), "--m-star", "40"]);
    assert_eq!(o.status.code(), Some(2));
    let o = exdeform(&[
        "--out",
        p(dir.path()),
        "diagnose",
        "--obs",
        p(&obs),
        "--sites",
        p(&sites),
        "--fit",
        p(&dir.path().join("missing.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn study_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    std::fs::write(
        &cfg,
        r#"{"study": {
            "process": {"kind": "br", "variogram": {"lambda": 2.0, "kappa": 0.8, "centre": [0.0, 0.0]},
                        "n_obs": 300, "grid": {"n": 4, "lo": -1.0, "hi": 1.0}},
            "repetitions": 1,
            "deform": {"m0": 3, "m_star": 4, "optimizer": {"max_evals": 200}}
        }}"#,
    )
    .unwrap();
    let out = dir.path().join("study");
    let o = exdeform(&["--config", p(&cfg), "--out", p(&out), "--seed", "2", "study"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_shape(&out.join("study_rows.csv")), (1, 9));
    assert_eq!(csv_shape(&out.join("proportions.csv")), (5, 2));
}
