//! Black-box tests of the `sae` binary: exit codes, output schemas and
//! reproducibility of the generated files.

use std::path::Path;
use std::process::{Command, Output};

fn sae(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sae"))
        .args(args)
        .args(["--out-dir", dir.to_str().unwrap()])
        .output()
        .expect("spawning the binary")
}

/// Deterministic three-area unit-level sample with one covariate.
const UNIT_CSV: &str = "\
area,y,x
a,12.1,0.5
a,10.3,-0.2
a,11.8,0.9
a,9.9,-1.1
a,10.6,0.1
b,15.2,1.4
b,14.1,0.8
b,16.0,2.1
b,13.5,0.3
b,14.8,1.0
c,8.2,-1.5
c,7.9,-0.7
c,9.1,-0.3
c,8.5,-1.9
c,7.4,-1.2
";

const MEANS_CSV: &str = "\
area,N_i,x
a,40,0.1
b,55,1.2
c,35,-1.0
";

fn write_inputs(dir: &Path) -> (String, String) {
    let sample = dir.join("sample.csv");
    let means = dir.join("means.csv");
    std::fs::write(&sample, UNIT_CSV).unwrap();
    std::fs::write(&means, MEANS_CSV).unwrap();
    (
        sample.to_str().unwrap().to_string(),
        means.to_str().unwrap().to_string(),
    )
}

#[test]
fn fit_writes_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (sample, means) = write_inputs(dir.path());
    let out = sae(&["fit", &sample, "--area-means", &means], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let summary = std::fs::read_to_string(dir.path().join("fit_summary.txt")).unwrap();
    assert!(summary.contains("sigma2_alpha"));
    assert!(summary.contains("sigma2_e"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("sigma2_alpha"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "fit");
    assert!(manifest["inputs"].as_array().unwrap().len() == 2);
}

#[test]
fn fit_method_flag_changes_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let (sample, means) = write_inputs(dir.path());
    let mut summaries = Vec::new();
    for method in ["ml", "reml"] {
        let sub = dir.path().join(method);
        std::fs::create_dir(&sub).unwrap();
        let out = sae(&["fit", &sample, "--area-means", &means, "--method", method], &sub);
        assert!(out.status.success());
        summaries.push(std::fs::read_to_string(sub.join("fit_summary.txt")).unwrap());
    }
    assert_ne!(summaries[0], summaries[1]);
}

#[test]
fn predict_schema_and_interval_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let (sample, means) = write_inputs(dir.path());
    let out = sae(&["predict", &sample, "--area-means", &means], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let preds = std::fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    let header = preds.lines().next().unwrap();
    assert_eq!(
        header,
        "area,N_i,n_i,alpha_hat,sam,clp,sam_star,mse_lw,mse_pr,\
         lo_sam_lw,hi_sam_lw,lo_clp_lw,hi_clp_lw,lo_clp_pr,hi_clp_pr"
            .replace(' ', "")
    );
    assert_eq!(preds.lines().count(), 4); // header + three areas

    // On the full-precision output the interval half-widths must equal the
    // two-sided 95% normal quantile times the root MSE.
    let raw = std::fs::read_to_string(dir.path().join("predictions_raw.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(raw.as_bytes());
    let cols: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    let idx = |n: &str| cols.iter().position(|c| c == n).unwrap();
    let z = 1.959963984540054_f64;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let get = |n: &str| rec[idx(n)].parse::<f64>().unwrap();
        let checks = [
            ("sam", "mse_lw", "lo_sam_lw", "hi_sam_lw"),
            ("clp", "mse_lw", "lo_clp_lw", "hi_clp_lw"),
            ("clp", "mse_pr", "lo_clp_pr", "hi_clp_pr"),
        ];
        for (point, mse, lo, hi) in checks {
            let half = z * get(mse).sqrt();
            let center = get(point);
            assert!((get(lo) - (center - half)).abs() < 1e-9);
            assert!((get(hi) - (center + half)).abs() < 1e-9);
        }
        // N_i and n_i come straight from the inputs.
        assert!(get("N_i") >= get("n_i"));
    }
}

#[test]
fn predict_fixed_effects_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (sample, means) = write_inputs(dir.path());
    let out = sae(
        &["predict", &sample, "--area-means", &means, "--fixed-effects"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let preds = std::fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    assert_eq!(
        preds.lines().next().unwrap(),
        "area,N_i,n_i,com,lo_com,hi_com,syn,lo_syn,hi_syn"
    );
    assert_eq!(preds.lines().count(), 4);
}

#[test]
fn predict_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (sample, means) = write_inputs(dir.path());
    let mut outputs = Vec::new();
    for run in ["r1", "r2"] {
        let sub = dir.path().join(run);
        std::fs::create_dir(&sub).unwrap();
        let out = sae(&["predict", &sample, "--area-means", &means], &sub);
        assert!(out.status.success());
        outputs.push(std::fs::read(sub.join("predictions_raw.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn simulate_preset_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = sae(
        &["simulate", "--preset", "table1", "--replications", "20", "--seed", "3"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(
        report.lines().next().unwrap(),
        "area,N_i,n_i,std_eblup,cvge_sam_lw,rlen_sam_lw,cvge_clp_lw,rlen_clp_lw,\
         cvge_clp_pr,rlen_clp_pr"
            .replace(' ', "")
    );
    assert_eq!(report.lines().count(), 16); // header + 15 areas
    assert!(dir.path().join("report_raw.csv").exists());
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("simulate_manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn simulate_config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.toml");
    std::fs::write(
        &config,
        "g = 5\nsigma2_alpha = 4.0\nsigma2_e = 25.0\nreplications = 10\nseed = 2\n",
    )
    .unwrap();
    let out = sae(&["simulate", "--config", config.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 6); // header + five areas
}

#[test]
fn malformed_csv_fails_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "area,y,x\na,1.0,2.0\na,not-a-number,3.0\n").unwrap();
    let out = sae(&["fit", bad.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "stderr: {err}");
}

#[test]
fn unknown_preset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = sae(&["simulate", "--preset", "tableXYZ"], dir.path());
    assert!(!out.status.success());
}
