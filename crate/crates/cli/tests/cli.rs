use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;
use rfflr::{CurveSet, TimeGrid};
use rfflr_cli::curves_csv::{read_curves, read_flags, write_curves};
use rfflr_cli::ModelDocument;

fn rfflr(args: &[&str]) -> Output {
    rfflr_env(args, &[])
}

fn rfflr_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rfflr"));
    cmd.args(args).env_remove("RFFLR_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(rfflr(&args));
}

fn fit(dir: &Path, model: &str, extra: &[&str]) -> String {
    let (x, y, m) = (dir.join("x.csv"), dir.join("y.csv"), dir.join(model));
    let mut args = vec!["fit", "--x", p(&x), "--y", p(&y), "--model", p(&m), "--n-starts", "100"];
    args.extend_from_slice(extra);
    ok(rfflr(&args))
}

#[test]
fn simulate_writes_the_requested_outlier_count() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--scenario", "1", "--n", "400", "--T", "500", "--a", "0.2", "--seed", "1"]);
    let x = read_curves(&dir.path().join("x.csv")).unwrap();
    assert_eq!(x.len(), 400);
    assert_eq!(x.grid().len(), 500);
    let flags = read_flags(&dir.path().join("truth.csv")).unwrap();
    assert_eq!(flags.iter().filter(|&&f| f).count(), 80);
    assert!(dir.path().join("meta.json").exists());
}

#[test]
fn clean_simulation_has_no_flags() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--n", "50", "--T", "40", "--a", "0"]);
    assert!(read_flags(&dir.path().join("truth.csv")).unwrap().iter().all(|&f| !f));
}

#[test]
fn simulation_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["--scenario", "2", "--n", "60", "--T", "50", "--a", "0.1", "--seed", "7"];
    simulate(a.path(), &args);
    simulate(b.path(), &args);
    for f in ["x.csv", "y.csv", "truth.csv", "meta.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fit_on_clean_scenario_one_selects_three_by_three() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--n", "200", "--T", "200", "--seed", "2"]);
    let stdout = fit(dir.path(), "m.json", &[]);
    assert!(stdout.contains("selected (M, K) = (3, 3)"), "{stdout}");
    let doc = ModelDocument::load(&dir.path().join("m.json")).unwrap();
    assert_eq!((doc.m, doc.k), (3, 3));
    assert_eq!(doc.provenance.inputs.len(), 2);
    assert_eq!(doc.provenance.inputs[0].sha256.len(), 64);
}

#[test]
fn robust_without_trimming_matches_classical() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--n", "120", "--T", "100", "--seed", "3"]);
    fit(dir.path(), "c.json", &["--method", "classical", "--num-basis", "40"]);
    fit(dir.path(), "r.json", &["--method", "robust", "--alpha", "1.0", "--num-basis", "40"]);
    let c = ModelDocument::load(&dir.path().join("c.json")).unwrap();
    let r = ModelDocument::load(&dir.path().join("r.json")).unwrap();
    assert_eq!((c.m, c.k), (r.m, r.k));
    for (a, b) in c.b.data.iter().zip(&r.b.data) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn fitting_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--n", "80", "--T", "60", "--a", "0.1", "--seed", "4"]);
    let (x, y) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
    let (m1, m4) = (dir.path().join("m1.json"), dir.path().join("m4.json"));
    let args = |m: &Path| -> Vec<String> {
        ["fit", "--x", p(&x), "--y", p(&y), "--model", p(m), "--num-basis", "30", "--n-starts", "80"]
            .map(String::from)
            .to_vec()
    };
    let a1: Vec<String> = [vec!["--threads".to_string(), "1".to_string()], args(&m1)].concat();
    ok(rfflr(&a1.iter().map(String::as_str).collect::<Vec<_>>()));
    let a4 = args(&m4);
    ok(rfflr_env(&a4.iter().map(String::as_str).collect::<Vec<_>>(), &[("RFFLR_THREADS", "4")]));
    assert_eq!(fs::read(m1).unwrap(), fs::read(m4).unwrap());
}

#[test]
fn missing_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    let out = rfflr(&["fit", "--x", "/nonexistent/x.csv", "--y", "/nonexistent/y.csv", "--model", p(&m)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_csv_exits_with_two_and_names_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    fs::write(&x, "id,0,0.5,1\na,1,2,3\nb,1,oops,3\n").unwrap();
    let m = dir.path().join("m.json");
    let out = rfflr(&["fit", "--x", p(&x), "--y", p(&x), "--model", p(&m)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 3, column 3"), "{err}");
}

#[test]
fn infeasible_trimming_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--n", "6", "--T", "30", "--seed", "5"]);
    let out = rfflr(&[
        "fit",
        "--x",
        p(&dir.path().join("x.csv")),
        "--y",
        p(&dir.path().join("y.csv")),
        "--model",
        p(&dir.path().join("m.json")),
        "--num-basis",
        "10",
        "--alpha",
        "0.6",
        "--mmax",
        "4",
        "--kmax",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_schema_major_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--n", "40", "--T", "40", "--seed", "6"]);
    fit(dir.path(), "m.json", &["--num-basis", "20", "--method", "classical"]);
    let m = dir.path().join("m.json");
    let text = fs::read_to_string(&m).unwrap().replace("\"schema_version\": \"1.0\"", "\"schema_version\": \"2.0\"");
    fs::write(&m, text).unwrap();
    let out = rfflr(&["predict", "--model", p(&m), "--x", p(&dir.path().join("x.csv")), "--out", p(&dir.path().join("p.csv"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn model_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--n", "60", "--T", "50", "--a", "0.1", "--seed", "8"]);
    fit(dir.path(), "m.json", &["--num-basis", "20"]);
    let m = dir.path().join("m.json");
    let bytes = fs::read_to_string(&m).unwrap();
    let doc = ModelDocument::load(&m).unwrap();
    assert_eq!(doc.to_json().unwrap(), bytes);
    let model = doc.to_model().unwrap();
    let again = ModelDocument::from_model(&model, &doc.x_grid().unwrap(), doc.provenance.clone());
    assert_eq!(again.to_json().unwrap(), bytes);
}

#[test]
fn detection_flags_planted_outliers_and_spares_clean_data() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--n", "200", "--T", "200", "--a", "0.05", "--seed", "2"]);
    fit(dir.path(), "m.json", &[]);
    let report = dir.path().join("r.json");
    let stdout = ok(rfflr(&[
        "detect",
        "--model",
        p(&dir.path().join("m.json")),
        "--x",
        p(&dir.path().join("x.csv")),
        "--y",
        p(&dir.path().join("y.csv")),
        "--report",
        p(&report),
    ]));
    let truth = read_flags(&dir.path().join("truth.csv")).unwrap();
    let flags: Vec<bool> = csv::Reader::from_path(dir.path().join("r.csv"))
        .unwrap()
        .records()
        .map(|r| &r.unwrap()[2] == "1")
        .collect();
    let missed = truth.iter().zip(&flags).filter(|(t, f)| **t && !**f).count();
    let false_pos = truth.iter().zip(&flags).filter(|(t, f)| !**t && **f).count();
    assert_eq!(missed, 0, "{stdout}");
    assert!(false_pos as f64 <= 0.03 * 190.0, "{false_pos} false positives");
    assert!(stdout.trim().ends_with("outliers of 200"), "{stdout}");
}

#[test]
fn single_bootstrap_detection_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--n", "60", "--T", "50", "--a", "0.1", "--seed", "9"]);
    fit(dir.path(), "m.json", &["--num-basis", "20"]);
    let run = |name: &str| {
        let r = dir.path().join(name);
        ok(rfflr(&[
            "detect",
            "--model",
            p(&dir.path().join("m.json")),
            "--x",
            p(&dir.path().join("x.csv")),
            "--y",
            p(&dir.path().join("y.csv")),
            "--n-boot",
            "1",
            "--seed",
            "3",
            "--report",
            p(&r),
        ]));
        (fs::read(&r).unwrap(), fs::read(r.with_extension("csv")).unwrap())
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn prediction_matches_the_library_and_zero_scores_give_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--n", "60", "--T", "50", "--a", "0.1", "--seed", "10"]);
    fit(dir.path(), "m.json", &["--num-basis", "20"]);
    let m = dir.path().join("m.json");
    let out = dir.path().join("p.csv");
    ok(rfflr(&["predict", "--model", p(&m), "--x", p(&dir.path().join("x.csv")), "--out", p(&out)]));
    let doc = ModelDocument::load(&m).unwrap();
    let model = doc.to_model().unwrap();
    let x = read_curves(&dir.path().join("x.csv")).unwrap();
    let y = read_curves(&dir.path().join("y.csv")).unwrap();
    let pred = read_curves(&out).unwrap();
    let res = model.residual_curves(&x, &y).unwrap();
    let recon = pred.samples() + res.samples();
    assert!((recon - y.samples()).amax() <= 1e-9);

    let x_grid = doc.x_grid().unwrap();
    let center = model.fpca_x.mean_on(&x_grid).unwrap();
    let flat = CurveSet::with_default_ids(x_grid, DMatrix::from_fn(3, center.len(), |_, j| center[j])).unwrap();
    let flat_path = dir.path().join("flat.csv");
    write_curves(&flat_path, &flat).unwrap();
    ok(rfflr(&["predict", "--model", p(&m), "--x", p(&flat_path), "--out", p(&out)]));
    let pred = read_curves(&out).unwrap();
    let mean_y = model.fpca_y.mean_on(&model.y_grid).unwrap();
    for i in 0..3 {
        for j in 0..mean_y.len() {
            assert!((pred.samples()[(i, j)] - mean_y[j]).abs() <= 1e-8);
        }
    }

    let wrong = CurveSet::with_default_ids(TimeGrid::uniform(0.0, 1.0, 30).unwrap(), DMatrix::zeros(2, 30)).unwrap();
    write_curves(&flat_path, &wrong).unwrap();
    let out = rfflr(&["predict", "--model", p(&m), "--x", p(&flat_path), "--out", p(&out)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "seed = 11\n[simulate]\nn = 30\nT = 20\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(rfflr(&["--config", p(&cfg), "simulate", "--out", p(&a)]));
    ok(rfflr(&["simulate", "--config", p(&cfg), "--n", "40", "--out", p(&b)]));
    assert_eq!(read_curves(&a.join("x.csv")).unwrap().len(), 30);
    assert_eq!(read_curves(&b.join("x.csv")).unwrap().len(), 40);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["settings"]["n"], 40);
    assert_eq!(meta["settings"]["T"], 20);
    assert_eq!(meta["settings"]["seed"], 11);
}

#[test]
fn resampling_puts_unequal_series_on_a_common_grid() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("series.csv");
    let mut text = String::from("id,t,value\n");
    for (id, len, t_end) in [("a", 57, 3.0), ("b", 91, 10.0)] {
        for i in 0..len {
            let t = t_end * i as f64 / (len - 1) as f64;
            let u = t / t_end;
            text.push_str(&format!("{id},{t},{}\n", 2.0 * u * u * u - u + 0.5));
        }
    }
    fs::write(&input, text).unwrap();
    let out = dir.path().join("out.csv");
    ok(rfflr(&["resample", "--input", p(&input), "--num-basis", "12", "--resample-points", "25", "--out", p(&out)]));
    let curves = read_curves(&out).unwrap();
    assert_eq!(curves.ids(), ["a", "b"]);
    assert_eq!(curves.grid().len(), 25);
    for (j, &u) in curves.grid().points().iter().enumerate() {
        let expect = 2.0 * u * u * u - u + 0.5;
        for i in 0..2 {
            assert!((curves.samples()[(i, j)] - expect).abs() <= 1e-9);
        }
    }
    let short = rfflr(&["resample", "--input", p(&input), "--num-basis", "80", "--out", p(&out)]);
    assert_eq!(short.status.code(), Some(2));
}

#[test]
fn benchmark_summary_matches_per_replicate_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(rfflr(&[
        "benchmark",
        "--scenarios",
        "1",
        "--a-list",
        "0.1",
        "--alpha-list",
        "0.8",
        "--reps",
        "2",
        "--n",
        "60",
        "--T",
        "50",
        "--num-basis",
        "20",
        "--n-starts",
        "50",
        "--out",
        p(&out),
    ]));
    let mut rdr = csv::Reader::from_path(out.join("benchmark.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        ["scenario", "a", "method", "alpha", "criterion", "rep", "FE", "AUC_model", "AUC_direct", "selected_M", "selected_K"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let keys: Vec<(String, String)> = rows.iter().map(|r| (r[2].to_string(), r[4].to_string())).collect();
    assert_eq!(keys.len(), 6);
    for k in [("classical", "bic"), ("robust", "bic"), ("robust", "rbic")] {
        assert_eq!(keys.iter().filter(|x| (x.0.as_str(), x.1.as_str()) == k).count(), 2, "{k:?}");
    }
    let mut srdr = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    for s in srdr.records().map(Result::unwrap) {
        let fe: Vec<f64> = rows
            .iter()
            .filter(|r| r[2] == s[2] && r[4] == s[4])
            .map(|r| r[6].parse().unwrap())
            .collect();
        let mean = fe.iter().sum::<f64>() / fe.len() as f64;
        let reported: f64 = s[6].parse().unwrap();
        assert!((mean - reported).abs() <= 1e-12, "{mean} vs {reported}");
    }
}
