use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use stfactor::{
    forecast_model, krige_model, load_model, save_dataset, DataFormat, Dataset, Location, Model, Scale,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stfactor"))
}

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample.csv")
}

fn sample_truth() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample_truth.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fit_sample(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let model = dir.join(name);
    let mut args: Vec<String> = ["fit", "--data", s(&sample()), "--out", s(&model)].map(String::from).to_vec();
    args.extend(extra.iter().map(|a| a.to_string()));
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    model
}

/// Noise-free data whose loading functions are bilinear, so the cubic
/// sieve represents them exactly.
fn bilinear_dataset(path: &Path) -> Dataset {
    let n = 60;
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let u = (i as f64 * 0.618_033_988_7).fract() * 2.0 - 1.0;
            let v = (i as f64 * 0.754_877_666_2).fract() * 2.0 - 1.0;
            [u, v]
        })
        .collect();
    let a = DMatrix::from_fn(n, 2, |i, j| if j == 0 { coords[i][0] - coords[i][1] } else { 1.5 * coords[i][0] * coords[i][1] });
    let b = DMatrix::from_row_slice(4, 2, &[0.9, -0.3, 0.2, 0.8, -0.5, 0.4, 0.1, -0.7]);
    let mut x = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
    let rot = DMatrix::from_row_slice(2, 2, &[0.9f64.cos(), -0.9f64.sin(), 0.9f64.sin(), 0.9f64.cos()]);
    let values = (0..50)
        .map(|_| {
            x = &rot * &x * 0.99 + DMatrix::from_element(2, 2, 0.05);
            &a * &x * b.transpose()
        })
        .collect();
    let locations = coords.iter().enumerate().map(|(id, c)| Location { id, coords: *c }).collect();
    let ds = Dataset::new(locations, (1..=4).map(|j| format!("v{j}")).collect(), (1..=50).collect(), values).unwrap();
    save_dataset(&ds, path, DataFormat::LongCsv).unwrap();
    ds
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn bundled_sample_fits() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.txt");
    fit_sample(dir.path(), "m.json", &["--report", s(&report), "--truth", s(&sample_truth())]);
    let text = std::fs::read_to_string(report).unwrap();
    assert!(text.contains("ranks d="));
    assert!(text.contains("distance A1"));
}

#[test]
fn refit_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = fit_sample(dir.path(), "a.json", &["--seed", "11"]);
    let b = fit_sample(dir.path(), "b.json", &["--seed", "11"]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn corrupt_inputs_exit_with_parse_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "time,location_id,s1,s2,variable,value\n1,0,0.0,0.0,x,abc\n").unwrap();
    let out = run(&["fit", "--data", s(&bad), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(code(&out), 2);

    let missing = run(&["fit", "--data", "/nonexistent/data.csv", "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(code(&missing), 2);

    let unknown_flag = run(&["fit", "--bogus"]);
    assert_eq!(code(&unknown_flag), 2);
}

#[test]
fn malformed_and_future_artifacts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let targets = dir.path().join("targets.csv");
    std::fs::write(&targets, "s1,s2\n0.0,0.0\n").unwrap();
    let out_csv = dir.path().join("k.csv");

    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "{\"format\": \"stfactor-model\"").unwrap();
    let out = run(&["krige", "--model", s(&garbage), "--targets", s(&targets), "--out", s(&out_csv)]);
    assert_eq!(code(&out), 2);

    let model = fit_sample(dir.path(), "m.json", &[]);
    let text = std::fs::read_to_string(&model).unwrap().replacen("\"version\": \"1.", "\"version\": \"2.", 1);
    let future = dir.path().join("future.json");
    std::fs::write(&future, text).unwrap();
    let out = run(&["forecast", "--model", s(&future), "--out", s(&out_csv)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn configuration_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    let data = sample();
    for extra in [&["--d", "0"][..], &["--r", "many"], &["--no-sieve", "--knots", "3"], &["--d", "15"], &["--mar-tol=-1"]] {
        let mut args = vec!["fit", "--data", s(&data), "--out", s(&m)];
        args.extend_from_slice(extra);
        assert_eq!(code(&run(&args)), 4, "{extra:?}");
    }
}

#[test]
fn kriging_outside_the_domain_is_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let model = fit_sample(dir.path(), "m.json", &[]);
    let targets = dir.path().join("far.csv");
    std::fs::write(&targets, "s1,s2\n25.0,25.0\n").unwrap();
    let out = run(&["krige", "--model", s(&model), "--targets", s(&targets), "--out", s(&dir.path().join("k.csv"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn kriging_at_sampled_sites_reproduces_noiseless_signal() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bilinear.csv");
    let ds = bilinear_dataset(&data);
    let model = dir.path().join("m.json");
    let out = run(&["fit", "--data", s(&data), "--out", s(&model), "--d", "2", "--r", "2", "--knots", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let picks = [0usize, 17, 42];
    let targets = dir.path().join("targets.csv");
    let mut body = String::from("s1,s2\n");
    for &i in &picks {
        let c = ds.locations()[i].coords;
        body.push_str(&format!("{},{}\n", c[0], c[1]));
    }
    std::fs::write(&targets, body).unwrap();
    let preds = dir.path().join("k.csv");
    let out = run(&["krige", "--model", s(&model), "--targets", s(&targets), "--out", s(&preds), "--scale", "observation"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let rows = read_rows(&preds);
    assert_eq!(rows.len(), 50 * picks.len() * 4);
    let mut worst = 0.0f64;
    for row in rows {
        let t: usize = row[0].parse::<usize>().unwrap() - 1;
        let c = [row[1].parse::<f64>().unwrap(), row[2].parse::<f64>().unwrap()];
        let k = picks.iter().position(|&i| ds.locations()[i].coords == c).unwrap();
        let j: usize = row[3][1..].parse::<usize>().unwrap() - 1;
        let value: f64 = row[4].parse().unwrap();
        worst = worst.max((value - ds.values()[t][(picks[k], j)]).abs());
    }
    assert!(worst < 1e-6, "worst deviation {worst}");
}

#[test]
fn cli_predictions_equal_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = fit_sample(dir.path(), "m.json", &[]);
    let model: Model = load_model(&model_path).unwrap();

    let fc = dir.path().join("f.csv");
    let out = run(&["forecast", "--model", s(&model_path), "--horizon", "2", "--out", s(&fc)]);
    assert_eq!(code(&out), 0);
    let rows = read_rows(&fc);
    assert_eq!(rows.len(), 2 * model.n_locations() * model.n_variables());
    let lib: Vec<DMatrix<f64>> = (1..=2).map(|h| forecast_model(&model, h, Scale::Centered).unwrap()).collect();
    for row in &rows {
        let h: usize = row[0].parse().unwrap();
        let i: usize = row[1].parse().unwrap();
        let j = model.variables.iter().position(|v| *v == row[2]).unwrap();
        assert_eq!(row[3].parse::<f64>().unwrap(), lib[h - 1][(i, j)]);
    }

    let targets = dir.path().join("t.csv");
    std::fs::write(&targets, "s1,s2\n0.1,-0.2\n-0.3,0.4\n").unwrap();
    let kc = dir.path().join("k.csv");
    let out = run(&["krige", "--model", s(&model_path), "--targets", s(&targets), "--out", s(&kc)]);
    assert_eq!(code(&out), 0);
    let lib = krige_model(&model, &[[0.1, -0.2], [-0.3, 0.4]], Scale::Centered).unwrap();
    for (k, row) in read_rows(&kc).iter().enumerate() {
        let t = k / (2 * model.n_variables());
        let site = (k / model.n_variables()) % 2;
        let j = k % model.n_variables();
        assert_eq!(row[4].parse::<f64>().unwrap(), lib[t][(site, j)]);
    }
}

#[test]
fn simulate_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("sim.json");
    let truth = dir.path().join("truth.json");
    let out = run(&["simulate", "--n", "60", "--p", "8", "--t", "80", "--seed", "3", "--out", s(&data), "--truth", s(&truth)]);
    assert_eq!(code(&out), 0);
    let model = dir.path().join("m.json");
    assert_eq!(code(&run(&["fit", "--data", s(&data), "--out", s(&model), "--d", "3", "--r", "2"])), 0);
    let metrics = dir.path().join("metrics.json");
    let out = run(&["evaluate", "--model", s(&model), "--truth", s(&truth), "--out", s(&metrics)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(metrics).unwrap()).unwrap();
    let d_a = v["d_a_unified"].as_f64().unwrap();
    assert!(d_a > 0.0 && d_a < 0.3, "{d_a}");
    assert!(v["mse_signal_reestimated"].as_f64().unwrap() > 0.0);

    let cv = run(&["evaluate", "--data", s(&data), "--holdout", "0.2", "--reps", "2", "--truth", s(&truth)]);
    assert_eq!(code(&cv), 0, "{}", String::from_utf8_lossy(&cv.stderr));
    let v: serde_json::Value = serde_json::from_slice(&cv.stdout).unwrap();
    assert_eq!(v["held_out"].as_u64(), Some(12));
    assert_eq!(v["mspe"].as_array().unwrap().len(), 2);

    // --model without --truth is rejected by the argument parser
    assert_eq!(code(&run(&["evaluate", "--model", s(&model)])), 2);
}

#[test]
fn smoke_reproduction_matches_golden_headers_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let out = run(&["reproduce", "--scale", "smoke", "--out", s(dir.path()), "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed().as_secs() < 60);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for name in ["table1_rank_freq", "table3_loading_dist", "table4_mspe", "raw_metrics"] {
        let text = std::fs::read_to_string(dir.path().join(format!("{name}.csv"))).unwrap();
        let expected = std::fs::read_to_string(golden.join(format!("{name}.header"))).unwrap();
        assert_eq!(text.lines().next().unwrap(), expected.trim_end(), "{name}");
    }
    // two cells, one replication each
    assert_eq!(std::fs::read_to_string(dir.path().join("raw_metrics.csv")).unwrap().lines().count(), 3);
}

#[test]
fn single_table_reproduction_writes_only_that_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["reproduce", "--table", "3", "--scale", "smoke", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("table3_loading_dist.csv").exists());
    assert!(!dir.path().join("table1_rank_freq.csv").exists());
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["simulate", "fit", "krige", "forecast", "evaluate", "reproduce"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    let fit_help = String::from_utf8_lossy(&run(&["fit", "--help"]).stdout).to_string();
    for flag in ["--d", "--r", "--h0", "--degree", "--knots", "--mar-tol", "--mar-iters", "--seed"] {
        assert!(fit_help.contains(flag), "{flag}");
    }
}
