use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kapc::model::ApcModel;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn kapc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kapc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn numeric(rows: &[Vec<String>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let saa: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let sbb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    sab / (saa * sbb).sqrt()
}

fn write_table(path: &Path, names: &[&str], m: &DMatrix<f64>) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(names).unwrap();
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| m[(i, j)].to_string())).unwrap();
    }
    w.flush().unwrap();
}

/// Simulated data with the true transforms split off into their own file.
fn simulated(dir: &Path, n: usize, seed: u64) -> (PathBuf, Vec<Vec<f64>>) {
    let n_arg = n.to_string();
    let seed_arg = seed.to_string();
    ok(&kapc(
        &[
            "simulate", "-n", &n_arg, "--seed", &seed_arg, "--truth", "-o", "sim.csv",
        ],
        dir,
    ));
    let (header, rows) = read_csv(&dir.join("sim.csv"));
    assert_eq!(header, ["x1", "x2", "x3", "x4", "phi1", "phi2", "phi3", "phi4"]);
    assert_eq!(rows.len(), n);
    let x = DMatrix::from_fn(n, 4, |i, j| rows[i][j].parse::<f64>().unwrap());
    let path = dir.join("x.csv");
    write_table(&path, &["x1", "x2", "x3", "x4"], &x);
    let truth = (0..4).map(|j| numeric(&rows, 4 + j)).collect();
    (path, truth)
}

#[test]
fn simulated_pipeline_end_to_end() {
    let dir = TempDir::new().unwrap();
    let (_, truth) = simulated(dir.path(), 250, 1);
    ok(&kapc(
        &[
            "fit",
            "-i",
            "x.csv",
            "--standardize",
            "--cv",
            "--folds",
            "5",
            "--seed",
            "1",
            "-o",
            "model.json",
        ],
        dir.path(),
    ));
    let model = ApcModel::from_json(&std::fs::read_to_string(dir.path().join("model.json")).unwrap()).unwrap();
    let c = &model.components[0];
    assert!(c.raw_eigenvalue <= 0.02, "raw eigenvalue {}", c.raw_eigenvalue);
    for (j, star) in truth.iter().take(3).enumerate() {
        let r = corr(&c.blocks[j].phi, star).abs();
        assert!(r >= 0.95, "variable {}: |corr| {r}", j + 1);
    }
    assert!(c.variance_shares[3] <= 0.05);
    assert!(model.config.standardize);
    assert_eq!(model.config.input.as_deref(), Some("x.csv"));

    // evaluation at the training points reproduces the stored values
    ok(&kapc(
        &["eval", "-m", "model.json", "--points", "x.csv", "-o", "eval.csv"],
        dir.path(),
    ));
    let (header, rows) = read_csv(&dir.path().join("eval.csv"));
    assert_eq!(header, ["phi_x1", "phi_x2", "phi_x3", "phi_x4"]);
    for j in 0..4 {
        let values = numeric(&rows, j);
        for (v, stored) in values.iter().zip(&c.blocks[j].phi) {
            assert!((v - stored).abs() <= 1e-10, "{v} vs {stored}");
        }
    }

    // plot data spans each variable's range
    ok(&kapc(&["plotdata", "-m", "model.json", "-o", "curves.csv"], dir.path()));
    let (header, rows) = read_csv(&dir.path().join("curves.csv"));
    assert_eq!(header, ["variable", "x", "phi"]);
    assert_eq!(rows.len(), 4 * 200);
    for (j, var) in model.variables.iter().enumerate() {
        let xs: Vec<f64> = rows
            .iter()
            .filter(|r| r[0] == var.name)
            .map(|r| r[1].parse().unwrap())
            .collect();
        assert_eq!(xs.len(), 200);
        let train = var.training_values.as_ref().unwrap();
        let lo = train.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = train.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(xs[0], lo, "variable {j}");
        assert_eq!(xs[199], hi, "variable {j}");
    }
}

#[test]
fn cv_reports_every_grid_score() {
    let dir = TempDir::new().unwrap();
    simulated(dir.path(), 80, 2);
    ok(&kapc(
        &["cv", "-i", "x.csv", "--standardize", "-o", "cv.json"],
        dir.path(),
    ));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cv.json")).unwrap()).unwrap();
    assert_eq!(doc["cv_scores"].as_array().unwrap().len(), 35);
    assert_eq!(doc["grid"].as_array().unwrap().len(), 35);
    let first = doc["grid"][0].as_f64().unwrap();
    assert!((first - 1.5f64.powi(-29)).abs() <= 1e-15 * first);
}

#[test]
fn three_components_are_star_orthonormal() {
    // a pollution-style table: a few smooth drivers and a response
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 150;
    let mut m = DMatrix::zeros(n, 5);
    for i in 0..n {
        let traffic: f64 = rng.random_range(0.0..10.0);
        let temp: f64 = rng.random_range(-5.0..25.0);
        let wind: f64 = rng.random_range(0.5..8.0);
        let hour: f64 = rng.random_range(0.0..24.0);
        let no2 = (1.0 + traffic).ln() - 0.3 * wind.sqrt()
            + 0.02 * temp
            + 0.2 * (hour / 24.0 * std::f64::consts::TAU).sin()
            + 0.1 * rng.random_range(-1.0..1.0);
        for (j, v) in [no2, traffic, temp, wind, hour].into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    let dir = TempDir::new().unwrap();
    write_table(
        &dir.path().join("no2.csv"),
        &["no2", "cars", "temp", "wind", "hour"],
        &m,
    );
    ok(&kapc(
        &[
            "fit",
            "-i",
            "no2.csv",
            "--kernel",
            "sobolev",
            "--order",
            "2",
            "--standardize",
            "--df-preset",
            "--components",
            "3",
            "--tol",
            "1e-12",
            "-o",
            "model.json",
        ],
        dir.path(),
    ));
    let model = ApcModel::from_json(&std::fs::read_to_string(dir.path().join("model.json")).unwrap()).unwrap();
    assert_eq!(model.components.len(), 3);
    let g = model.star_gram().unwrap();
    assert!((g - DMatrix::identity(3, 3)).amax() <= 1e-6);
    let e: Vec<f64> = model.components.iter().map(|c| c.eigenvalue).collect();
    assert!(e[0] <= e[1] + 1e-8 && e[1] <= e[2] + 1e-8, "{e:?}");
}

#[test]
fn precomputed_kernels_fit_but_do_not_extrapolate() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 40;
    let base = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
    let other = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
    let noisy = -&base + 0.1 * DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
    for (name, f) in [("k1.csv", &base), ("k2.csv", &other), ("k3.csv", &noisy)] {
        let k = kapc::kernels::feature_gram_kernel(f).unwrap();
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(dir.path().join(name))
            .unwrap();
        for i in 0..n {
            w.write_record((0..n).map(|j| k[(i, j)].to_string())).unwrap();
        }
        w.flush().unwrap();
    }
    ok(&kapc(
        &[
            "fit",
            "--kernel",
            "precomputed",
            "--matrices",
            "k1.csv,k2.csv,k3.csv",
            "--alpha",
            "1e-3",
            "-o",
            "model.json",
        ],
        dir.path(),
    ));
    let model = ApcModel::from_json(&std::fs::read_to_string(dir.path().join("model.json")).unwrap()).unwrap();
    let s = &model.components[0].variance_shares;
    assert!(s[1] < s[0] && s[1] < s[2], "shares {s:?}");
    let names: Vec<&str> = model.variables.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(names, ["k1", "k2", "k3"]);

    let pts = DMatrix::from_element(2, 3, 0.5);
    write_table(&dir.path().join("pts.csv"), &["k1", "k2", "k3"], &pts);
    let out = kapc(&["eval", "-m", "model.json", "--points", "pts.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    ok(&kapc(
        &[
            "cv",
            "--kernel",
            "precomputed",
            "--matrices",
            "k1.csv,k2.csv,k3.csv",
            "--grid",
            "1e-3,1e-2,1e-1",
            "--folds",
            "4",
        ],
        dir.path(),
    ));
}

#[test]
fn malformed_rows_are_data_errors_with_line_numbers() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("short.csv"), "a,b\n1,2\n3,4\n5\n").unwrap();
    let out = kapc(&["fit", "-i", "short.csv", "--alpha", "0.1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");

    std::fs::write(dir.path().join("text.csv"), "a,b\n1,2\n3,oops\n").unwrap();
    let out = kapc(&["fit", "-i", "text.csv", "--alpha", "0.1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("oops"), "{err}");

    std::fs::write(dir.path().join("gap.csv"), "a,b\n1,2\n,4\n").unwrap();
    let out = kapc(&["fit", "-i", "gap.csv", "--alpha", "0.1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing value"));

    let out = kapc(&["fit", "-i", "absent.csv", "--alpha", "0.1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_and_solver_errors_have_their_own_codes() {
    let dir = TempDir::new().unwrap();
    simulated(dir.path(), 50, 5);
    let code = |args: &[&str]| kapc(args, dir.path()).status.code();

    // no penalty, two penalties, bad flag values
    assert_eq!(code(&["fit", "-i", "x.csv"]), Some(1));
    assert_eq!(code(&["fit", "-i", "x.csv", "--alpha", "0.1", "--cv"]), Some(1));
    assert_eq!(code(&["fit", "-i", "x.csv", "--alpha", "-1"]), Some(1));
    assert_eq!(code(&["fit", "-i", "x.csv", "--alpha", "0.1,0.2"]), Some(1));
    assert_eq!(code(&["fit", "-i", "x.csv", "--cv", "--folds", "1"]), Some(1));
    assert_eq!(code(&["nonsense"]), Some(1));
    // direct solver with a null-space kernel is rejected before fitting
    assert_eq!(
        code(&["fit", "-i", "x.csv", "--alpha", "0.1", "--kernel", "sobolev", "--solver", "direct"]),
        Some(1)
    );
    // unreachable degrees of freedom
    assert_eq!(code(&["fit", "-i", "x.csv", "--df-target", "500"]), Some(3));
    assert_eq!(code(&["--help"]), Some(0));
}
