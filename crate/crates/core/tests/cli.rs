use std::fs;
use std::path::Path;

use nctucker::cli::run;
use nctucker::io::{load_model, load_sparse_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exec(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("nctucker").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

/// Writes a random sparse tensor with `nnz` entries and returns its path.
fn write_tensor(dir: &Path, name: &str, dims: [usize; 3], nnz: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut text = format!("3 {} {} {}\n", dims[0], dims[1], dims[2]);
    while seen.len() < nnz {
        let idx = [rng.gen_range(0..dims[0]), rng.gen_range(0..dims[1]), rng.gen_range(0..dims[2])];
        if seen.insert(idx) {
            text += &format!("{} {} {} {}\n", idx[0] + 1, idx[1] + 1, idx[2] + 1, rng.gen::<f64>());
        }
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trained_model(dir: &Path) -> (String, String) {
    let tensor = write_tensor(dir, "x.txt", [20, 8, 3], 200, 1);
    let model = dir.join("model");
    let (code, _, err) = exec(&[
        "train", "--tensor", &tensor, "--core-size", "3,2,2", "--epochs", "5", "--seed", "4", "--model-out", s(&model),
    ]);
    assert_eq!(code, 0, "{err}");
    (tensor, s(&model).to_owned())
}

#[test]
fn train_prints_strict_metrics_csv() {
    let dir = tempfile::tempdir().unwrap();
    let tensor = write_tensor(dir.path(), "x.txt", [12, 6, 3], 80, 2);
    let metrics = dir.path().join("m.csv");
    let model = dir.path().join("model");
    let (code, out, err) = exec(&[
        "train", "--tensor", &tensor, "--core-size", "2,2,2", "--epochs", "7", "--tol", "1e-12",
        "--model-out", s(&model), "--metrics-out", s(&metrics),
    ]);
    assert_eq!(code, 0, "{err}");
    for text in [out, fs::read_to_string(&metrics).unwrap()] {
        let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(text.as_bytes());
        assert_eq!(reader.headers().unwrap(), vec!["epoch", "f", "f_g", "f_opt", "seconds"]);
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 7);
        for (k, row) in rows.iter().enumerate() {
            assert_eq!(row[0].parse::<usize>().unwrap(), k + 1);
            for field in row.iter().skip(1) {
                assert!(field.parse::<f64>().unwrap().is_finite());
            }
        }
    }
    let archive = load_model(&model).unwrap();
    assert_eq!(archive.model.dims(), vec![12, 6, 3]);
    assert_eq!(archive.config.constrained_mode, 1);
}

#[test]
fn accepts_large_core_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let tensor = write_tensor(dir.path(), "x.txt", [90, 60, 5], 300, 3);
    let model = dir.path().join("model");
    let (code, _, err) = exec(&[
        "train", "--tensor", &tensor, "--core-size", "78,48,5", "--lambda-g", "1.0", "--epochs", "1",
        "--model-out", s(&model),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(load_model(&model).unwrap().model.core_dims(), &[78, 48, 5]);
}

#[test]
fn network_weights_sweep_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let tensor = write_tensor(dir.path(), "x.txt", [10, 6, 3], 60, 5);
    let network = dir.path().join("net.txt");
    fs::write(&network, "1 2\n2 3 0.5\n4 5\n5 6 2\n").unwrap();
    let mut f_g = Vec::new();
    for lambda_g in ["0", "0.1", "1.0"] {
        let model = dir.path().join(format!("model_{lambda_g}"));
        let (code, out, err) = exec(&[
            "train", "--tensor", &tensor, "--network", s(&network), "--constrained-mode", "2",
            "--core-size", "2,2,2", "--lambda-g", lambda_g, "--epochs", "3", "--model-out", s(&model),
        ]);
        assert_eq!(code, 0, "{err}");
        assert_eq!(out.lines().count(), 4);
        let (code, out, err) = exec(&["eval", "--model", s(&model), "--tensor", &tensor, "--network", s(&network)]);
        assert_eq!(code, 0, "{err}");
        let values: Vec<f64> = out.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.len(), 4);
        f_g.push(values[1]);
    }
    assert!(f_g.iter().all(|v| *v > 0.0));
}

#[test]
fn query_prints_k_sorted_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = trained_model(dir.path());
    let query = dir.path().join("q.txt");
    fs::write(&query, "1 1 0.3\n2 2 0.7\n5 3 0.1\n").unwrap();
    let (code, out, err) = exec(&["query", "--model", &model, "--query-file", s(&query), "--k", "10"]);
    assert_eq!(code, 0, "{err}");
    let mut lines = out.lines();
    let fold: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fold[0], "fold_in");
    assert_eq!(fold.len(), 1 + 3);
    assert_eq!(lines.next().unwrap(), "rank,entity,distance");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 10);
    for (r, row) in rows.iter().enumerate() {
        assert_eq!(row[0] as usize, r + 1);
        assert!((1.0..=20.0).contains(&row[1]));
    }
    assert!(rows.windows(2).all(|w| w[0][2] <= w[1][2]));

    let (code, out, err) = exec(&[
        "query", "--model", &model, "--query-file", s(&query), "--k", "3", "--fold-in-lr", "1e-3", "--fold-in-epochs", "5",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 2 + 3);
    let (code, _, err) = exec(&["query", "--model", &model, "--query-file", s(&query), "--fold-in-lr", "0"]);
    assert_eq!(code, 1);
    assert!(err.contains("--fold-in-lr"));
}

#[test]
fn cluster_with_fixed_k_and_gap() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = trained_model(dir.path());
    let (code, out, err) = exec(&["cluster", "--model", &model, "--k", "3", "--seed", "1"]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "entity,cluster");
    assert_eq!(lines.len(), 21);
    for l in &lines[1..] {
        let c: usize = l.split(',').nth(1).unwrap().parse().unwrap();
        assert!((1..=3).contains(&c));
    }
    let (code, out, err) = exec(&["cluster", "--model", &model, "--mode", "2", "--gap-kmax", "4", "--gap-B", "5"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 9);
    assert!(err.contains("selected k ="));
    let (code, _, err) = exec(&["cluster", "--model", &model]);
    assert_ne!(code, 0);
    assert!(err.contains("Usage"));
}

#[test]
fn subtype_by_entity_and_query() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = trained_model(dir.path());
    let (code, out, err) = exec(&["subtype", "--model", &model, "--entity", "4"]);
    assert_eq!(code, 0, "{err}");
    let sections: Vec<&str> = out.lines().filter(|l| l.starts_with('#')).collect();
    assert_eq!(sections, vec!["# subtype matrix", "# row influence", "# platform influence"]);
    // 2 header lines per section: J2 = 2 rows, J2 = 2 influences, I3 = 3 platforms
    assert_eq!(out.lines().count(), 3 * 2 + 2 + 2 + 3);
    let query = dir.path().join("q.txt");
    fs::write(&query, "3 2 0.5\n").unwrap();
    let (code, _, err) = exec(&["subtype", "--model", &model, "--query-file", s(&query)]);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = exec(&["subtype", "--model", &model, "--entity", "21"]);
    assert_eq!(code, 1);
    assert!(err.contains("--entity 21"));
}

#[test]
fn preprocess_normalizes_platform_slices() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    fs::write(&input, "3 1 3 2\n1 1 1 0\n1 2 1 5\n1 3 1 10\n1 1 2 4\n").unwrap();
    let output = dir.path().join("out.txt");
    let (code, _, err) = exec(&["preprocess", "--input", s(&input), "--output", s(&output)]);
    assert_eq!(code, 0, "{err}");
    let t = load_sparse_tensor(&output).unwrap();
    let expected = [0.0, 0.5 / 1.25f64.sqrt(), 1.0 / 1.25f64.sqrt(), 0.0];
    for (a, b) in t.values().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn errors_and_usage() {
    let (code, _, err) = exec(&["train", "--bogus"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage"));
    let (code, _, _) = exec(&["frobnicate"]);
    assert_eq!(code, 2);
    let (code, out, _) = exec(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("train"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "3 2 2 2\n1 1 1 0.5\n1 1 1 0.5\n").unwrap();
    let (code, _, err) = exec(&[
        "train", "--tensor", s(&bad), "--core-size", "1,1,1", "--model-out", s(&dir.path().join("m")),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains(":3:"), "{err}");

    let tensor = write_tensor(dir.path(), "x.txt", [4, 4, 2], 10, 9);
    let (code, _, err) = exec(&[
        "train", "--tensor", &tensor, "--core-size", "5,2,2", "--model-out", s(&dir.path().join("m")),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("core size"), "{err}");
}
