use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spherehead(results: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spherehead"))
        .args(args)
        .env("SPHEREHEAD_RESULTS", results)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A two-epoch spirals run small enough for a test.
fn train(results: &Path, loss: &str, project: &str) -> Output {
    spherehead(
        results,
        &[
            "train", "--dataset", "spirals", "--loss", loss, "--project", project, "--epochs", "2", "--batch", "64",
            "--encoder", "8", "--feature-dim", "3", "--seeds", "1,2", "--lr", "0.01",
        ],
    )
}

#[test]
fn project_writes_sphere_points() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    fs::write(&input, "0,0\n3,4\n").unwrap();
    let out = spherehead(dir.path(), &["project", "--in", input.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<String> = stdout(&out).lines().map(String::from).collect();
    assert_eq!(lines[0], "0,0,-1");
    let p: Vec<f64> = lines[1].split(',').map(|c| c.parse().unwrap()).collect();
    assert_eq!(p, vec![3.0 / 13.0, 4.0 / 13.0, 12.0 / 13.0]);
}

#[test]
fn project_honours_header_delimiter_and_out() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.tsv");
    let output = dir.path().join("out.tsv");
    fs::write(&input, "a\tb\n0\t0\n").unwrap();
    let out = spherehead(
        dir.path(),
        &[
            "project", "--in", input.to_str().unwrap(), "--out", output.to_str().unwrap(), "--header",
            "--delimiter", "\t",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&output).unwrap(), "0\t0\t-1\n");
}

#[test]
fn project_reports_bad_cells() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    fs::write(&input, "1,2\n1,x\n").unwrap();
    let out = spherehead(dir.path(), &["project", "--in", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["train", "--dataset", "spirals", "--epochs", "1"];
    let cases: [&[&str]; 6] = [
        &["--loss", "cosface", "--queue", "4"],
        &["--loss", "sphereface", "--m", "1.5"],
        &["--loss", "cce", "--m", "0.3"],
        &["--loss", "hinge"],
        &["--loss", "arcface", "--s", "4", "--scale-by-norm"],
        &["--loss", "cosface", "--per-class", "10"],
    ];
    for extra in cases {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        let out = spherehead(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{extra:?}: {}", stderr(&out));
    }
    let out = spherehead(dir.path(), &["train", "--dataset", "moons", "--loss", "cce"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none(), "usage errors must not write results");
}

#[test]
fn train_then_report_pairs_projection() {
    let dir = tempfile::tempdir().unwrap();
    for project in ["on", "off"] {
        let out = train(dir.path(), "cosface", project);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).contains("seed 2: accuracy"), "{}", stdout(&out));
    }
    assert!(dir.path().join("spirals-cosface-on").join("1.txt").is_file());

    let table_file = dir.path().join("table.txt");
    let out = spherehead(dir.path(), &["report", "--out", table_file.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = stdout(&out);
    assert!(table.starts_with("Dataset"), "{table}");
    assert!(table.contains("Projection: Yes"));
    assert!(table.lines().any(|l| l.starts_with("spirals") && l.contains("CosFace")), "{table}");
    assert_eq!(fs::read_to_string(&table_file).unwrap(), table);

    let again = train(dir.path(), "cosface", "on");
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("already holds results"), "{}", stderr(&again));
}

#[test]
fn report_rejects_unpaired_experiments() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "cce", "on").status.success());
    let out = spherehead(dir.path(), &["report"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing"), "{}", stderr(&out));
}

#[test]
fn eval_and_export_rebuild_stored_runs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "arcface", "on").status.success());
    let run = dir.path().join("spirals-arcface-on");
    let run = run.to_str().unwrap();

    let out = spherehead(dir.path(), &["eval", "--run", run]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.contains("test accuracy")).count(), 2);

    let first = dir.path().join("a.csv");
    let second = dir.path().join("b.csv");
    for path in [&first, &second] {
        let out = spherehead(
            dir.path(),
            &["export-embeddings", "--run", run, "--seed", "2", "--out", path.to_str().unwrap()],
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = fs::read(&first).unwrap();
    assert_eq!(a, fs::read(&second).unwrap(), "re-export must be bitwise identical");
    let text = String::from_utf8(a).unwrap();
    // 1000 spirals points, 30% held out; label plus four sphere coordinates
    assert_eq!(text.lines().count(), 300);
    for line in text.lines() {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 5);
        let sq: f64 = cells[1..].iter().map(|v| v * v).sum();
        assert!((sq - 1.0).abs() < 1e-12);
    }
}

#[test]
fn missing_run_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    for verb in ["eval", "export-embeddings"] {
        let mut args = vec![verb, "--run", missing.to_str().unwrap()];
        if verb == "export-embeddings" {
            args.extend(["--out", "unused.csv"]);
        }
        let out = spherehead(dir.path(), &args);
        assert_eq!(out.status.code(), Some(1), "{verb}");
        assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
    }
    let out = spherehead(&missing, &["report"]);
    assert_eq!(out.status.code(), Some(1));
}
