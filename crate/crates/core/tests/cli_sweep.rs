use std::fs;
use std::path::Path;

use srlab::cli::{load_spec, run_experiment, CellStatus, LEMMAS_HEADER, RUNS_HEADER, SUMMARY_HEADER};

fn write_spec(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("spec.txt");
    fs::write(&path, body).unwrap();
    path
}

const SWEEP: &str = "
name = grid
n = 96
d_in = 4
hidden = [6]
modes = [sr]
formats = [E4M1, E4M2]
batch_sizes = [4, 16]
steps = 60
eval_every = 10
output = out
";

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

#[test]
fn two_by_two_sweep_writes_four_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let spec = load_spec(&write_spec(dir.path(), SWEEP)).unwrap();
    let report = run_experiment(&spec).unwrap();
    assert_eq!(report.exit_code(), 0);
    let (header, rows) = read_rows(&dir.path().join("out/summary.csv"));
    assert_eq!(header, SUMMARY_HEADER);
    assert_eq!(rows.len(), 4);
    let (header, rows) = read_rows(&dir.path().join("out/runs.csv"));
    assert_eq!(header, RUNS_HEADER);
    assert_eq!(rows.len(), 4 * 7);
    assert!(!dir.path().join("out/lemmas.csv").exists());
}

#[test]
fn rerun_is_byte_identical_and_worker_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = write_spec(dir.path(), &format!("{SWEEP}\nlemmas = true\nlemma_trials = 500\nworkers = 1\n"));
    let spec = load_spec(&spec_path).unwrap();
    run_experiment(&spec).unwrap();
    let snapshot = |name: &str| fs::read(dir.path().join("out").join(name)).unwrap();
    let first: Vec<Vec<u8>> = ["runs.csv", "summary.csv", "lemmas.csv"].map(snapshot).to_vec();
    let mut parallel = spec.clone();
    parallel.workers = 3;
    run_experiment(&parallel).unwrap();
    let second: Vec<Vec<u8>> = ["runs.csv", "summary.csv", "lemmas.csv"].map(snapshot).to_vec();
    assert_eq!(first, second);
    assert!(!first[0].contains(&b'\r'));
}

#[test]
fn emitted_csvs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = load_spec(&write_spec(dir.path(), &format!("{SWEEP}\nlemmas = true\nlemma_trials = 500\n"))).unwrap();
    let report = run_experiment(&spec).unwrap();

    let (_, runs) = read_rows(&dir.path().join("out/runs.csv"));
    let mut k = 0;
    for cell in &report.cells {
        for rec in &cell.records {
            let row = &runs[k];
            assert_eq!(row[0].parse::<usize>().unwrap(), cell.cell.index);
            assert_eq!(row[1].parse::<usize>().unwrap(), rec.step);
            assert_eq!(row[2].parse::<f64>().unwrap().to_bits(), rec.train_loss.to_bits());
            assert_eq!(row[3].parse::<f64>().unwrap().to_bits(), rec.grad_norm_sq.to_bits());
            assert_eq!(row[6].parse::<usize>().unwrap(), cell.cell.batch_size);
            k += 1;
        }
    }
    assert_eq!(k, runs.len());

    let (header, lemmas) = read_rows(&dir.path().join("out/lemmas.csv"));
    assert_eq!(header, LEMMAS_HEADER);
    assert_eq!(lemmas.len(), report.lemmas.len());
    for (row, l) in lemmas.iter().zip(&report.lemmas) {
        assert_eq!(row[0], l.probe);
        if l.value.is_finite() {
            assert_eq!(row[2].parse::<f64>().unwrap().to_bits(), l.value.to_bits());
        }
        assert_eq!(row[5], l.pass.map_or(String::new(), |p| p.to_string()));
    }
}

#[test]
fn diverging_cell_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let body = "n = 64\nd_in = 4\nmodes = [fp]\nlearning_rates = [0.01, 1e6]\nsteps = 40\neval_every = 10\noutput = out\n";
    let spec = load_spec(&write_spec(dir.path(), body)).unwrap();
    let report = run_experiment(&spec).unwrap();
    assert_eq!(report.cells[0].status, CellStatus::Ok);
    assert_eq!(report.cells[1].status, CellStatus::Diverged);
    assert_eq!(report.exit_code(), 1);
    let (_, rows) = read_rows(&dir.path().join("out/summary.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][13], "diverged");
    assert_eq!(rows[1][10], "");
}

#[test]
fn csv_task_reads_relative_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("a,b,c,target\n");
    for i in 0..40 {
        let x = [i as f64 * 0.1, (i as f64).sin(), 1.0 - i as f64 * 0.05];
        text.push_str(&format!("{},{},{},{}\n", x[0], x[1], x[2], x[0] - 2.0 * x[2]));
    }
    fs::write(dir.path().join("data.csv"), text).unwrap();
    let body = "task = csv\ncsv_path = data.csv\nhidden = []\nmodes = [fp]\nsteps = 20\neval_every = 5\noutput = out\n";
    let spec = load_spec(&write_spec(dir.path(), body)).unwrap();
    let report = run_experiment(&spec).unwrap();
    assert_eq!(report.exit_code(), 0);
    let first = &report.cells[0].records;
    assert!(first.last().unwrap().train_loss < first[0].train_loss);
}

#[test]
fn bad_csv_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data.csv"), "1,2\n3,oops\n").unwrap();
    let spec = load_spec(&write_spec(dir.path(), "task = csv\ncsv_path = data.csv\noutput = out\n")).unwrap();
    let err = run_experiment(&spec).unwrap_err();
    assert!(matches!(err, srlab::Error::Csv { row: 2, col: 2, .. }), "{err}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_srlab");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| std::process::Command::new(bin).args(args).output().unwrap();

    let out = run(&["quantize", "0.5", "--grid", "u:1", "--mode", "rtn"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1");

    let out = run(&["quantize", "-0.3", "--grid", "E4M3"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "-0.3125");

    let bad = write_spec(dir.path(), "optimzer = adam\n");
    let out = run(&["run", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimzer"));

    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));

    let good = write_spec(dir.path(), "n = 32\nd_in = 3\nmodes = [fp]\nsteps = 10\neval_every = 5\noutput = out\n");
    assert_eq!(run(&["run", good.to_str().unwrap()]).status.code(), Some(0));
}
