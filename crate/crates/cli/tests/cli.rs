use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
id = "tiny"
kind = "irconv_dtw"
seed = 3

[synth]
width = 3
height = 3
bins = 60
cycle = 4.0
noise = 0.5

[model]
hidden = 4
filters = [2, 1]

[model.sampling]
closeness = 3
period = 2
trend = 1
bins_per_day = 4
days_per_week = 2

[training]
epochs = 2
batch_size = 8
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bikedemand"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn bikedemand")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn ingest_toy_trips() {
    let dir = tempfile::tempdir().unwrap();
    let trips = dir.path().join("trips.csv");
    fs::write(
        &trips,
        "start_time,end_time,start_lon,start_lat,end_lon,end_lat\n\
         2020-01-01T00:10:00Z,2020-01-01T00:30:00Z,0.004,0.004,0.013,0.004\n\
         2020-01-01T00:20:00Z,2020-01-01T00:25:00Z,0.004,0.004,0.005,0.005\n\
         2020-01-01T01:30:00Z,2020-01-01T01:50:00Z,0.013,0.004,0.004,0.004\n",
    )
    .unwrap();
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "width = 2\nheight = 2\nt0 = 1577836800\n[origin]\nlon = 0.0\nlat = 0.0\n").unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&[
        "ingest", "--trips", p(&trips), "--grid", p(&grid), "--t-end", "1577847600", "--out", p(&out),
    ]);
    assert!(stdout.contains("3 rows, 2 accepted, 1 dropped"), "{stdout}");
    let d = bikedemand::grid::read_tensor(&out.join("demand.bdt")).unwrap();
    assert_eq!(d.bins(), 3);
    // cells are stored (i, j) row-major with j fastest: (1,1) (1,2) (2,1) (2,2)
    assert_eq!(d.values(), &[1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0]);
    let report = fs::read_to_string(out.join("ingest_report.json")).unwrap();
    assert!(report.contains("\"dropped_intracell\": 1"), "{report}");
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--seed", "4", "--out", p(&a)]);
    ok(&["synth", "--seed", "4", "--out", p(&b)]);
    assert_eq!(tree(&a), tree(&b));
    let groups = fs::read_to_string(a.join("groups.csv")).unwrap();
    assert_eq!(groups.lines().count(), 65);
    assert!(groups.starts_with("i,j,group\n1,1,0\n1,2,1\n"));
}

#[test]
fn neighbors_from_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("city.toml");
    fs::write(&spec, "width = 4\nheight = 4\nbins = 96\nnoise = 0.5\n").unwrap();
    ok(&["synth", "--config", p(&spec), "--out", p(dir.path())]);
    let tensor = dir.path().join("demand.bdt");
    let out = dir.path().join("nb");
    let summary = ok(&["neighbors", "--tensor", p(&tensor), "--metric", "pearson", "--out", p(&out)]);
    assert!(summary.contains("cells=16"), "{summary}");
    let idx = bikedemand::similarity::read_neighbor_index(&out.join("neighbors.txt")).unwrap();
    assert_eq!(idx.kernel_size, 9);
    assert!(out.join("similarity.csv").exists());
    ok(&["neighbors", "--tensor", p(&tensor), "--metric", "dtw", "--band", "4", "--kernel-size", "5", "--out", p(&out)]);
    let idx = bikedemand::similarity::read_neighbor_index(&out.join("neighbors.txt")).unwrap();
    assert_eq!((idx.kernel_size, idx.band), (5, Some(4)));
}

#[test]
fn train_evaluate_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let table = ok(&["--threads", "1", "train", "--config", p(&cfg), "--out", p(&r1)]);
    assert!(table.contains("overall"), "{table}");
    ok(&["--threads", "1", "train", "--config", p(&cfg), "--out", p(&r2)]);
    assert_eq!(tree(&r1), tree(&r2));
    for f in ["report.csv", "report.txt", "history.csv", "neighbors.txt", "similarity.csv", "config.toml", "checkpoint/manifest.json"] {
        assert!(r1.join(f).exists(), "{f}");
    }

    let ev = dir.path().join("ev");
    ok(&["evaluate", "--config", p(&cfg), "--run", p(&r1), "--out", p(&ev)]);
    assert_eq!(fs::read(ev.join("report.csv")).unwrap(), fs::read(r1.join("report.csv")).unwrap());

    let printed = ok(&["report", p(&r1)]);
    assert!(printed.contains("tiny") && printed.contains("quintile5"), "{printed}");
}

#[test]
fn overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("p");
    ok(&["train", "--config", p(&cfg), "--metric", "pearson", "--seed", "9", "--out", p(&out)]);
    let saved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("kind = \"irconv_pearson\"") && saved.contains("seed = 9"), "{saved}");
    assert!(fs::read_to_string(out.join("neighbors.txt")).unwrap().contains("metric=pearson"));
}

#[test]
fn baseline_runs_each_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("b");
    ok(&["baseline", "--config", p(&cfg), "--kinds", "cnn_lstm,lstm_only", "--out", p(&out)]);
    let cmp = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(cmp.contains("tiny-cnn_lstm,mae,overall,") && cmp.contains("tiny-lstm_only,mae,overall,"), "{cmp}");
    assert!(out.join("lstm_only/checkpoint/manifest.json").exists());
    assert!(!out.join("lstm_only/neighbors.txt").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "split_ratio = 2.0\n[data]\ntensor = \"x.bdt\"\n").unwrap();
    assert_eq!(run(&["train", "--config", p(&bad), "--out", p(dir.path())]).status.code(), Some(2));

    let missing = dir.path().join("missing.toml");
    fs::write(&missing, "[data]\ntensor = \"nope.bdt\"\n").unwrap();
    assert_eq!(run(&["train", "--config", p(&missing), "--out", p(dir.path())]).status.code(), Some(1));

    let short = dir.path().join("short.toml");
    fs::write(&short, TINY.replace("bins = 60", "bins = 9")).unwrap();
    let out = run(&["train", "--config", p(&short), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let garbage = dir.path().join("garbage.bdt");
    fs::write(&garbage, b"not a tensor").unwrap();
    let out = run(&["neighbors", "--tensor", p(&garbage), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
