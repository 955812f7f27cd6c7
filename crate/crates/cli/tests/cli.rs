use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn whends(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_whends"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--dim",
    "8",
    "--epochs-encoder",
    "5",
    "--epochs-nsem",
    "5",
    "--epochs-detector",
    "10",
];

fn synth_small(dir: &Path) {
    let out = whends(&[
        "synth",
        "--nodes",
        "80",
        "--snapshots",
        "6",
        "--edges-per-snapshot",
        "200",
        "--dim",
        "8",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("snapshots 6"), "{}", stdout(&out));
}

#[test]
fn missing_edge_file_is_a_usage_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.txt");
    let out = whends(&[
        "ingest",
        "--edges",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope.txt"), "{}", stderr(&out));
}

#[test]
fn ingest_writes_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let edges = tmp.path().join("edges.txt");
    let mut text = String::new();
    for i in 0..60u32 {
        text.push_str(&format!("{} {} {}\n", i % 10, (i * 7 + 3) % 10, i));
    }
    fs::write(&edges, text).unwrap();
    let data = tmp.path().join("data");
    let out = whends(&[
        "ingest",
        "--edges",
        edges.to_str().unwrap(),
        "--snapshot-size",
        "20",
        "--feature-dim",
        "4",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let s = stdout(&out);
    assert!(s.contains("nodes 10") && s.contains("snapshots 3"), "{s}");
    assert!(data.exists());
}

#[test]
fn bad_flag_value_and_unknown_config_key_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data);
    let config = tmp.path().join("cfg.txt");
    fs::write(&config, "not_a_key = 3\n").unwrap();
    let out = whends(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("m").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("not_a_key"));

    let out = whends(&["train", "--data", "x", "--out", "y", "--dim", "many"]);
    assert_eq!(out.status.code(), Some(2));

    let out = whends(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("m").to_str().unwrap(),
        "--train-ratio",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn train_then_detect_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data);
    let model = tmp.path().join("model");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let out = whends(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("final losses"));

    let mut csvs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let path = tmp.path().join(name);
        let out = whends(&[
            "detect",
            "--data",
            data.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).starts_with("auc "), "{}", stdout(&out));
        csvs.push(fs::read(&path).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert!(String::from_utf8_lossy(&csvs[0]).starts_with("t,src,dst,score,label\n"));
}

#[test]
fn detect_with_missing_model_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data);
    let out = whends(&[
        "detect",
        "--data",
        data.to_str().unwrap(),
        "--model",
        tmp.path().join("absent").to_str().unwrap(),
        "--out",
        tmp.path().join("s.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("absent"), "{}", stderr(&out));
}

#[test]
fn sweep_writes_json_report() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("r.json");
    let mut args = vec![
        "sweep",
        "--axis",
        "shift-sigma",
        "--values",
        "0,0.5",
        "--repeats",
        "1",
        "--ablate",
        "no_nsem",
        "--nodes",
        "80",
        "--snapshots",
        "6",
        "--edges-per-snapshot",
        "200",
        "--feature-dim",
        "8",
        "--format",
        "json",
        "--out",
        report.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let out = whends(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 4, "{}", stdout(&out));
    let text = fs::read_to_string(&report).unwrap();
    let r = whends::eval::ExperimentReport::from_json(&text).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert!(r
        .rows
        .iter()
        .any(|row| row.setting == "shift_sigma=0.5/no_nsem"));
}

#[test]
fn check_passes_and_detects_corruption() {
    let out = whends(&["check", "--seed", "3"]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    assert_eq!(
        stdout(&out)
            .lines()
            .filter(|l| l.starts_with("PASS"))
            .count(),
        6
    );

    let out = whends(&["check", "--corrupt-inv-sqrt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out)
        .lines()
        .any(|l| l.starts_with("FAIL whitening")));
}
