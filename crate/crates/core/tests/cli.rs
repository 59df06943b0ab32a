use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diga::load_config;

const TINY: &[&str] = &[
    "--n-source", "8",
    "--n-target-train", "6",
    "--n-target-val", "4",
    "--n-target2-val", "4",
    "--image-height", "32",
    "--image-width", "32",
    "--warmup-epochs", "2",
    "--st-epochs", "2",
    "--label-refresh-epochs", "1",
    "--learning-rate", "0.01",
    "--mst-scales", "0.5,1.0",
];

fn diga(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diga")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = diga(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_twice_gives_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&with_tiny(&["gen-data", "--seed", "1", "--out", s(&a)]));
    ok(&with_tiny(&["gen-data", "--seed", "1", "--out", s(&b)]));
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 20);
    assert_eq!(ta, tb);
}

#[test]
fn usage_validation_and_io_errors_have_distinct_codes() {
    assert_eq!(diga(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(diga(&["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(diga(&["--help"]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(diga(&["gen-data", "--out", s(&out), "--alpha", "1.5"]).status.code(), Some(3));
    assert_eq!(diga(&["gen-data", "--out", s(&out), "--alpha", "x"]).status.code(), Some(3));
    let missing = tmp.path().join("missing");
    let code = diga(&with_tiny(&["train-warmup", "--data", s(&missing), "--runs-dir", s(tmp.path())]))
        .status
        .code();
    assert_eq!(code, Some(4));
}

#[test]
fn staged_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    ok(&with_tiny(&["gen-data", "--seed", "3", "--out", s(&data)]));

    let common = |cmd: &'static str, run: &'static str| -> Vec<String> {
        let mut v: Vec<String> = [cmd, "--data", s(&data), "--runs-dir", s(&runs), "--run", run]
            .iter()
            .map(|x| x.to_string())
            .collect();
        v.extend(TINY.iter().map(|x| x.to_string()));
        v
    };
    let call = |v: Vec<String>, extra: &[&str]| -> String {
        let mut args: Vec<&str> = v.iter().map(String::as_str).collect();
        args.extend_from_slice(extra);
        ok(&args)
    };

    for run in ["w1", "w2"] {
        call(common("train-warmup", run), &[]);
    }
    let metrics = |run: &str| fs::read(runs.join(run).join("metrics.jsonl")).unwrap();
    assert_eq!(metrics("w1"), metrics("w2"));
    assert_eq!(fs::read_to_string(runs.join("w1/metrics.jsonl")).unwrap().lines().count(), 2);

    // The recorded config reproduces the run.
    let resolved = load_config(&runs.join("w1/config.resolved"), &[]).unwrap();
    assert_eq!(resolved.warmup_epochs, 2);
    assert_eq!(resolved.image_height, 32);

    let warm = runs.join("w1/checkpoints/warmup.ckpt");
    call(common("init-centroids", "c"), &["--checkpoint", s(&warm)]);
    let with_bank = runs.join("c/checkpoints/centroids.ckpt");
    for run in ["s1", "s2"] {
        call(common("train-st", run), &["--checkpoint", s(&with_bank)]);
    }
    assert_eq!(metrics("s1"), metrics("s2"));
    let st_log = fs::read_to_string(runs.join("s1/metrics.jsonl")).unwrap();
    assert!(st_log.contains("\"pl_precision\""));

    let st = runs.join("s1/checkpoints/st.ckpt");
    let plain = call(common("eval", "e1"), &["--checkpoint", s(&st)]);
    let multi = call(common("eval", "e2"), &["--checkpoint", s(&st), "--mst"]);
    assert!(plain.contains("mIoU") && multi.contains("mIoU"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(runs.join("e2/report.json")).unwrap()).unwrap();
    assert_eq!(report["mst"], true);

    // A single unit scale makes the multi-scale path coincide with plain eval.
    call(common("eval", "e3"), &["--checkpoint", s(&st), "--mst", "--mst-scales", "1.0"]);
    let miou = |run: &str| {
        let v: serde_json::Value =
            serde_json::from_slice(&fs::read(runs.join(run).join("report.json")).unwrap()).unwrap();
        v["miou"].as_f64().unwrap()
    };
    assert!((miou("e1") - miou("e3")).abs() < 1e-12);

    call(common("compare-pseudo", "cp"), &["--checkpoint", s(&warm)]);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(runs.join("cp/report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["strategy"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["feat_only", "warm_only", "threshold", "consensus"]);
}

#[test]
fn ablate_emits_five_rows_in_ladder_order_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    for run in ["a1", "a2"] {
        let out = ok(&with_tiny(&[
            "ablate", "--seeds", "0", "--runs-dir", s(&runs), "--run", run, "--n-source", "4",
        ]));
        assert_eq!(out.lines().count(), 7, "{out}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(runs.join("a1/report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["source_only", "distil", "symmetric", "crdomix", "self_train"]);
    assert_eq!(
        fs::read(runs.join("a1/metrics.jsonl")).unwrap(),
        fs::read(runs.join("a2/metrics.jsonl")).unwrap()
    );

    ok(&with_tiny(&["generalize", "--seeds", "0", "--runs-dir", s(&runs), "--run", "g"]));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(runs.join("g/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}
