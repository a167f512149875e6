use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crocnet::data::{read_label_map, read_tensor};
use crocnet::pipeline::{Bbox, BboxRecord, BG};

fn crocnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crocnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = crocnet(&["synth", "--bogus"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
    assert_eq!(code(&crocnet(&["--help"])), 0);
}

#[test]
fn invalid_input_exits_2() {
    let out = crocnet(&["param-count", "--channels", "8,16,32,64,100"]);
    assert_eq!(code(&out), 2);
    let out = crocnet(&["synth", "--out", "/tmp/unused", "--side", "50"]);
    assert_eq!(code(&out), 2);
    let out = crocnet(&["gradcheck", "nope"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_files_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = crocnet(&["infer-stage1", "--checkpoint", p(&dir.path().join("none.ckpt")), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn param_count_orders_stages() {
    let s1: usize = stdout(&crocnet(&["param-count", "--stage", "1"])).trim().parse().unwrap();
    let s2: usize = stdout(&crocnet(&["param-count", "--stage", "2"])).trim().parse().unwrap();
    assert!(s1 > s2 && s2 > 0);
}

#[test]
fn gradcheck_subset_passes_in_64_bit() {
    let out = crocnet(&["gradcheck", "--precision", "f64", "sigmoid", "e2a"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.contains("PASS")).count(), 2);
    assert!(text.contains("2 of 2 checks passed"));
}

#[test]
fn bench_writes_scaling_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = crocnet(&["bench-attention", "--block", "e2a", "--sizes", "16,32,64,256", "--dim", "8", "--repeats", "3", "--out", p(&csv)]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().next(), Some("n,median_seconds,fitted_exponent"));
    assert_eq!(text.lines().count(), 5);
    assert_eq!(code(&crocnet(&["bench-attention", "--block", "conv"])), 2);
}

#[test]
fn two_stage_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, s1, soft, crops, s2, pred) = (
        root.join("data"),
        root.join("s1"),
        root.join("soft"),
        root.join("crops"),
        root.join("s2"),
        root.join("pred"),
    );
    let config = root.join("config.json");
    fs::write(
        &config,
        r#"{"lr": 1e-3, "lr_drops": [], "augment": null, "val_fraction": 0.0, "stage_channels": [2, 4, 8, 16, 32]}"#,
    )
    .unwrap();
    let cfg = p(&config);

    assert_eq!(code(&crocnet(&["--seed", "3", "synth", "--out", p(&data), "--cases", "3"])), 0);
    let out = crocnet(&["--config", cfg, "train-stage1", "--data", p(&data), "--out", p(&s1), "--epochs", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt1 = s1.join("final.ckpt");

    assert_eq!(code(&crocnet(&["infer-stage1", "--checkpoint", p(&ckpt1), "--data", p(&data), "--out", p(&soft)])), 0);
    let maps = read_tensor(soft.join("case_000_soft.ctf")).unwrap();
    assert_eq!(maps.shape(), &[4, 64, 64]);
    let labels = read_label_map(soft.join("case_000_labels.ctf")).unwrap();
    assert_eq!((labels.height, labels.width), (64, 64));

    assert_eq!(code(&crocnet(&["--config", cfg, "crop", "--stage1", p(&soft), "--data", p(&data), "--out", p(&crops)])), 0);
    let init = read_tensor(crops.join("case_000_init.ctf")).unwrap();
    assert_eq!(init.shape()[0], 3);
    assert_eq!(fs::read_to_string(crops.join("bbox.jsonl")).unwrap().lines().count(), 3);

    let out = crocnet(&["--config", cfg, "train-stage2", "--data", p(&data), "--stage1", p(&ckpt1), "--out", p(&s2), "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt2 = s2.join("final.ckpt");

    let infer = |out_dir: &Path| crocnet(&["infer", "--stage1", p(&ckpt1), "--stage2", p(&ckpt2), "--data", p(&data), "--out", p(out_dir)]);
    assert_eq!(code(&infer(&pred)), 0);
    let records: Vec<BboxRecord> = fs::read_to_string(pred.join("bbox.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 3);
    for r in &records {
        let [row_min, row_max, col_min, col_max] = r.bbox;
        let b = Bbox {
            row_min,
            row_max,
            col_min,
            col_max,
        };
        let m = read_label_map(pred.join(format!("{}_labels.ctf", r.id))).unwrap();
        for i in 0..m.height * m.width {
            if !b.contains(i / m.width, i % m.width) {
                assert_eq!(m.data[i], BG, "{} has foreground outside its bbox", r.id);
            }
        }
    }

    let again = root.join("pred_again");
    assert_eq!(code(&infer(&again)), 0);
    for r in &records {
        let f = format!("{}_labels.ctf", r.id);
        assert_eq!(fs::read(pred.join(&f)).unwrap(), fs::read(again.join(&f)).unwrap());
    }

    let out = crocnet(&["eval", "--pred", p(&pred), "--gt", p(&data)]);
    assert_eq!(code(&out), 0);
    let table = stdout(&out);
    assert!(table.contains("Dice (%)") && table.contains("HD (mm)") && table.contains("Myo"));
    let csv = fs::read_to_string(pred.join("eval.csv")).unwrap();
    assert!(csv.starts_with("class,dice_pct,hd,cases\n"));
    assert_eq!(csv.lines().count(), 5);

    let out = crocnet(&["infer-stage1", "--checkpoint", p(&ckpt2), "--data", p(&data), "--out", p(&root.join("wrong"))]);
    assert_eq!(code(&out), 2);
    let out = crocnet(&["train-stage2", "--data", p(&data), "--out", p(&root.join("s2_missing"))]);
    assert_eq!(code(&out), 2);
}
