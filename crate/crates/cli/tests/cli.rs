use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adsd_core::harness::config::TrainConfig;
use adsd_core::harness::gradcheck_suite::tiny_adsd_config;

fn adsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adsd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, seed: &str, count: &str) -> Output {
    adsd(&["gen-data", "--out", p(dir), "--seed", seed, "--count", count, "--size", "32", "32"])
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&gen(&a, "4", "3")), 0);
    assert_eq!(code(&gen(&b, "4", "3")), 0);
    assert_eq!(files(&a), files(&b));
    let c = tmp.path().join("c");
    assert_eq!(code(&gen(&c, "5", "3")), 0);
    assert_ne!(files(&a), files(&c));
}

#[test]
fn gen_data_with_zero_samples_writes_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("empty");
    assert_eq!(code(&gen(&dir, "0", "0")), 0);
    let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("samples 0"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = adsd(&["gen-data", "--out", p(tmp.path()), "--count", "1", "--classes", "1"]);
    assert_eq!(code(&out), 1);
    assert!(text(&out.stderr).starts_with("error:"));
    assert_eq!(code(&adsd(&["gradcheck", "--suite", "nope"])), 1);
    assert_eq!(code(&adsd(&["frobnicate"])), 1);
    assert_eq!(code(&adsd(&["gen-data"])), 1);
    assert_eq!(code(&adsd(&["--help"])), 0);
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "pretrain.epochs = -1\n").unwrap();
    let out = adsd(&["train", "--config", p(&bad), "--data", p(tmp.path()), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_or_corrupt_data_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = adsd(&["train", "--data", p(&tmp.path().join("nowhere")), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "1", "1")), 0);
    fs::write(data.join("samples/00000.rgb.tnsr"), b"TNSR").unwrap();
    let out = adsd(&["train", "--data", p(&data), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_prints_one_row_per_instance() {
    let out = adsd(&["gradcheck", "--suite", "relu"]);
    assert_eq!(code(&out), 0);
    let stdout = text(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "suite,instance,checked,skipped,max_rel_err,tolerance,status");
    assert_eq!(lines.len(), 6);
    assert!(lines[1..].iter().all(|l| l.starts_with("relu,") && l.ends_with(",pass")));
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, val) = (tmp.path().join("train"), tmp.path().join("val"));
    assert_eq!(code(&gen(&train, "1", "4")), 0);
    assert_eq!(code(&gen(&val, "2", "2")), 0);
    let mut cfg = TrainConfig {
        model: tiny_adsd_config(),
        ..TrainConfig::default()
    };
    cfg.model.num_classes = 4;
    cfg.pretrain.epochs = 1;
    cfg.finetune.epochs = 1;
    let cfg_path = tmp.path().join("tiny.cfg");
    fs::write(&cfg_path, cfg.to_text()).unwrap();

    let run = tmp.path().join("run");
    let out = adsd(&["-q", "train", "--config", p(&cfg_path), "--data", p(&train), "--val", p(&val), "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("miou="));
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);

    let eval_csv = tmp.path().join("eval.csv");
    let out = adsd(&["eval", "--checkpoint", p(&run.join("checkpoint")), "--data", p(&val), "--report", p(&eval_csv)]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let summary = fs::read_to_string(&eval_csv).unwrap();
    assert_eq!(text(&out.stdout), summary);
    assert!(summary.starts_with("metric,value\npixacc,"));
    assert!(tmp.path().join("eval_per_class.csv").exists());

    // Fine-tuning alone resumes from the pre-trained checkpoint of the run.
    let out = adsd(&["-q", "train", "--config", p(&cfg_path), "--data", p(&train), "--out", p(&run), "--stage", "finetune"]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));

    // A checkpoint whose architecture disagrees names the first bad parameter.
    let model_txt = run.join("checkpoint/model.txt");
    let model = fs::read_to_string(&model_txt).unwrap();
    fs::write(&model_txt, model.replace("model.decoder_width = 4", "model.decoder_width = 6")).unwrap();
    let out = adsd(&["eval", "--checkpoint", p(&run.join("checkpoint")), "--data", p(&val), "--report", p(&eval_csv)]);
    assert_eq!(code(&out), 1);
    assert!(text(&out.stderr).contains("parameter `"), "{}", text(&out.stderr));
}

#[test]
fn compare_decoders_needs_three_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = adsd(&["compare-decoders", "--data", p(tmp.path()), "--seeds", "1,2", "--out", p(tmp.path())]);
    assert_eq!(code(&out), 1);
}
