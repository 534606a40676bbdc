use std::fs;
use std::path::Path;

use nnmil::cli::run;
use serde_json::Value;

fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("nnmil").chain(args.iter().copied()))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, task: &str, seed: &str) {
    let code = run_args(&[
        "synth", "--out", p(dir), "--task", task, "--n-bags", "60", "--embed-dim", "16",
        "--min-patches", "10", "--max-patches", "30", "--signal-fraction", "0.3",
        "--signal-strength", "3", "--seed", seed,
    ]);
    assert_eq!(code, 0);
}

#[test]
fn plan_from_fingerprint_uses_derived_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let fp = tmp.path().join("fp.json");
    fs::write(
        &fp,
        r#"{"task":"classification","patch_count_median":2000,"patch_count_iqr":800,
            "patch_count_p5":500,"patch_count_p95":5000,"embed_dim":1024,
            "class_prevalence":[0.5,0.5],"n_train":300,"n_val":100,"n_test":100}"#,
    )
    .unwrap();
    let out = tmp.path().join("plan");
    assert_eq!(run_args(&["plan", "--fingerprint", p(&fp), "--out", p(&out)]), 0);
    let cfg = read_json(&out.join("config.json"));
    assert_eq!(cfg["hidden_dim"], 256);
    assert_eq!(cfg["stride"], 64);
    assert_eq!(cfg["ensemble_chunks"], 13);
    assert_eq!(cfg["bag_size"], 1000);
    assert_eq!(cfg["batch_size"], 32);
    assert_eq!(cfg["seed"], 42);

    let run = read_json(&out.join("run.json"));
    assert_eq!(run["command"], "plan");
    assert_eq!(run["seed"], 42);
    assert_eq!(run["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(run["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn exit_codes() {
    assert_eq!(run_args(&["frobnicate"]), 1);
    assert_eq!(run_args(&["plan", "--mode", "bogus"]), 1);
    assert_eq!(run_args(&["gradcheck", "--dims", "8x4"]), 0);
    assert_eq!(run_args(&["gradcheck", "--dims", "8by4"]), 1);

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(run_args(&["fingerprint", "--manifest", p(&missing)]), 2);
    let garbage = tmp.path().join("garbage.json");
    fs::write(&garbage, "not json").unwrap();
    assert_eq!(run_args(&["plan", "--fingerprint", p(&garbage)]), 2);
    let ck = tmp.path().join("ck.bin");
    fs::write(&ck, b"NOTACKPT________").unwrap();
    synth(&tmp.path().join("data"), "classification", "1");
    let code = run_args(&[
        "predict", "--data-dir", p(&tmp.path().join("data")), "--checkpoint", p(&ck), "--out",
        p(&tmp.path().join("pred")),
    ]);
    assert_eq!(code, 2);
}

fn pipeline(root: &Path, task: &str) {
    let data = root.join("data");
    synth(&data, task, "7");
    assert!(data.join("manifest.json").exists());
    assert!(data.join("planted.json").exists());

    let fp_dir = root.join("fp");
    assert_eq!(run_args(&["fingerprint", "--data-dir", p(&data), "--out", p(&fp_dir)]), 0);
    assert_eq!(read_json(&fp_dir.join("fingerprint.json"))["embed_dim"], 16);

    let train_dir = root.join("train");
    let code = run_args(&[
        "train", "--data-dir", p(&data), "--max-epochs", "3", "--out", p(&train_dir),
    ]);
    assert_eq!(code, 0);
    for f in ["checkpoint.bin", "train_report.json", "config.json", "run.json"] {
        assert!(train_dir.join(f).exists(), "{f}");
    }
    let report = read_json(&train_dir.join("train_report.json"));
    assert!(!report["epochs"].as_array().unwrap().is_empty());

    let pred_dir = root.join("pred");
    let code = run_args(&[
        "predict", "--data-dir", p(&data), "--checkpoint", p(&train_dir.join("checkpoint.bin")),
        "--split", "test", "--out", p(&pred_dir),
    ]);
    assert_eq!(code, 0);
    let preds = pred_dir.join("predictions.jsonl");
    let lines = fs::read_to_string(&preds).unwrap();
    assert!(lines.lines().count() > 0);
    for line in lines.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["task"], task);
    }
    assert!(pred_dir.join("patients.jsonl").exists());

    let eval_dir = root.join("eval");
    let code = run_args(&[
        "evaluate", "--data-dir", p(&data), "--predictions", p(&preds), "--replicates", "50",
        "--out", p(&eval_dir),
    ]);
    assert_eq!(code, 0);
    let eval = read_json(&eval_dir.join("evaluation.json"));
    assert_eq!(eval["task"], task);
    if task == "survival" {
        assert!(eval_dir.join("km_low_risk.csv").exists());
    }

    let rej_dir = root.join("rej");
    let code = run_args(&[
        "reject-curve", "--data-dir", p(&data), "--predictions", p(&preds), "--fractions",
        "0,0.1,0.2", "--out", p(&rej_dir),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(rej_dir.join("rejection.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "fraction,value,n_retained");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn classification_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path(), "classification");
}

#[test]
fn regression_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path(), "regression");
}

#[test]
fn survival_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path(), "survival");
}

#[test]
fn training_and_prediction_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "classification", "3");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let train_dir = tmp.path().join(format!("train_{name}"));
        let pred_dir = tmp.path().join(format!("pred_{name}"));
        assert_eq!(run_args(&["train", "--data-dir", p(&data), "--max-epochs", "2", "--out", p(&train_dir)]), 0);
        let ck = train_dir.join("checkpoint.bin");
        assert_eq!(run_args(&["predict", "--data-dir", p(&data), "--checkpoint", p(&ck), "--out", p(&pred_dir)]), 0);
        outputs.push((fs::read(ck).unwrap(), fs::read(pred_dir.join("predictions.jsonl")).unwrap()));
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn full_bag_mode_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "classification", "5");
    let out = tmp.path().join("train");
    let code = run_args(&[
        "train", "--data-dir", p(&data), "--mode", "full_bag_batch1", "--max-epochs", "1", "--out", p(&out),
    ]);
    assert_eq!(code, 0);
    assert_eq!(read_json(&out.join("config.json"))["training_mode"], "full_bag_batch1");
}
