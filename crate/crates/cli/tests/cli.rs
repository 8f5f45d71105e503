use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn spec_path() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/synth_default.json").to_string()
}

fn slotprompt(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slotprompt"));
    cmd.args(args).env_remove("SLOTPROMPT_OUTPUT_ROOT");
    if let Some(root) = root {
        cmd.env("SLOTPROMPT_OUTPUT_ROOT", root);
    }
    cmd.output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn config(protocols: Value) -> Value {
    json!({
        "corpus": { "synth": { "spec": spec_path() } },
        "target": "GetWeather",
        "pipeline": {
            "model": { "d_model": 16, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 1, "d_ff": 32, "dropout": 0.0 },
            "warmup": { "learning_rate": 0.002, "patience": 1, "max_epochs": 1, "mode": "finetune" },
            "main": { "learning_rate": 0.002, "patience": 1, "max_epochs": 1, "mode": "finetune" }
        },
        "protocols": protocols,
        "seeds": [0],
        "output_dir": "run"
    })
}

fn write(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, value.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_and_prepare_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let out = slotprompt(&["synth", &spec_path(), corpus.to_str().unwrap(), "--seed", "3"], None);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&corpus).unwrap().lines().count(), 360);

    let prepared = dir.path().join("prepared");
    let out = slotprompt(&["prepare", corpus.to_str().unwrap(), prepared.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["main.jsonl", "inverse.jsonl", "registry.json"] {
        assert!(prepared.join(name).is_file(), "{name}");
    }
    let first: Value = serde_json::from_str(fs::read_to_string(prepared.join("main.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "main");
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", &config(json!([])));
    let out = slotprompt(&["eval", &bad], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("protocols"), "{}", stderr(&out));

    let out = slotprompt(&["train", &dir.path().join("missing.json").to_string_lossy()], None);
    assert_eq!(out.status.code(), Some(1));

    let out = slotprompt(&["synth", &dir.path().join("nope.json").to_string_lossy(), "x.jsonl"], None);
    assert_eq!(out.status.code(), Some(1));

    let foreign = write(dir.path(), "foreign.json", &json!({ "schema_version": 99 }));
    let out = slotprompt(&["report", &foreign], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("foreign.json"), "{}", stderr(&out));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = config(json!(["zero_shot"]));
    value["pipeline"]["model"]["max_input_len"] = json!(4);
    let path = write(dir.path(), "short.json", &value);
    let out = slotprompt(&["eval", &path], None);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["completed"], false);
    assert_eq!(manifest["failures"].as_array().unwrap().len(), 1);
}

#[test]
fn eval_train_and_report_under_a_relocated_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let path = write(dir.path(), "cfg.json", &config(json!(["zero_shot", "robustness"])));

    let out = slotprompt(&["train", &path], Some(&root));
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = root.join("run/units/full/all/GetWeather/seed-0/model.ckpt");
    assert!(ckpt.is_file());
    assert!(stdout(&out).contains("seed-0"));

    let out = slotprompt(&["eval", &path], Some(&root));
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("Average F1"));
    assert!(stdout(&out).contains("del \"what is the\""));
    let report = root.join("run/report.json");
    assert!(report.is_file());
    assert!(!dir.path().join("run").exists());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(root.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["units"][0]["status"], "from_checkpoint");

    let report = report.to_str().unwrap();
    let out = slotprompt(&["report", report, "--format", "csv"], None);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("protocol,row,metric,seed,value\n"));
    let out = slotprompt(&["report", report, "--format", "json"], None);
    let parsed: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(parsed["seeds"], json!([0]));
    let out = slotprompt(&["report", report, "--format", "yaml"], None);
    assert_eq!(out.status.code(), Some(1));
}
