use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tiny() -> Value {
    json!({
        "seed": 3,
        "output_dir": "unused",
        "data": {
            "image": { "channels": 1, "height": 8, "width": 8 },
            "source": {
                "kind": "shapes",
                "pretrain_classes": ["disc", "cross"],
                "finetune_classes": ["bars", "blob"],
                "n_train": 40,
                "n_test": 12
            },
            "corruptions": { "kinds": ["contrast"], "severities": [1, 5], "n_per_cell": 8 }
        },
        "model": {
            "kind": "tiny_vit",
            "vit": { "patch_size": 4, "embed_dim": 8, "num_heads": 2, "depth": 2, "mlp_ratio": 2 }
        },
        "pretrain": { "epochs": 1, "batch_size": 8, "optimizer": "adam", "lr": 0.001 },
        "finetune": {
            "train": { "epochs": 3, "batch_size": 8, "optimizer": "sgd", "lr": 0.01 },
            "task": "classification",
            "init": "pretrained"
        },
        "metrics": { "n": 6, "k": 1, "inversion": { "iterations": 5 } }
    })
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn ilens(config: &Path, out: &Path, steps: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilens"))
        .arg("--config")
        .arg(config)
        .arg("--output-dir")
        .arg(out)
        .args(steps)
        .env_remove("ILENS_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_and_metrics_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let out = tmp.path().join("run");
    let o = ilens(&cfg, &out, &["gen-data", "train", "metrics"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let profile = out.join("metrics/finetune/profile.csv");
    let first = std::fs::read(&profile).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert!(text.starts_with("layer,"), "{text}");
    assert_eq!(text.lines().count(), 3);

    let o = ilens(&cfg, &out, &["metrics"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&profile).unwrap(), first);

    let m = ilens::manifest::RunManifest::load_or_default(&out).unwrap();
    assert!(m.files.contains_key("metrics/finetune/profile.csv"));
    assert!(m.verify(&out).unwrap().is_empty());
    assert_eq!(m.seed, 3);
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let out = tmp.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_ilens"))
        .arg("--config")
        .arg(&cfg)
        .arg("--output-dir")
        .arg(&out)
        .arg("gen-data")
        .env("ILENS_SEED", "99")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let m = ilens::manifest::RunManifest::load_or_default(&out).unwrap();
    assert_eq!(m.seed, 99);
}

#[test]
fn missing_seed_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny();
    v.as_object_mut().unwrap().remove("seed");
    let cfg = write_config(tmp.path(), &v);
    let o = ilens(&cfg, &tmp.path().join("run"), &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("kind=schema") && e.contains("seed"), "{e}");
}

#[test]
fn unknown_key_reports_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny();
    v["finetune"]["train"]["learning_rate"] = json!(0.1);
    let cfg = write_config(tmp.path(), &v);
    let o = ilens(&cfg, &tmp.path().join("run"), &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("finetune.train") && e.contains("learning_rate"), "{e}");
}

#[test]
fn missing_config_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ilens(&tmp.path().join("nope.json"), &tmp.path().join("run"), &["gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("kind=missing"));
}

#[test]
fn missing_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let o = ilens(&cfg, &tmp.path().join("run"), &["metrics"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny();
    v["pretrain"]["lr"] = json!(1e30);
    v["pretrain"]["optimizer"] = json!("sgd");
    let cfg = write_config(tmp.path(), &v);
    let o = ilens(&cfg, &tmp.path().join("run"), &["gen-data", "train"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("kind=nonfinite"));
}

#[test]
fn bad_severity_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny();
    v["data"]["corruptions"]["severities"] = json!([1, 7]);
    let cfg = write_config(tmp.path(), &v);
    let o = ilens(&cfg, &tmp.path().join("run"), &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.corruptions.severities"));
}

#[test]
fn config_hash_ignores_output_dir() {
    let a = ilens::RunConfig::from_json(&tiny().to_string()).unwrap();
    let mut b = a.clone();
    b.output_dir = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.seed += 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn full_pipeline_writes_every_artifact() {
    for depth in [2, 3] {
        let tmp = tempfile::tempdir().unwrap();
        let mut v = tiny();
        v["model"]["vit"]["depth"] = json!(depth);
        let cfg = write_config(tmp.path(), &v);
        let out = tmp.path().join("run");
        let o = ilens(&cfg, &out, &["all"]);
        assert!(o.status.success(), "depth {depth}: {}", stderr(&o));
        for f in [
            "flow/finetune/flow.csv",
            "dynamics/finetune/trace.json",
            "correlate/finetune/grid_learning_forgetting_mean_corrupted.csv",
            "correlate/finetune/grid_cka_mean_corrupted.json",
            "report.md",
            "report.html",
        ] {
            assert!(out.join(f).is_file(), "depth {depth}: {f}");
        }
        assert_eq!(out.join("correlate/finetune/forgetting_std_mean_corrupted.csv").is_file(), depth >= 3);
        let m = ilens::manifest::RunManifest::load_or_default(&out).unwrap();
        assert!(m.verify(&out).unwrap().is_empty());
    }
}
