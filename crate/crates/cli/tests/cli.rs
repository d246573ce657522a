use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pft"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn pft")
}

fn json_stdout(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const TINY: &str = r#"{
    "classes": 3, "channels": 8, "layers": 1, "heads": 2,
    "height": 32, "width": 32, "iterations": 6, "batch_size": 2,
    "train_size": 8, "val_size": 4, "eval_every": 3, "pearson_samples": 2
}"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_then_eval_reproduces_miou() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let trained = json_stdout(&pft(&["train", "--config", &config, "--out", out.to_str().unwrap()]));
    for f in ["loss.csv", "metrics.json", "final.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ckpt = out.join("final.ckpt");
    let evaluated = json_stdout(&pft(&["eval", "--checkpoint", ckpt.to_str().unwrap()]));
    let (a, b) = (trained["miou"].as_f64().unwrap(), evaluated["miou"].as_f64().unwrap());
    assert!((a - b).abs() <= 1e-12);
    assert_eq!(evaluated["step"], 6);

    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let steps: Vec<u64> = metrics["evals"].as_array().unwrap().iter().map(|e| e["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![3, 6]);

    let seg = dir.path().join("seg");
    let ms = json_stdout(&pft(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--multi-scale",
        "--save-seg",
        seg.to_str().unwrap(),
    ]));
    assert!(ms["miou"].as_f64().unwrap() >= 0.0);
    let pgms = fs::read_dir(&seg).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "pgm").count();
    assert_eq!(pgms, 4);
}

#[test]
fn resume_continues_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let full = json_stdout(&pft(&["train", "--config", &config, "--out", a.to_str().unwrap()]));
    json_stdout(&pft(&["train", "--config", &config, "--out", b.to_str().unwrap(), "--until", "2"]));
    let ckpt = b.join("final.ckpt");
    let resumed = json_stdout(&pft(&["train", "--resume", ckpt.to_str().unwrap(), "--out", b.to_str().unwrap()]));
    assert_eq!(full["miou"], resumed["miou"]);
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
}

#[test]
fn export_attn_writes_every_map() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = dir.path().join("run");
    json_stdout(&pft(&["train", "--config", &config, "--set", "iterations=1", "--out", run.to_str().unwrap()]));
    let out = dir.path().join("export");
    let ckpt = run.join("final.ckpt");
    let v = json_stdout(&pft(&["export-attn", "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    // L x 3 scales x K categories
    assert_eq!(v["maps"], 9);
    for s in [8, 16, 32] {
        for k in 0..3 {
            for ext in ["f64", "json", "pgm"] {
                assert!(out.join(format!("attn/layer0/scale{s}/cat{k}.{ext}")).exists());
            }
        }
    }
    assert!(out.join("sample").read_dir().unwrap().count() >= 3);
}

#[test]
fn gen_data_writes_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let v = json_stdout(&pft(&["gen-data", "--out", out.to_str().unwrap(), "--size", "3", "--split", "train"]));
    assert_eq!(v["written"], 3);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 9);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"iters": 3}"#).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--config", bad.to_str().unwrap(), "--out", out],
        vec!["train", "--config", unknown.to_str().unwrap(), "--out", out],
        vec!["train", "--set", "nope=1", "--out", out],
        vec!["train", "--set", "iterations", "--out", out],
        vec!["train", "--set", "lr=0", "--out", out],
        vec!["ablate", "--variant", "bogus"],
        vec!["frobnicate"],
        vec![],
    ];
    for args in cases {
        let o = pft(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let o = pft(&["eval", "--checkpoint", "/nonexistent/x.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let o = pft(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() >= 30);
    assert!(text.contains("full_model_total_loss"));
    assert!(!text.contains("FAIL"));
}
