use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use casematch::params::Checkpoint;

const TINY: &str = r#"
[corpus]
n_cases = 60
n_articles = 3
n_charges = 3
n_terms = 2
vocab_size = 48
seq_len = 9

[match_data]
n_pairs = 20

[encoder]
d_model = 16
n_heads = 2
ffn_dim = 32
n_shared_layers = 1
max_len = 12
dropout_rate = 0.0

[pretrain]
epochs = 2

[stage2]
epochs = 60
learning_rate = 0.003
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_casematch"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg("run.toml")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

#[test]
fn gen_writes_data_and_manifest() {
    let ws = Workspace::new();
    ws.ok(&["gen", "--ljp"]);
    assert_eq!(lines(&ws.path("data/ljp.jsonl")), 60);
    let manifest = fs::read_to_string(ws.path("data/ljp.manifest.toml")).unwrap();
    assert!(manifest.contains("n_cases = 60"));
    assert!(manifest.contains("seed = 7"));
}

#[test]
fn gen_is_deterministic_and_refuses_to_overwrite() {
    let ws = Workspace::new();
    ws.ok(&["gen", "--match"]);
    let first = fs::read(ws.path("data/match.jsonl")).unwrap();

    let refused = ws.run(&["gen", "--match", "--seed", "99"]);
    assert_eq!(code(&refused), 1);
    assert_eq!(fs::read(ws.path("data/match.jsonl")).unwrap(), first);

    ws.ok(&["gen", "--match", "--force"]);
    assert_eq!(fs::read(ws.path("data/match.jsonl")).unwrap(), first);
    ws.ok(&["gen", "--match", "--force", "--seed", "99"]);
    assert_ne!(fs::read(ws.path("data/match.jsonl")).unwrap(), first);
}

#[test]
fn pretrain_epoch_override_and_checkpoint() {
    let ws = Workspace::new();
    ws.ok(&["gen", "--ljp"]);
    ws.ok(&["pretrain", "--epochs", "1"]);
    assert_eq!(lines(&ws.path("exports/pretrain_history.jsonl")), 1);
    let ckpt = Checkpoint::load(&ws.path("checkpoints/stage1.ckpt")).unwrap();
    assert!(ckpt.params.by_name("enc.embed").is_some());
    assert!(ws.path("checkpoints/vocab.txt").exists());
}

#[test]
fn missing_or_corrupt_data_is_a_runtime_error() {
    let ws = Workspace::new();
    let missing = ws.run(&["pretrain"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("ljp.jsonl"));

    ws.ok(&["gen", "--ljp"]);
    let path = ws.path("data/ljp.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"article\":", "\"article\":\"x", 1)).unwrap();
    let corrupt = ws.run(&["pretrain"]);
    assert_eq!(code(&corrupt), 2);
    let err = String::from_utf8_lossy(&corrupt.stderr);
    assert!(err.contains("ljp.jsonl") && err.contains("line 1"), "{err}");
}

#[test]
fn train_requires_stage1_unless_no_pretrain() {
    let ws = Workspace::new();
    ws.ok(&["gen", "--match"]);
    let out = ws.run(&["train"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage1.ckpt"));
    ws.ok(&["train", "--ablation", "no_pretrain", "--epochs", "1"]);
    assert!(ws.path("checkpoints/stage2-no_pretrain.ckpt").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["train", "--ablation", "bogus"])), 1);
    assert_eq!(code(&ws.run(&["gen"])), 1);
    assert_eq!(code(&ws.run(&["frobnicate"])), 1);
    fs::write(ws.path("run.toml"), "[stage2]\nlambda1 = -1.0\n").unwrap();
    assert_eq!(code(&ws.run(&["gen", "--ljp"])), 1);
    assert!(!ws.path("data").exists());
}

#[test]
fn full_cycle_on_pretrained_extractor() {
    let ws = Workspace::new();
    ws.ok(&["gen", "--ljp"]);
    ws.ok(&["gen", "--match"]);
    ws.ok(&["pretrain"]);
    ws.ok(&["train", "--epochs", "2"]);
    let first = fs::read(ws.path("exports/train_history-none.json")).unwrap();
    ws.ok(&["train", "--epochs", "2"]);
    assert_eq!(fs::read(ws.path("exports/train_history-none.json")).unwrap(), first);

    let out = ws.ok(&["eval"]);
    let line = out.lines().next().unwrap();
    let acc = line.split("Acc ").nth(1).unwrap().split_whitespace().next().unwrap();
    assert_eq!(acc.split('.').nth(1).map(str::len), Some(2), "{line}");
    assert!(ws.path("exports/metrics-none-test.json").exists());
}

#[test]
fn overfit_run_scores_on_its_training_split() {
    let ws = Workspace::new();
    ws.ok(&["gen", "--match"]);
    ws.ok(&["train", "--ablation", "no_pretrain"]);
    ws.ok(&["eval", "--ablation", "no_pretrain", "--split", "train"]);
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("exports/metrics-no_pretrain-train.json")).unwrap()).unwrap();
    let acc = record["metrics"]["accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn no_fusion_analysis_shows_uniform_weights() {
    let ws = Workspace::new();
    ws.ok(&["gen", "--match"]);
    let cfg = format!("{TINY}\n[stage2.ablation]\nno_fusion = true\nno_pretrain = true\n");
    fs::write(ws.path("run.toml"), cfg).unwrap();
    ws.ok(&["train", "--epochs", "2"]);
    let history: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("exports/train_history-no_fusion+no_pretrain.json")).unwrap()).unwrap();
    for e in history["epochs"].as_array().unwrap() {
        assert_eq!(e["weight_min"], serde_json::json!([0.25, 0.25, 0.25, 0.25]));
        assert_eq!(e["weight_max"], serde_json::json!([0.25, 0.25, 0.25, 0.25]));
    }

    let ckpt = "checkpoints/stage2-no_fusion+no_pretrain.ckpt";
    ws.ok(&["analyze", "--checkpoint", ckpt, "--weights", "--embeddings"]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("exports/weights-no_fusion+no_pretrain-summary.json")).unwrap()).unwrap();
    for head in summary["heads"].as_array().unwrap() {
        for key in ["min", "q1", "median", "q3", "max"] {
            assert_eq!(head[key].as_f64(), Some(0.25));
        }
    }
    // 20 pairs hold 5 fully matched and 5 unrelated pairs: 10 pairs, 20 cases
    let rows = lines(&ws.path("exports/embeddings-no_fusion+no_pretrain.tsv")) - 1;
    assert_eq!(rows, 4 * 20);
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let ws = Workspace::new();
    ws.ok(&["gen", "--ljp"]);
    ws.ok(&["gen", "--match"]);
    ws.ok(&["pretrain", "--epochs", "1"]);
    fs::write(ws.path("run.toml"), TINY.replace("d_model = 16", "d_model = 8")).unwrap();
    let out = ws.run(&["train", "--epochs", "1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_model"));
}
