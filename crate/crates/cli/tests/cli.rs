use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1
k = 3
output_dir = "runs"

[model]
max_positions = 64
hidden_dim = 8
num_layers = 1
num_heads = 2
ffn_dim = 16

[pretrain_base]
learning_rate = 2e-3
epochs = 1
max_len = 64

[pretrain_art]
learning_rate = 2e-3
epochs = 1
max_len = 64

[finetune]
learning_rate = 2e-3
epochs = 2
max_len = 64

[baseline.static]
dim = 8
epochs = 1

[synth]
generic_docs = 20
art_docs = 20
pairs = 24
words_per_theme = 10
lexicon_keywords = 5
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        // Run from elsewhere so relative config paths must resolve against the file.
        Command::new(env!("CARGO_BIN_EXE_artlink"))
            .current_dir(std::env::temp_dir())
            .env_remove("ARTLINK_CONFIG")
            .arg("--config")
            .arg(self.path("run.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    fn prepared(config: &str) -> Self {
        let ws = Workspace::new(config);
        ws.ok(&["synth"]);
        ws.ok(&["build-vocab"]);
        ws.ok(&["pretrain", "--stage", "base"]);
        ws
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let ws = Workspace::prepared(TINY);
    for f in ["data/generic.jsonl", "data/art.jsonl", "data/pairs.jsonl", "data/themes.jsonl", "runs/vocab.txt"] {
        assert!(ws.path(f).exists(), "{f}");
    }
    let base = ws.path("runs/base.ckpt");
    let art = ws.path("runs/art.ckpt");
    ws.ok(&["pretrain", "--stage", "art", "--from", s(&base)]);

    let table = ws.ok(&["evaluate", "--from", s(&base), s(&art)]);
    assert!(table.contains("FT-Base-small") && table.contains("FT-Art-small"), "{table}");
    assert!(table.contains("Fine-tuning time (min/fold)"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("runs/report.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 2);
    assert_eq!(report[0]["folds"].as_array().unwrap().len(), 3);

    ws.ok(&["finetune", "--from", s(&art)]);
    let ft = ws.path("runs/finetuned.ckpt");
    ws.ok(&["predict", "--from", s(&ft)]);
    let preds = fs::read_to_string(ws.path("runs/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 24);
    let first: serde_json::Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    assert!(first["probability"].is_number() && first["prediction"].is_number());

    let graph = ws.ok(&["graph", "--pred", s(&ws.path("runs/predictions.jsonl"))]);
    assert!(graph.contains("graph edit distance"), "{graph}");
    let dot = fs::read_to_string(ws.path("runs/graph.dot")).unwrap();
    assert!(dot.starts_with("graph artists {"));

    for kind in ["random", "static"] {
        let out = ws.ok(&["baseline", "--kind", kind]);
        assert!(out.contains("Accuracy"), "{out}");
    }
    ws.ok(&["baseline", "--kind", "contextual", "--from", s(&base)]);
    assert!(ws.path("runs/contextual.jsonl").exists());
}

#[test]
fn refuses_to_overwrite() {
    let ws = Workspace::new(TINY);
    ws.ok(&["synth"]);
    let before = fs::read_to_string(ws.path("data/pairs.jsonl")).unwrap();
    assert_eq!(ws.code(&["synth"]), 2);
    assert_eq!(ws.code(&["synth", "--seed", "5"]), 2);
    assert_eq!(fs::read_to_string(ws.path("data/pairs.jsonl")).unwrap(), before);
    ws.ok(&["synth", "--seed", "5", "--overwrite"]);
    assert_ne!(fs::read_to_string(ws.path("data/pairs.jsonl")).unwrap(), before);
}

#[test]
fn stage_and_usage_errors() {
    let ws = Workspace::prepared(TINY);
    let base = ws.path("runs/base.ckpt");
    assert_eq!(ws.code(&["pretrain", "--stage", "art"]), 2);
    assert_eq!(ws.code(&["pretrain", "--stage", "base", "--from", s(&base), "--overwrite"]), 2);
    assert_eq!(ws.code(&["predict", "--from", s(&base)]), 2);
    assert_eq!(ws.code(&["baseline", "--kind", "contextual"]), 2);
    assert_eq!(ws.code(&["baseline", "--kind", "random", "--from", s(&base)]), 2);
    assert_eq!(ws.code(&["pretrain", "--stage", "sideways"]), 2);
    assert_eq!(ws.code(&["no-such-command"]), 2);

    ws.ok(&["pretrain", "--stage", "art", "--from", s(&base)]);
    let art = ws.path("runs/art.ckpt");
    assert_eq!(ws.code(&["pretrain", "--stage", "art", "--from", s(&art), "--out", s(&ws.path("x.ckpt"))]), 2);
}

#[test]
fn input_errors() {
    let ws = Workspace::prepared(TINY);
    let missing = ws.path("absent.ckpt");
    assert_eq!(ws.code(&["finetune", "--from", s(&missing)]), 3);

    let bad = ws.path("bad.jsonl");
    fs::write(&bad, "{\"artist_a\": \"x\"}\n").unwrap();
    let base = ws.path("runs/base.ckpt");
    assert_eq!(ws.code(&["graph", "--pred", s(&bad)]), 3);

    let pairs = fs::read_to_string(ws.path("data/pairs.jsonl")).unwrap();
    let stranger = pairs.lines().next().unwrap().replacen("artist-0000-a", "nobody", 1);
    let pred = ws.path("pred.jsonl");
    fs::write(&pred, stranger.replace("\"bio_a\"", "\"prediction\":1,\"bio_a\"")).unwrap();
    assert_eq!(ws.code(&["graph", "--pred", s(&pred)]), 3);

    fs::write(ws.path("runs/vocab.txt"), "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nword\n").unwrap();
    assert_eq!(ws.code(&["finetune", "--from", s(&base)]), 2);

    fs::write(ws.path("run.toml"), "k = \"three\"\n").unwrap();
    assert_eq!(ws.code(&["gradcheck"]), 2);
}

#[test]
fn divergent_training_is_numerical() {
    let config = TINY.replace("[pretrain_base]\nlearning_rate = 2e-3", "[pretrain_base]\nlearning_rate = 1e30");
    let ws = Workspace::new(&config);
    ws.ok(&["synth"]);
    ws.ok(&["build-vocab"]);
    assert_eq!(ws.code(&["pretrain", "--stage", "base"]), 4);
    assert!(!ws.path("runs/base.ckpt").exists());
}

#[test]
fn config_from_environment() {
    let ws = Workspace::new(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_artlink"))
        .current_dir(std::env::temp_dir())
        .env("ARTLINK_CONFIG", ws.path("run.toml"))
        .arg("synth")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(ws.path("data/pairs.jsonl").exists());
}

#[test]
fn gradcheck_passes() {
    let ws = Workspace::new(TINY);
    let out = ws.ok(&["gradcheck"]);
    assert!(out.contains("end_to_end_pair_loss") && !out.contains("FAIL"), "{out}");
}
