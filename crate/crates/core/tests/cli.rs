use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use worldmodel::io::sha256_hex;

const SMALL: &str = r#"
seed = 3

[world]
n_actions = 8
n_scenarios = 2
start_states_per_scenario = 4

[data]
n_episodes = 24

[data.split]
test_per_scenario = 6
kb_per_scenario = 10

[model]
d_model = 16

[train]
epochs = 4
steps_per_epoch = 6
batch_size = 4
stage_length = 1

[tune]
steps = 6
batch_size = 4

[eval]
sequence_episodes = 6

[synthesis]
seed_pool_size = 6
target_pool_size = 10
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_worldmodel"))
}

struct Env {
    dir: tempfile::TempDir,
    cfg: PathBuf,
}

impl Env {
    fn new(text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        let root = dir.path().join("runs");
        std::fs::write(&cfg, format!("run_root = {:?}\n{text}", root.to_str().unwrap())).unwrap();
        Env { dir, cfg }
    }

    fn run(&self, args: &[&str]) -> Output {
        bin().arg("--config").arg(&self.cfg).args(args).env_remove("WORLDMODEL_PROVIDER_KEY").output().unwrap()
    }

    fn run_dir(&self) -> PathBuf {
        let root = self.dir.path().join("runs");
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).collect();
        dirs.sort();
        assert_eq!(dirs.len(), 1, "{dirs:?}");
        dirs.remove(0)
    }
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tree_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree_hashes(&p));
        } else {
            if p.file_name().is_some_and(|n| n == "config.json") {
                // records run_root, which differs between the two runs
                continue;
            }
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), sha256_hex(&std::fs::read(&p).unwrap())));
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_key_exits_2_with_key_name() {
    let env = Env::new("seed = 1\n[train]\nbogus_knob = 3\n");
    let o = env.run(&["gen-world"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("bogus_knob"));
    let o = bin().arg("gen-world").output().unwrap();
    assert_eq!(o.status.code(), Some(2), "missing seed: {}", text(&o));
}

#[test]
fn validate_data_reports_manifest_counts() {
    let env = Env::new(SMALL);
    let o = env.run(&["gen-data"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let dir = env.run_dir();
    let o = env.run(&["validate-data", dir.join("data.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = text(&o);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("data.manifest.json")).unwrap()).unwrap();
    for (sc, c) in manifest["per_scenario"].as_object().unwrap() {
        assert!(out.contains(&format!("{sc}\t{}", c["samples"])), "{sc} missing in {out}");
    }
    // a dropped line no longer matches the manifest
    let data = std::fs::read_to_string(dir.join("data.jsonl")).unwrap();
    let cut: String = data.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let bad = env.dir.path().join("cut.jsonl");
    std::fs::write(&bad, cut).unwrap();
    let o = env.run(&[
        "validate-data",
        bad.to_str().unwrap(),
        "--manifest",
        dir.join("data.manifest.json").to_str().unwrap(),
        "--world",
        dir.join("world.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn pipeline_end_to_end_and_reproducible() {
    let a = Env::new(SMALL);
    let b = Env::new(SMALL);
    for env in [&a, &b] {
        for cmd in [
            vec!["gen-world"],
            vec!["gen-data"],
            vec!["train"],
            vec!["tune"],
            vec!["kb-build"],
            vec!["eval-matrix", "--compare-reference"],
            vec!["eval-seq"],
            vec!["synthesize"],
        ] {
            let o = env.run(&cmd);
            assert_eq!(o.status.code(), Some(0), "{cmd:?}: {}", text(&o));
        }
    }
    let (da, db) = (a.run_dir(), b.run_dir());
    assert_eq!(da.file_name(), db.file_name(), "run directory named by config hash");
    for f in ["matrix.md", "matrix.csv", "matrix.json", "sequence.md", "pool.jsonl", "tuned.ckpt.json", "pretrain.loss.csv"] {
        assert!(da.join(f).exists(), "{f}");
    }
    let md = std::fs::read_to_string(da.join("matrix.md")).unwrap();
    assert!(md.contains("| Input Modality |") && md.contains("Reference numbers"));
    assert_eq!(tree_hashes(&da), tree_hashes(&db));
    let pool = std::fs::read_to_string(da.join("pool.jsonl")).unwrap();
    assert_eq!(pool.lines().count(), 10);
}

#[test]
fn naive_override_changes_run_dir() {
    let env = Env::new(SMALL);
    let o = env.run(&["--set", "train.schedule=naive", "train"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let o = env.run(&["--set", "train.schedule=naive", "eval-matrix"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let naive = env.run_dir();
    let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(naive.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["schedule"], "naive");
    // the default schedule hashes elsewhere and has no checkpoint yet
    let o = env.run(&["eval-matrix"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn tampered_checkpoint_is_a_data_error() {
    let env = Env::new(SMALL);
    assert_eq!(env.run(&["train"]).status.code(), Some(0));
    let ck = env.run_dir().join("pretrain.ckpt.json");
    let s = std::fs::read_to_string(&ck).unwrap();
    let i = s.find("\"data\":[").unwrap() + 8;
    let tampered = format!("{}{}", &s[..i], s[i..].replacen(|c: char| c.is_ascii_digit(), "9", 1));
    assert_ne!(tampered, s);
    std::fs::write(&ck, tampered).unwrap();
    let o = env.run(&["eval-matrix", "--model", "pretrained"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("checksum"));
}

#[test]
fn unreachable_provider_exits_5() {
    let env = Env::new(&format!(
        "{SMALL}\n[provider]\nendpoint = \"http://127.0.0.1:9/v1\"\ncredential_env = \"WM_TEST_KEY\"\n[provider.retry]\nmax_retries = 0\ntimeout_ms = 300\nbackoff_ms = 0\n"
    ));
    assert_eq!(env.run(&["train"]).status.code(), Some(0));
    // a missing credential fails before any request is made
    let o = env.run(&["synthesize", "--provider", "http"]);
    assert_eq!(o.status.code(), Some(5), "{}", text(&o));
    assert!(text(&o).contains("WM_TEST_KEY"));
    let o = bin()
        .arg("--config")
        .arg(&env.cfg)
        .args(["synthesize", "--provider", "http"])
        .env("WM_TEST_KEY", "secret-token")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(5), "{}", text(&o));
    let audit = std::fs::read_to_string(env.run_dir().join("audit.jsonl")).unwrap();
    assert!(!audit.is_empty() && !audit.contains("secret-token"));
}

#[test]
fn grad_check_passes_on_small_model() {
    let env = Env::new(&format!("{SMALL}\n[grad_check]\nd_model = 8\nentries_per_param = 2\nprobe_samples = 2\n"));
    let o = env.run(&["grad-check"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(env.run_dir().join("gradcheck.json").exists());
}

#[test]
fn help_lists_subcommands() {
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let h = text(&o);
    for s in ["gen-world", "gen-data", "train", "tune", "kb-build", "eval-matrix", "eval-seq", "synthesize", "grad-check", "validate-data", "repro"] {
        assert!(h.contains(s), "{s}");
    }
}
