use std::path::Path;
use std::process::{Command, Output};

fn tdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdm")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

const TINY: &str = r#"
seed = 3

[data.synthetic]
n_classes = 8
instances_per_class = 8
image_size = 16
patch_size = 4

[split]
fractions = [0.5, 0.25, 0.25]

[model.backbone]
width = 4

[train]
episodes = 4
n_way = 2
n_query = 2
val_every = 2
val_episodes = 2

[eval]
n_way = 2
n_query = 2
episodes = 5

[sweep]
n_list = [2, 3]
k_list = [1]
"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    let body = format!("{TINY}\n[output]\ndir = {:?}\n", dir.join("run"));
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn oracle_check_passes() {
    let out = tdm(&["oracle-check", "--trials", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("within 1e-10"));
}

#[test]
fn grad_check_micro_passes() {
    let out = tdm(&["grad-check", "--model", "micro"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_is_a_config_error() {
    let out = tdm(&["train", "--config", "definitely-missing.toml"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unknown_flag_is_a_config_error() {
    assert_eq!(code(&tdm(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&tdm(&["train", "--train.no_such_key", "3"])), 1);
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&tdm(&["--help"])), 0);
}

#[test]
fn train_eval_sweep_diagnose_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");

    let out = tdm(&["train", "--config", &cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.toml", "log.csv", "metrics.json", "checkpoint/manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let ckpt = run.join("checkpoint");
    let ckpt = ckpt.to_str().unwrap();

    let out = tdm(&["eval", "--config", &cfg, "--checkpoint", ckpt, "--dump-weights", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let weights = std::fs::read_to_string(run.join("weights.csv")).unwrap();
    assert!(weights.starts_with("episode,class,channel,w_intra,w_inter,w_S,w_Q,w_T"));

    let out = tdm(&["sweep", "--config", &cfg, "--checkpoint", ckpt]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("sweep.csv").exists());

    let out = tdm(&["diagnose", "--config", &cfg, "--checkpoint", ckpt, "--per-class", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    // Dotted overrides reach the config.
    let out = tdm(&["eval", "--config", &cfg, "--checkpoint", ckpt, "--eval.episodes=1"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("interval undefined"));
}

#[test]
fn synth_data_roundtrips_through_saved_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let out = tdm(&["synth-data", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let path = format!("--data.path={}", data.display());
    let out = tdm(&["train", "--config", &cfg, "--data.source", "saved", &path]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let missing = dir.path().join("no-checkpoint");
    let out = tdm(&["eval", "--config", &cfg, "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}
