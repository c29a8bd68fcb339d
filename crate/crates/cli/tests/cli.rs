use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const TINY: &str = r#"
iterations = 3

[model]
dim_lat = 4
dim_latxy = 8
enc_layers = 1
dim_h = 32
dec_layers = 2
updates = 2
tasks_per_update = 2
k_eval = 4

[policy]
hidden = 16
layers = 1
updates = 2
batch = 4
horizon = 10

[train]
eval_tasks = 1
eval_episodes = 2
checkpoint_every = 2

[test]
tasks = 2
episodes = 2
context = 10
finetune_steps = 1
"#;

fn gssm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gssm"))
        .args(args)
        .current_dir(dir)
        .env_remove("GSSM_OUT_DIR")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = gssm(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("train"));
}

#[test]
fn unknown_env_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = gssm(&["train", "--env", "pendulum"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_config_error_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[model]\ndim_latent = 3\n").unwrap();
    let o = gssm(&["train", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error category=config:"), "{err}");
}

#[test]
fn invalid_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[model]\ndim_lat = 0\n").unwrap();
    let o = gssm(&["train", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = gssm(&["test", "--checkpoint", "nowhere/agent"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error category="), "{err}");
    assert!(!err.contains("category=config"), "{err}");
}

#[test]
fn train_is_deterministic_and_test_reads_its_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for out in ["a", "b"] {
        let o = gssm(
            &["train", "--config", &cfg, "--seed", "7", "--out", out],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a/train_log.csv")).unwrap();
    let b = fs::read(dir.path().join("b/train_log.csv")).unwrap();
    assert!(a.starts_with(b"# train_log v1\n"));
    assert_eq!(a, b);
    assert!(dir.path().join("a/effective_config.toml").exists());
    assert!(dir.path().join("a/timing.csv").exists());

    let o = gssm(&["test", "--config", &cfg, "--out", "a"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let results = fs::read_to_string(dir.path().join("a/test_results.csv")).unwrap();
    assert!(results.starts_with("# test_results v1\n"));
    assert_eq!(results.lines().count(), 2 + 2);
}

#[test]
fn out_dir_falls_back_to_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_gssm"))
        .args(["train", "--config", &cfg, "--iters", "1"])
        .current_dir(dir.path())
        .env("GSSM_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("from-env/train_log.csv").exists());
}

#[test]
fn bounds_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = gssm(
        &[
            "bounds",
            "--pairs",
            "3",
            "--policies",
            "50",
            "--theorem-pairs",
            "5",
            "--out",
            "b",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("b/bound_report.csv")).unwrap();
    assert!(report.starts_with("# bound_report v1\n"));
    assert_eq!(report.lines().count(), 2 + 3);
}

#[test]
fn smoke_runs_the_pipeline_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = gssm(&["smoke", "--out", "s"], dir.path());
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(secs < 60.0, "smoke took {secs:.1}s");
    for sub in [
        "cartpole-amortized",
        "cartpole-ablation",
        "acrobot-amortized",
        "acrobot-ablation",
    ] {
        assert!(
            dir.path()
                .join("s/smoke")
                .join(sub)
                .join("test_results.csv")
                .exists(),
            "{sub}"
        );
    }
    assert!(dir.path().join("s/smoke/bound_report.csv").exists());
}
