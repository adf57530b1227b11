use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn jumpflow(args: &[&str], config: &Path, env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_jumpflow"));
    cmd.args(args).arg("--config").arg(config).env_remove("JUMPFLOW_OUT");
    if let Some(dir) = env_out {
        cmd.env("JUMPFLOW_OUT", dir);
    }
    cmd.output().unwrap()
}

#[test]
fn simulate_writes_versioned_summary() {
    let out = tempfile::tempdir().unwrap();
    let run = jumpflow(&["simulate", "--out", out.path().to_str().unwrap()], &config("simulate-rotation.toml"), None);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["format_version"], 1);
    assert_eq!(summary["command"], "simulate");
    assert!(out.path().join("trajectory.csv").exists());
    assert!(String::from_utf8_lossy(&run.stderr).contains(" s"));
}

#[test]
fn flag_beats_environment_for_output_dir() {
    let (flag, env) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config("simulate-rotation.toml");
    let run = jumpflow(&["simulate", "--out", flag.path().to_str().unwrap()], &cfg, Some(env.path()));
    assert!(run.status.success());
    assert!(flag.path().join("summary.json").exists());
    assert!(!env.path().join("summary.json").exists());

    let run = jumpflow(&["simulate"], &cfg, Some(env.path()));
    assert!(run.status.success());
    assert!(env.path().join("summary.json").exists());
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[scenario]\nname = \"spiral\"\n[path]\nkind = \"piecewise_linear\"\ntimes = [0.0, 1.0]\nvalues = [[0.0], [1.0]]\nstep = 0.1\n").unwrap();
    let run = jumpflow(&["simulate", "--out", dir.path().to_str().unwrap()], &path, None);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("spiral"));

    let run = jumpflow(&["simulate"], &dir.path().join("missing.toml"), None);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn stopped_decomposition_exits_with_tau_code() {
    let out = tempfile::tempdir().unwrap();
    let run = jumpflow(&["decompose", "--out", out.path().to_str().unwrap()], &config("decompose-rotation-jump.toml"), None);
    assert_eq!(run.status.code(), Some(5));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(out.path().join("decompose.json")).unwrap()).unwrap();
    assert_eq!(doc["tau"], 0.6);
    assert_eq!(doc["stop"], "non_decomposable_jump");
}

#[test]
fn seed_flag_changes_sampled_paths() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config("simulate-zero.toml");
    for (dir, seed) in [(&a, "1"), (&b, "2")] {
        let run = jumpflow(&["simulate", "--seed", seed, "--out", dir.path().to_str().unwrap()], &cfg, None);
        assert!(run.status.success());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("path.csv")).unwrap();
    assert_ne!(read(&a), read(&b));
}
