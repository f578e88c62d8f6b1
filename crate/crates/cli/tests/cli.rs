use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ippo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ippo"))
        .args(args)
        .env_remove("IPPO_CONFIG")
        .env_remove("IPPO_SEED")
        .env_remove("IPPO_EPISODES")
        .env_remove("IPPO_RUN_ID")
        .env_remove("IPPO_ITERATIONS")
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .canonicalize()
        .unwrap()
}

/// Reference config pointed at the shipped env, writing runs under `dir`.
fn temp_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(configs().join("toy_shop.toml")).unwrap();
    let env = configs().join("toy_shop_env.toml");
    let text: String = text
        .lines()
        .map(|l| {
            if l.starts_with("env =") {
                format!("env = {:?}", env.display().to_string())
            } else if l.starts_with("output_dir =") {
                "output_dir = \"runs\"".to_string()
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(ippo(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn verify_passes_on_reference_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = temp_config(dir.path());
    let out = ippo(&["verify", "--config", cfg.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn missing_config_fails_cleanly() {
    let out = ippo(&["oracle", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn iterate_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = temp_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("runs/r");

    let out = ippo(&[
        "iterate",
        "--config",
        cfg,
        "--run-id",
        "r",
        "--iterations",
        "1",
        "--episodes",
        "300",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let first_record = std::fs::read(run.join("iter_0/record.json")).unwrap();

    // a fresh run may not reuse an id
    let out = ippo(&[
        "iterate",
        "--config",
        cfg,
        "--run-id",
        "r",
        "--iterations",
        "1",
        "--episodes",
        "300",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = ippo(&[
        "iterate",
        "--config",
        cfg,
        "--resume",
        "r",
        "--iterations",
        "2",
        "--episodes",
        "300",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run.join("iter_1/record.json").exists());
    assert_eq!(
        std::fs::read(run.join("iter_0/record.json")).unwrap(),
        first_record
    );
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
}
