//! Exit-code contract tests against the real binary: 0 success, 2 config
//! error, 3 dependency error, 4 numeric failure.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cotcap_core::config::ExperimentConfig;

fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.world.categories = 10;
    cfg.world.objects = 10;
    cfg.world.verbs = 8;
    cfg.world.templates = 3;
    cfg.world.test_categories = 3;
    cfg.world.per_category = 6;
    cfg.world.references = 3;
    cfg.model.d_v = 16;
    cfg.model.d_m = 16;
    cfg.model.lm_heads = 2;
    cfg.model.lm_blocks = 1;
    cfg.model.ffn_hidden = 32;
    cfg.model.t_max = 48;
    cfg.model.word_embed_dim = 8;
    cfg.pretrain.epochs = 2;
    cfg.prompt_lengths = [1, 1, 2];
    cfg.episode_batch = 4;
    cfg.iterations = 3;
    cfg.max_caption_len = 10;
    cfg.test_episodes = 2;
    cfg.baseline_batch = 8;
    cfg.log_every = 1;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn cotcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotcap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

#[test]
fn success_is_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(31));
    let out = dir.path().join("run");
    let result = cotcap(&[
        "gen-world",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&result), 0, "{result:?}");
    assert!(out.join("grammar.json").exists());
}

#[test]
fn malformed_config_is_exit_2_with_field_message() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = serde_json::to_value(tiny_config(32)).unwrap();
    doc["episode_batch"] = serde_json::Value::String("many".into());
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    let out = dir.path().join("run");
    let result = cotcap(&[
        "gen-world",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&result), 2, "{result:?}");
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("episode_batch"), "stderr: {stderr}");
}

#[test]
fn missing_dependency_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(33));
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    let result = cotcap(&[
        "meta-train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&result), 3, "{result:?}");
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("gen-world"), "stderr: {stderr}");
}

#[test]
fn numeric_blowup_is_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    // An absurd inner rate passes static validation (positive, finite) but
    // launches the adapted coefficients to overflow during meta-training.
    let mut cfg = tiny_config(34);
    cfg.inner_lr = 1e150;
    let cfg_path = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    for step in ["gen-world", "pretrain-lm"] {
        let result = cotcap(&[
            step,
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&result), 0, "{step}: {result:?}");
    }
    let result = cotcap(&[
        "meta-train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&result), 4, "{result:?}");
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("numeric"), "stderr: {stderr}");
}

#[test]
fn seed_override_changes_the_world() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(35));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, seed) in [(&out_a, "35"), (&out_b, "36")] {
        let result = cotcap(&[
            "gen-world",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&result), 0, "{result:?}");
    }
    let a = fs::read(out_a.join("grammar.json")).unwrap();
    let b = fs::read(out_b.join("grammar.json")).unwrap();
    assert_ne!(a, b, "different seeds must draw different worlds");
}
