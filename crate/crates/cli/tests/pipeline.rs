//! In-process integration tests for the pipeline commands: artifact plumbing,
//! manifest verification, idempotence, and cross-command consistency.

use std::fs;
use std::path::{Path, PathBuf};

use cotcap::commands::{
    cmd_ablate, cmd_baseline, cmd_gen_world, cmd_meta_test, cmd_meta_train, cmd_pretrain_lm,
    cmd_score, AblationDoc, CaptionLine, ReportDoc,
};
use cotcap::config_io::{config_hash, load_config};
use cotcap::error::CliError;
use cotcap_core::config::ExperimentConfig;

/// A configuration small enough that the whole pipeline runs in seconds.
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
    cfg.iterations = 5;
    cfg.max_caption_len = 10;
    cfg.test_episodes = 3;
    cfg.baseline_batch = 8;
    cfg.log_every = 2;
    cfg.checkpoint_every = 2;
    cfg.validate().unwrap();
    cfg
}

fn hash_of(cfg: &ExperimentConfig) -> String {
    config_hash(cfg).unwrap()
}

/// Runs gen-world + pretrain-lm + meta-train into `out`.
fn run_through_meta_train(cfg: &ExperimentConfig, out: &Path) {
    let hash = hash_of(cfg);
    cmd_gen_world(cfg, &hash, out).unwrap();
    cmd_pretrain_lm(cfg, &hash, out).unwrap();
    cmd_meta_train(cfg, &hash, out).unwrap();
}

fn read_bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn gen_world_reruns_are_byte_identical() {
    let cfg = tiny_config(11);
    let hash = hash_of(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    cmd_gen_world(&cfg, &hash, out).unwrap();
    let first: Vec<(PathBuf, Vec<u8>)> = ["grammar.json", "vision.json", "train.jsonl", "test.jsonl"]
        .iter()
        .map(|name| {
            let p = out.join(name);
            let bytes = read_bytes(&p);
            (p, bytes)
        })
        .collect();
    cmd_gen_world(&cfg, &hash, out).unwrap();
    for (path, before) in first {
        assert_eq!(read_bytes(&path), before, "{} changed on rerun", path.display());
    }
}

#[test]
fn gen_world_creates_missing_directories() {
    let cfg = tiny_config(12);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("deeply/nested/run");
    cmd_gen_world(&cfg, &hash_of(&cfg), &out).unwrap();
    assert!(out.join("grammar.json").exists());
}

#[test]
fn downstream_commands_refuse_missing_artifacts() {
    let cfg = tiny_config(13);
    let hash = hash_of(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    // Nothing generated yet: every consumer must fail with a dependency error
    // that names the producer to run.
    let err = cmd_pretrain_lm(&cfg, &hash, out).unwrap_err();
    assert!(matches!(err, CliError::Dependency(_)), "{err}");
    assert!(err.to_string().contains("gen-world"));

    cmd_gen_world(&cfg, &hash, out).unwrap();
    let err = cmd_meta_train(&cfg, &hash, out).unwrap_err();
    assert!(matches!(err, CliError::Dependency(_)), "{err}");
    assert!(err.to_string().contains("pretrain-lm"));

    cmd_pretrain_lm(&cfg, &hash, out).unwrap();
    let err = cmd_meta_test(&cfg, &hash, out, false).unwrap_err();
    assert!(matches!(err, CliError::Dependency(_)), "{err}");
    assert!(err.to_string().contains("meta-train"));
}

#[test]
fn tampered_artifacts_are_stale() {
    let cfg = tiny_config(14);
    let hash = hash_of(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    cmd_gen_world(&cfg, &hash, out).unwrap();
    cmd_pretrain_lm(&cfg, &hash, out).unwrap();
    let mut bytes = read_bytes(&out.join("train.jsonl"));
    bytes.push(b'\n');
    fs::write(out.join("train.jsonl"), bytes).unwrap();
    let err = cmd_meta_train(&cfg, &hash, out).unwrap_err();
    assert!(matches!(err, CliError::Dependency(_)), "{err}");
    assert!(err.to_string().contains("stale"), "{err}");
}

#[test]
fn changed_config_invalidates_the_run_directory() {
    let cfg = tiny_config(15);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    cmd_gen_world(&cfg, &hash_of(&cfg), out).unwrap();
    let mut other = cfg.clone();
    other.inner_lr = 0.05;
    let err = cmd_pretrain_lm(&other, &hash_of(&other), out).unwrap_err();
    assert!(matches!(err, CliError::Dependency(_)), "{err}");
}

#[test]
fn score_reproduces_the_meta_test_report() {
    let cfg = tiny_config(16);
    let hash = hash_of(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_through_meta_train(&cfg, out);
    cmd_meta_test(&cfg, &hash, out, false).unwrap();
    let captions = out.join("captions_meta_test.jsonl");
    cmd_score(&cfg, &hash, out, &captions).unwrap();

    let meta: ReportDoc =
        serde_json::from_str(&fs::read_to_string(out.join("report_meta_test.json")).unwrap())
            .unwrap();
    let scored: ReportDoc =
        serde_json::from_str(&fs::read_to_string(out.join("report_score.json")).unwrap()).unwrap();
    assert_eq!(meta.report, scored.report);
    assert_eq!(meta.config_hash, hash);
    assert_eq!(scored.config_hash, hash);
    assert_eq!(meta.command, "meta-test");
    assert_eq!(scored.command, "score");
}

#[test]
fn score_rejects_bad_input_as_config_errors() {
    let cfg = tiny_config(17);
    let hash = hash_of(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    cmd_gen_world(&cfg, &hash, out).unwrap();

    let bad_json = out.join("bad.jsonl");
    fs::write(&bad_json, "{not json}\n").unwrap();
    let err = cmd_score(&cfg, &hash, out, &bad_json).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert!(err.to_string().contains("line 1"), "{err}");

    let bad_id = out.join("bad_id.jsonl");
    let line = CaptionLine {
        image_id: 10_000,
        candidate: vec!["a".into()],
        references: vec![vec!["a".into()]],
    };
    fs::write(&bad_id, format!("{}\n", serde_json::to_string(&line).unwrap())).unwrap();
    let err = cmd_score(&cfg, &hash, out, &bad_id).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert!(err.to_string().contains("image_id"), "{err}");

    let empty = out.join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let err = cmd_score(&cfg, &hash, out, &empty).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
}

#[test]
fn full_pipeline_is_deterministic_and_manifest_complete() {
    let cfg = tiny_config(18);
    let hash = hash_of(&cfg);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();

    for out in [dir_a.path(), dir_b.path()] {
        run_through_meta_train(&cfg, out);
        cmd_meta_test(&cfg, &hash, out, false).unwrap();
        cmd_meta_test(&cfg, &hash, out, true).unwrap();
        cmd_baseline(&cfg, &hash, out).unwrap();
        cmd_ablate(&cfg, &hash, out).unwrap();
        let captions = out.join("captions_meta_test.jsonl");
        cmd_score(&cfg, &hash, out, &captions).unwrap();
    }

    // Wallclock columns vary between runs, so training logs are compared
    // field-by-field elsewhere; every other artifact must match exactly.
    // The manifest itself carries write timestamps and is also excluded.
    let mut names: Vec<String> = fs::read_dir(dir_a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| {
            n != "manifest.json"
                && n != "checkpoints"
                && n != "train_log.csv"
                && n != "baseline_log.csv"
        })
        .collect();
    names.sort();
    assert!(names.len() >= 15, "unexpectedly few artifacts: {names:?}");
    for name in &names {
        let a = read_bytes(&dir_a.path().join(name));
        let b = read_bytes(&dir_b.path().join(name));
        assert_eq!(a, b, "{name} differs between identically seeded runs");
    }
    // Checkpoints (iteration snapshots) must match too.
    for entry in fs::read_dir(dir_a.path().join("checkpoints")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        let a = read_bytes(&dir_a.path().join("checkpoints").join(&name));
        let b = read_bytes(&dir_b.path().join("checkpoints").join(&name));
        assert_eq!(a, b, "checkpoint {name} differs");
    }
    // Training logs: identical except the wallclock column.
    for log in ["train_log.csv", "baseline_log.csv"] {
        let strip = |dir: &Path| -> Vec<String> {
            fs::read_to_string(dir.join(log))
                .unwrap()
                .lines()
                .map(|l| l.rsplitn(2, ',').nth(1).unwrap_or(l).to_string())
                .collect()
        };
        assert_eq!(strip(dir_a.path()), strip(dir_b.path()), "{log} differs");
    }

    // The manifest must account for every recorded artifact with a fresh,
    // matching content hash.
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir_a.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap(), hash);
    let artifacts = manifest["artifacts"].as_object().unwrap();
    for required in [
        "grammar",
        "train",
        "test",
        "vision",
        "lm",
        "lm_report",
        "meta_state",
        "train_log",
        "report_meta_test",
        "report_cross",
        "report_baseline",
        "report_score",
        "ablation",
        "baseline_params",
        "captions_meta_test",
        "captions_cross",
        "captions_baseline",
        "cross_grammar",
        "cross_test",
        "checkpoint_00002",
        "checkpoint_00004",
    ] {
        let record = artifacts
            .get(required)
            .unwrap_or_else(|| panic!("manifest lacks artifact '{required}'"));
        let path = dir_a.path().join(record["path"].as_str().unwrap());
        assert!(path.exists(), "{} missing", path.display());
        let digest = cotcap::manifest::hash_file(&path).unwrap();
        assert_eq!(digest, record["sha256"].as_str().unwrap(), "{required} hash stale");
    }
}

#[test]
fn ablation_emits_exactly_five_rows_in_grid_order() {
    let cfg = tiny_config(19);
    let hash = hash_of(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_through_meta_train(&cfg, out);
    cmd_ablate(&cfg, &hash, out).unwrap();
    let doc: AblationDoc =
        serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(doc.config_hash, hash);
    let toggles: Vec<(bool, bool, bool)> = doc
        .rows
        .iter()
        .map(|r| (r.subspace, r.sub_prompt, r.obj_prompt))
        .collect();
    assert_eq!(
        toggles,
        vec![
            (false, false, false),
            (true, false, false),
            (true, true, false),
            (true, false, true),
            (true, true, true),
        ]
    );
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6, "header plus five rows");
    for line in csv.lines().skip(1) {
        assert!(line.starts_with(&hash), "row lacks config hash: {line}");
    }
}

#[test]
fn cross_domain_shares_vocabulary_but_shifts_distribution() {
    let cfg = tiny_config(20);
    let hash = hash_of(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_through_meta_train(&cfg, out);
    cmd_meta_test(&cfg, &hash, out, true).unwrap();

    let base: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("grammar.json")).unwrap()).unwrap();
    let cross: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("cross_grammar.json")).unwrap())
            .unwrap();
    assert_eq!(
        base["grammar"]["subjects"], cross["grammar"]["subjects"],
        "vocabulary must be shared"
    );
    assert_eq!(base["grammar"]["objects"], cross["grammar"]["objects"]);
    assert_eq!(base["grammar"]["verbs"], cross["grammar"]["verbs"]);
    assert_eq!(base["split"], cross["split"], "category split must be shared");
    assert_ne!(
        base["grammar"]["compatibility"], cross["grammar"]["compatibility"],
        "compatibility map should reshuffle"
    );
}

#[test]
fn workers_do_not_change_results() {
    let cfg = tiny_config(21);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_through_meta_train(&cfg, dir_a.path());
    let mut cfg_threads = cfg.clone();
    cfg_threads.workers = 3;
    run_through_meta_train(&cfg_threads, dir_b.path());
    // The worker count participates in the config hash (it is part of the
    // effective config) but must not change the trained state bytes.
    let a = read_bytes(&dir_a.path().join("meta_state.json"));
    let b = read_bytes(&dir_b.path().join("meta_state.json"));
    // meta_state.json embeds the config (including `workers`), so compare the
    // parsed factor content instead of raw bytes.
    let a: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(a["steps"], b["steps"], "parallel reduction changed the result");
    assert_eq!(a["optimizer"], b["optimizer"]);
}
