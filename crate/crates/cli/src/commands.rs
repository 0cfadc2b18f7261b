//! The pipeline commands behind the `cotcap` binary.
//!
//! Every command is a pure function of (configuration, recorded artifacts):
//! it derives all randomness from named streams of the configured seed, works
//! entirely inside the run directory, and records what it writes in the run
//! manifest. Consumers verify their inputs by content hash, so stale or
//! foreign artifacts fail fast with a dependency error instead of quietly
//! contaminating results.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cotcap_core::config::ExperimentConfig;
use cotcap_core::meta::{
    ablate, baseline_train, evaluate_params, init_meta_state, meta_test, meta_train, read_state,
    scored_pairs, write_state, AblationRow, ExperimentContext, GeneratedCaption, TrainLogRow,
};
use cotcap_core::metrics::{metric_report, CaptionEncoder, MetricReport, ScoredPair};
use cotcap_core::models::lm::{lm_pretrain, read_lm, write_lm, PretrainReport, TinyLM};
use cotcap_core::models::vision::{read_vision, write_vision, VisionEncoder};
use cotcap_core::models::{Tokenizer, BOS, EOS, SEP};
use cotcap_core::rng::{self, streams, SeededRng};
use cotcap_core::world::{
    build_grammar, make_dataset, read_dataset, read_grammar, realize_captions_with_rate,
    reshuffle_domain, sample_scene, split_categories, write_dataset, write_grammar,
    CaptionedSample, Grammar,
};

use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

/// Logical artifact names, as recorded in the run manifest.
mod artifact {
    pub const GRAMMAR: &str = "grammar";
    pub const TRAIN: &str = "train";
    pub const TEST: &str = "test";
    pub const VISION: &str = "vision";
    pub const LM: &str = "lm";
    pub const LM_REPORT: &str = "lm_report";
    pub const META_STATE: &str = "meta_state";
    pub const TRAIN_LOG: &str = "train_log";
    pub const CROSS_GRAMMAR: &str = "cross_grammar";
    pub const CROSS_TEST: &str = "cross_test";
    pub const BASELINE_PARAMS: &str = "baseline_params";
    pub const BASELINE_LOG: &str = "baseline_log";
    pub const ABLATION: &str = "ablation";
    pub const ABLATION_CSV: &str = "ablation_csv";
}

/// Named random streams the pipeline derives from the root seed, beyond the
/// core stage names (world/init/episode/decode).
mod cli_streams {
    /// Vision-encoder table initialization.
    pub const VISION: &str = "vision";
    /// LM weight initialization.
    pub const LM_INIT: &str = "lm-init";
    /// Drawing the pretraining corpus.
    pub const PRETRAIN_CORPUS: &str = "pretrain-corpus";
    /// Pretraining batch order and holdout choice.
    pub const PRETRAIN: &str = "pretrain";
    /// Caption-embedding function words (retrieval metric).
    pub const CAPTION_ENCODER: &str = "caption-encoder";
    /// Cross-domain reshuffle and dataset generation.
    pub const CROSS_DOMAIN: &str = "cross-domain";
    /// Baseline batch order.
    pub const BASELINE: &str = "baseline";
}

/// One line of a captions file, and equally one line of `score` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    /// Line index of the image in the evaluation dataset.
    pub image_id: usize,
    /// Candidate caption tokens.
    pub candidate: Vec<String>,
    /// Reference caption token lists (1–5).
    pub references: Vec<Vec<String>>,
}

/// A metric report stamped with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub config_hash: String,
    /// The command that produced it.
    pub command: String,
    pub report: MetricReport,
}

/// The pretraining report stamped with its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmReportDoc {
    pub config_hash: String,
    pub report: PretrainReport,
}

/// The ablation grid stamped with its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDoc {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

// ---------------------------------------------------------------------------
// gen-world
// ---------------------------------------------------------------------------

/// Generates the synthetic caption world: grammar, category split, frozen
/// vision encoder, and the encoded train/test datasets.
///
/// Deterministic per configuration — rerunning rewrites byte-identical
/// artifacts. Starts a fresh manifest: this is the pipeline root, and a new
/// world invalidates everything built on the old one.
pub fn cmd_gen_world(config: &ExperimentConfig, hash: &str, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new(hash);

    let mut world_rng = rng::stream(config.seed, streams::WORLD);
    let grammar = build_grammar(&config.world, &mut world_rng)?;
    let split = split_categories(
        config.world.categories,
        config.world.test_categories,
        &mut world_rng,
    )?;
    let mut vision_rng = rng::stream(config.seed, cli_streams::VISION);
    let vision = VisionEncoder::new(
        &grammar,
        config.model.word_embed_dim,
        config.model.d_v,
        config.model.noise_scale,
        &mut vision_rng,
    )?;
    let (train, test) = make_dataset(&grammar, &split, &config.world, &mut world_rng, |scene| {
        vision.encode_image(scene)
    })?;

    write_grammar(&out.join("grammar.json"), &grammar, &split)?;
    write_vision(&out.join("vision.json"), &vision)?;
    write_dataset(&out.join("train.jsonl"), &train)?;
    write_dataset(&out.join("test.jsonl"), &test)?;
    manifest.record(out, artifact::GRAMMAR, "grammar.json")?;
    manifest.record(out, artifact::VISION, "vision.json")?;
    manifest.record(out, artifact::TRAIN, "train.jsonl")?;
    manifest.record(out, artifact::TEST, "test.jsonl")?;
    manifest.save(out)?;

    println!(
        "gen-world: {} categories ({} train / {} held out), {} train and {} test samples",
        grammar.categories,
        split.meta_train_categories.len(),
        split.meta_test_categories.len(),
        train.len(),
        test.len()
    );
    println!("gen-world: artifacts in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain-lm
// ---------------------------------------------------------------------------

/// Builds the language-model pretraining corpus: `per_category` scenes for
/// every category (the full world — pretraining is generic language modeling,
/// not category-specific), each realized once as the chain-shaped sequence
/// `BOS subject SEP object SEP caption… EOS`.
fn pretrain_corpus(
    grammar: &Grammar,
    tokenizer: &Tokenizer,
    config: &ExperimentConfig,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<usize>>> {
    let mut corpus = Vec::new();
    for category in 0..grammar.categories {
        for _ in 0..config.world.per_category {
            let scene = sample_scene(grammar, category, rng)?;
            let caption =
                realize_captions_with_rate(grammar, &scene, rng, 1, config.world.substitution_rate)?
                    .pop()
                    .expect("one caption requested");
            let mut seq = vec![BOS, tokenizer.encode_word(&scene.subject)?, SEP];
            seq.push(tokenizer.encode_word(&scene.object)?);
            seq.push(SEP);
            seq.extend(tokenizer.encode(&caption)?);
            seq.push(EOS);
            corpus.push(seq);
        }
    }
    Ok(corpus)
}

/// Pretrains the frozen language model on the world's caption language and
/// writes the weights plus a held-out-perplexity report.
pub fn cmd_pretrain_lm(config: &ExperimentConfig, hash: &str, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::load_or_new(out, hash)?;
    let grammar_path = manifest.require(out, artifact::GRAMMAR, "gen-world")?;
    let (grammar, _split) = read_grammar(&grammar_path)?;
    let tokenizer = Tokenizer::from_grammar(&grammar)?;

    let mut init_rng = rng::stream(config.seed, cli_streams::LM_INIT);
    let lm = TinyLM::init(config.lm_config_for_vocab(tokenizer.vocab_size()), &mut init_rng)?;
    let mut corpus_rng = rng::stream(config.seed, cli_streams::PRETRAIN_CORPUS);
    let corpus = pretrain_corpus(&grammar, &tokenizer, config, &mut corpus_rng)?;
    println!(
        "pretrain-lm: vocabulary {}, {} sequences, {} epochs",
        tokenizer.vocab_size(),
        corpus.len(),
        config.pretrain.epochs
    );

    let mut train_rng = rng::stream(config.seed, cli_streams::PRETRAIN);
    let (lm, report) = lm_pretrain(lm, &corpus, &config.pretrain, &mut train_rng)?;

    write_lm(&out.join("lm.json"), &lm)?;
    write_json(
        &out.join("lm_report.json"),
        &LmReportDoc {
            config_hash: hash.to_string(),
            report: report.clone(),
        },
    )?;
    manifest.record(out, artifact::LM, "lm.json")?;
    manifest.record(out, artifact::LM_REPORT, "lm_report.json")?;
    manifest.save(out)?;

    println!(
        "pretrain-lm: final train loss {:.4}, holdout {:.4} (unigram floor {:.4})",
        report.final_train_loss, report.holdout_loss, report.unigram_holdout_loss
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// meta-train
// ---------------------------------------------------------------------------

/// Meta-trains the chained adaptors on meta-training categories and writes
/// the final state, the training log, and any periodic checkpoints.
pub fn cmd_meta_train(config: &ExperimentConfig, hash: &str, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::load_or_new(out, hash)?;
    let grammar_path = manifest.require(out, artifact::GRAMMAR, "gen-world")?;
    let train_path = manifest.require(out, artifact::TRAIN, "gen-world")?;
    let lm_path = manifest.require(out, artifact::LM, "pretrain-lm")?;
    let (grammar, _split) = read_grammar(&grammar_path)?;
    let train = read_dataset(&train_path)?;
    let lm = read_lm(&lm_path)?;
    let tokenizer = Tokenizer::from_grammar(&grammar)?;

    let mut init_rng = rng::stream(config.seed, streams::INIT);
    let state = init_meta_state(config, &mut init_rng)?;
    println!(
        "meta-train: {} iterations × {} episodes ({}-way {}-shot), {} workers",
        config.iterations, config.episode_batch, config.n_way, config.k_shot, config.workers
    );

    if config.checkpoint_every > 0 {
        fs::create_dir_all(out.join("checkpoints"))?;
    }
    let mut checkpoint_files: Vec<String> = Vec::new();
    let mut episode_rng = rng::stream(config.seed, streams::EPISODE);
    let (state, log) = meta_train(
        state,
        &lm,
        &tokenizer,
        &train,
        config.iterations,
        &mut episode_rng,
        |snapshot| {
            let relative = format!("checkpoints/state_{:05}.json", snapshot.iteration);
            write_state(&out.join(&relative), snapshot)?;
            checkpoint_files.push(relative);
            Ok(())
        },
    )?;

    write_state(&out.join("meta_state.json"), &state)?;
    fs::write(out.join("train_log.csv"), train_log_csv(&log))?;
    manifest.record(out, artifact::META_STATE, "meta_state.json")?;
    manifest.record(out, artifact::TRAIN_LOG, "train_log.csv")?;
    for relative in &checkpoint_files {
        let name = relative
            .trim_start_matches("checkpoints/state_")
            .trim_end_matches(".json");
        manifest.record(out, &format!("checkpoint_{name}"), relative)?;
    }
    manifest.save(out)?;

    for row in log
        .iter()
        .filter(|r| r.iteration % config.log_every == 0 || r.iteration == config.iterations)
    {
        println!(
            "meta-train: iter {:>5}  support {:.4}  query {:.4}  [{} ms]",
            row.iteration, row.mean_support_loss, row.mean_query_loss, row.wallclock_ms
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// meta-test
// ---------------------------------------------------------------------------

/// Episodic evaluation on held-out categories.
///
/// With `cross_domain`, first rebuilds the verb-compatibility table and the
/// template pool under the same vocabulary, regenerates the held-out dataset
/// in that reshuffled domain, and evaluates there instead.
pub fn cmd_meta_test(
    config: &ExperimentConfig,
    hash: &str,
    out: &Path,
    cross_domain: bool,
) -> Result<()> {
    let mut manifest = RunManifest::load_or_new(out, hash)?;
    let grammar_path = manifest.require(out, artifact::GRAMMAR, "gen-world")?;
    let vision_path = manifest.require(out, artifact::VISION, "gen-world")?;
    let lm_path = manifest.require(out, artifact::LM, "pretrain-lm")?;
    let state_path = manifest.require(out, artifact::META_STATE, "meta-train")?;
    let (base_grammar, split) = read_grammar(&grammar_path)?;
    let vision = read_vision(&vision_path)?;
    let lm = read_lm(&lm_path)?;
    let state = read_state(&state_path)?;
    let tokenizer = Tokenizer::from_grammar(&base_grammar)?;

    let (grammar, test, command) = if cross_domain {
        let mut cross_rng = rng::stream(config.seed, cli_streams::CROSS_DOMAIN);
        let cross = reshuffle_domain(&base_grammar, config.world.templates, &mut cross_rng)?;
        let (_train, test) =
            make_dataset(&cross, &split, &config.world, &mut cross_rng, |scene| {
                vision.encode_image(scene)
            })?;
        write_grammar(&out.join("cross_grammar.json"), &cross, &split)?;
        write_dataset(&out.join("cross_test.jsonl"), &test)?;
        manifest.record(out, artifact::CROSS_GRAMMAR, "cross_grammar.json")?;
        manifest.record(out, artifact::CROSS_TEST, "cross_test.jsonl")?;
        (cross, test, "meta-test --cross-domain")
    } else {
        let test_path = manifest.require(out, artifact::TEST, "gen-world")?;
        (base_grammar.clone(), read_dataset(&test_path)?, "meta-test")
    };

    let mut decode_rng = rng::stream(config.seed, streams::DECODE);
    let generated = meta_test(
        &state,
        &lm,
        &tokenizer,
        &test,
        &split,
        config.test_episodes,
        config.inner_lr,
        config.inner_steps,
        &mut decode_rng,
    )?;

    let mut encoder_rng = rng::stream(config.seed, cli_streams::CAPTION_ENCODER);
    let encoder = CaptionEncoder::new(&vision, &grammar, &mut encoder_rng)?;
    let report = metric_report(&scored_pairs(&generated), &encoder, &grammar)?;

    let suffix = if cross_domain { "cross" } else { "meta_test" };
    write_captions(&out.join(format!("captions_{suffix}.jsonl")), &generated)?;
    write_report_pair(out, &mut manifest, &format!("report_{suffix}"), hash, command, &report)?;
    manifest.record(
        out,
        &format!("captions_{suffix}"),
        &format!("captions_{suffix}.jsonl"),
    )?;
    manifest.save(out)?;

    print_report(command, generated.len(), &report);
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

/// Trains the non-episodic baseline (same architecture, plain mini-batches,
/// no adaptation) and scores it on exactly the episodes meta-test decodes.
pub fn cmd_baseline(config: &ExperimentConfig, hash: &str, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::load_or_new(out, hash)?;
    let grammar_path = manifest.require(out, artifact::GRAMMAR, "gen-world")?;
    let train_path = manifest.require(out, artifact::TRAIN, "gen-world")?;
    let test_path = manifest.require(out, artifact::TEST, "gen-world")?;
    let vision_path = manifest.require(out, artifact::VISION, "gen-world")?;
    let lm_path = manifest.require(out, artifact::LM, "pretrain-lm")?;
    let (grammar, split) = read_grammar(&grammar_path)?;
    let train = read_dataset(&train_path)?;
    let test = read_dataset(&test_path)?;
    let vision = read_vision(&vision_path)?;
    let lm = read_lm(&lm_path)?;
    let tokenizer = Tokenizer::from_grammar(&grammar)?;

    println!(
        "baseline: {} iterations × batch {}",
        config.iterations, config.baseline_batch
    );
    let mut train_rng = rng::stream(config.seed, cli_streams::BASELINE);
    let (params, log) = baseline_train(
        config,
        &lm,
        &tokenizer,
        &train,
        config.iterations,
        &mut train_rng,
    )?;

    // Same decode stream as meta-test: both score the same query sets.
    let mut decode_rng = rng::stream(config.seed, streams::DECODE);
    let generated = evaluate_params(
        &params,
        config,
        &lm,
        &tokenizer,
        &test,
        &split,
        config.test_episodes,
        &mut decode_rng,
    )?;

    let mut encoder_rng = rng::stream(config.seed, cli_streams::CAPTION_ENCODER);
    let encoder = CaptionEncoder::new(&vision, &grammar, &mut encoder_rng)?;
    let report = metric_report(&scored_pairs(&generated), &encoder, &grammar)?;

    write_json(&out.join("baseline_params.json"), &params)?;
    fs::write(out.join("baseline_log.csv"), train_log_csv(&log))?;
    write_captions(&out.join("captions_baseline.jsonl"), &generated)?;
    write_report_pair(out, &mut manifest, "report_baseline", hash, "baseline", &report)?;
    manifest.record(out, artifact::BASELINE_PARAMS, "baseline_params.json")?;
    manifest.record(out, artifact::BASELINE_LOG, "baseline_log.csv")?;
    manifest.record(out, "captions_baseline", "captions_baseline.jsonl")?;
    manifest.save(out)?;

    print_report("baseline", generated.len(), &report);
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// Meta-trains and scores the five toggle combinations, from everything off
/// to the full method.
pub fn cmd_ablate(config: &ExperimentConfig, hash: &str, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::load_or_new(out, hash)?;
    let grammar_path = manifest.require(out, artifact::GRAMMAR, "gen-world")?;
    let train_path = manifest.require(out, artifact::TRAIN, "gen-world")?;
    let test_path = manifest.require(out, artifact::TEST, "gen-world")?;
    let vision_path = manifest.require(out, artifact::VISION, "gen-world")?;
    let lm_path = manifest.require(out, artifact::LM, "pretrain-lm")?;
    let (grammar, split) = read_grammar(&grammar_path)?;
    let train = read_dataset(&train_path)?;
    let test = read_dataset(&test_path)?;
    let vision = read_vision(&vision_path)?;
    let lm = read_lm(&lm_path)?;
    let tokenizer = Tokenizer::from_grammar(&grammar)?;
    let mut encoder_rng = rng::stream(config.seed, cli_streams::CAPTION_ENCODER);
    let encoder = CaptionEncoder::new(&vision, &grammar, &mut encoder_rng)?;

    println!("ablate: 5 toggle combinations × {} iterations each", config.iterations);
    let ctx = ExperimentContext {
        lm: &lm,
        tokenizer: &tokenizer,
        grammar: &grammar,
        encoder: &encoder,
        train: &train,
        test: &test,
        split: &split,
    };
    let rows = ablate(config, &ctx)?;

    write_json(
        &out.join("ablation.json"),
        &AblationDoc {
            config_hash: hash.to_string(),
            rows: rows.clone(),
        },
    )?;
    fs::write(out.join("ablation.csv"), ablation_csv(hash, &rows))?;
    manifest.record(out, artifact::ABLATION, "ablation.json")?;
    manifest.record(out, artifact::ABLATION_CSV, "ablation.csv")?;
    manifest.save(out)?;

    for row in &rows {
        println!(
            "ablate: subspace={} sub={} obj={}  BLEU-1 {:.3}  ROUGE-L {:.3}  CIDEr {:.3}",
            row.subspace,
            row.sub_prompt,
            row.obj_prompt,
            row.report.bleu[0],
            row.report.rouge_l,
            row.report.cider
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

/// Scores an external captions file against the held-out dataset.
///
/// Input is JSONL, one `{image_id, candidate, references}` object per line;
/// `image_id` indexes the held-out dataset (the format the pipeline's own
/// captions files use, so any of them can be re-scored directly).
pub fn cmd_score(config: &ExperimentConfig, hash: &str, out: &Path, input: &Path) -> Result<()> {
    let mut manifest = RunManifest::load_or_new(out, hash)?;
    let grammar_path = manifest.require(out, artifact::GRAMMAR, "gen-world")?;
    let test_path = manifest.require(out, artifact::TEST, "gen-world")?;
    let vision_path = manifest.require(out, artifact::VISION, "gen-world")?;
    let (grammar, _split) = read_grammar(&grammar_path)?;
    let test = read_dataset(&test_path)?;
    let vision = read_vision(&vision_path)?;

    let pairs = read_score_input(input, &test)?;
    let mut encoder_rng = rng::stream(config.seed, cli_streams::CAPTION_ENCODER);
    let encoder = CaptionEncoder::new(&vision, &grammar, &mut encoder_rng)?;
    let report = metric_report(&pairs, &encoder, &grammar)?;

    write_report_pair(out, &mut manifest, "report_score", hash, "score", &report)?;
    manifest.save(out)?;

    print_report("score", pairs.len(), &report);
    Ok(())
}

/// Parses score input and joins each line's image id to the dataset sample
/// that provides its image feature and scene. Malformed lines, out-of-range
/// ids, and bad reference counts are configuration errors.
fn read_score_input(input: &Path, dataset: &[CaptionedSample]) -> Result<Vec<ScoredPair>> {
    let text = fs::read_to_string(input).map_err(|e| {
        CliError::Config(format!("cannot read score input {}: {e}", input.display()))
    })?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CaptionLine = serde_json::from_str(line).map_err(|e| {
            CliError::Config(format!(
                "score input {} line {}: {e}",
                input.display(),
                lineno + 1
            ))
        })?;
        if parsed.references.is_empty() || parsed.references.len() > 5 {
            return Err(CliError::Config(format!(
                "score input line {}: needs 1–5 references, got {}",
                lineno + 1,
                parsed.references.len()
            )));
        }
        let sample = dataset.get(parsed.image_id).ok_or_else(|| {
            CliError::Config(format!(
                "score input line {}: image_id {} outside the {}-sample held-out dataset",
                lineno + 1,
                parsed.image_id,
                dataset.len()
            ))
        })?;
        pairs.push(ScoredPair {
            candidate: parsed.candidate,
            references: parsed.references,
            image_feature: sample.feature.clone(),
            scene: sample.scene.clone(),
        });
    }
    if pairs.is_empty() {
        return Err(CliError::Config(format!(
            "score input {} holds no caption lines",
            input.display()
        )));
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_captions(path: &Path, generated: &[GeneratedCaption]) -> Result<()> {
    let mut text = String::new();
    for g in generated {
        let line = CaptionLine {
            image_id: g.image_id,
            candidate: g.pair.candidate.clone(),
            references: g.pair.references.clone(),
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn train_log_csv(rows: &[TrainLogRow]) -> String {
    let mut text = String::from("iteration,mean_support_loss,mean_query_loss,wallclock_ms\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            r.iteration, r.mean_support_loss, r.mean_query_loss, r.wallclock_ms
        );
    }
    text
}

const METRIC_COLUMNS: &str = "bleu1,bleu2,bleu3,bleu4,rouge_l,cider,mrr,\
                              recall_at_1,recall_at_5,recall_at_10,pool_warning,\
                              exact_noun,exact_verb,fuzzy_noun,fuzzy_verb";

fn metric_csv_cells(r: &MetricReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.bleu[0],
        r.bleu[1],
        r.bleu[2],
        r.bleu[3],
        r.rouge_l,
        r.cider,
        r.mrr,
        r.recall_at_1,
        r.recall_at_5,
        r.recall_at_10,
        r.pool_warning,
        r.exact_noun,
        r.exact_verb,
        r.fuzzy_noun,
        r.fuzzy_verb
    )
}

/// Writes a report as provenance-stamped JSON plus a one-row CSV, recording
/// both in the manifest under `name` and `name_csv`.
fn write_report_pair(
    out: &Path,
    manifest: &mut RunManifest,
    name: &str,
    hash: &str,
    command: &str,
    report: &MetricReport,
) -> Result<()> {
    let doc = ReportDoc {
        config_hash: hash.to_string(),
        command: command.to_string(),
        report: report.clone(),
    };
    write_json(&out.join(format!("{name}.json")), &doc)?;
    let csv = format!(
        "config_hash,command,{METRIC_COLUMNS}\n{hash},{command},{}\n",
        metric_csv_cells(report)
    );
    fs::write(out.join(format!("{name}.csv")), csv)?;
    manifest.record(out, name, &format!("{name}.json"))?;
    manifest.record(out, &format!("{name}_csv"), &format!("{name}.csv"))?;
    Ok(())
}

fn ablation_csv(hash: &str, rows: &[AblationRow]) -> String {
    let mut text = format!("config_hash,subspace,sub_prompt,obj_prompt,{METRIC_COLUMNS}\n");
    for row in rows {
        let _ = writeln!(
            text,
            "{hash},{},{},{},{}",
            row.subspace,
            row.sub_prompt,
            row.obj_prompt,
            metric_csv_cells(&row.report)
        );
    }
    text
}

fn print_report(label: &str, captions: usize, r: &MetricReport) {
    println!(
        "{label}: {captions} captions  BLEU-1 {:.3}  BLEU-4 {:.3}  ROUGE-L {:.3}  CIDEr {:.3}  \
         MRR {:.3}  noun {:.1}/{:.1}  verb {:.1}/{:.1}",
        r.bleu[0],
        r.bleu[3],
        r.rouge_l,
        r.cider,
        r.mrr,
        r.exact_noun,
        r.fuzzy_noun,
        r.exact_verb,
        r.fuzzy_verb
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_line_round_trips() {
        let line = CaptionLine {
            image_id: 3,
            candidate: vec!["a".into(), "cat".into()],
            references: vec![vec!["a".into(), "cat".into()]],
        };
        let text = serde_json::to_string(&line).unwrap();
        let back: CaptionLine = serde_json::from_str(&text).unwrap();
        assert_eq!(line, back);
    }

    #[test]
    fn train_log_csv_has_header_and_rows() {
        let rows = vec![TrainLogRow {
            iteration: 1,
            mean_support_loss: 2.5,
            mean_query_loss: 3.25,
            wallclock_ms: 7,
        }];
        let csv = train_log_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,mean_support_loss,mean_query_loss,wallclock_ms"
        );
        assert_eq!(lines.next().unwrap(), "1,2.5,3.25,7");
        assert!(lines.next().is_none());
    }
}
