//! Held-out evaluation, the non-episodic baseline, and toggle ablations.
//!
//! Meta-test adapts the coefficients to each episode's support set, then
//! decodes the chain on the query images — subject and object get a single
//! token each, the caption decodes up to its budget — and returns scoreable
//! (candidate, references) pairs. The baseline trains the identical
//! architecture on plain mini-batches and evaluates without adaptation; the
//! ablation grid re-trains under each toggle combination and scores each.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;

use crate::adaptor::{cot_generate, AdaptorStepParams, CotSteps};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::meta::engine::{
    apply_updates, inner_adapt, install_state, meta_train, samples_loss, TrainLogRow,
};
use crate::meta::episode::{sample_episode, Episode, EpisodeSample};
use crate::meta::state::{init_meta_state, MetaState, StepFactors};
use crate::metrics::{metric_report, CaptionEncoder, MetricReport, ScoredPair};
use crate::models::{TinyLM, Tokenizer};
use crate::rng::{self, streams, SeededRng};
use crate::world::{CaptionedSample, CategorySplit, Grammar};

/// Borrowed artifacts every evaluation stage needs.
pub struct ExperimentContext<'a> {
    pub lm: &'a TinyLM,
    pub tokenizer: &'a Tokenizer,
    pub grammar: &'a Grammar,
    pub encoder: &'a CaptionEncoder,
    pub train: &'a [CaptionedSample],
    pub test: &'a [CaptionedSample],
    pub split: &'a CategorySplit,
}

/// One decoded query sample: the dataset line it came from plus everything
/// the metric battery needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCaption {
    /// Line index in the evaluation dataset; the image id in caption files.
    pub image_id: usize,
    pub pair: ScoredPair,
}

/// Strips the image ids off for the metric battery.
pub fn scored_pairs(generated: &[GeneratedCaption]) -> Vec<ScoredPair> {
    generated.iter().map(|g| g.pair.clone()).collect()
}

/// Checks that a dataset holds only held-out categories.
fn guard_test_split(dataset: &[CaptionedSample], split: &CategorySplit) -> Result<()> {
    for sample in dataset {
        let cat = sample.category_id;
        if split.meta_train_categories.contains(&cat) {
            return Err(Error::Data(format!(
                "category {cat} appears in the evaluation set but belongs to meta-training"
            )));
        }
        if !split.meta_test_categories.contains(&cat) {
            return Err(Error::Data(format!(
                "category {cat} is not part of the recorded split"
            )));
        }
    }
    Ok(())
}

/// Shared episode loop: draws `episodes` episodes, obtains parameters for
/// each via `params_for`, and decodes the chain on every query sample.
///
/// Both adapted and fixed-parameter evaluation run through this loop, so two
/// calls with identically seeded generators score the same query sets.
fn generate_on_episodes(
    config: &ExperimentConfig,
    lm: &TinyLM,
    dataset: &[CaptionedSample],
    tokenizer: &Tokenizer,
    episodes: usize,
    rng: &mut SeededRng,
    mut params_for: impl FnMut(&Episode) -> Result<CotSteps<AdaptorStepParams>>,
) -> Result<Vec<GeneratedCaption>> {
    let opts = config.cot_options();
    let max_lens = [1, 1, config.max_caption_len];
    let mut generated = Vec::new();
    for _ in 0..episodes {
        let episode = sample_episode(
            dataset,
            config.n_way,
            config.k_shot,
            config.effective_query_size(),
            rng,
        )?;
        let params = params_for(&episode)?;
        for query in &episode.query {
            let output = cot_generate(lm, &params, &query.sample.feature, &max_lens, &opts)?;
            let candidate = tokenizer.decode_words(&output.caption)?;
            let pair = ScoredPair {
                candidate,
                references: query.sample.references.clone(),
                image_feature: query.sample.feature.clone(),
                scene: query.sample.scene.clone(),
            };
            pair.validate()?;
            generated.push(GeneratedCaption {
                image_id: query.dataset_index,
                pair,
            });
        }
    }
    Ok(generated)
}

/// Episodic evaluation on held-out categories.
///
/// Adapts to each episode's support set with `lr` and `steps` (taken from
/// the configuration by the pipeline; `lr == 0` or `steps == 0` skips
/// adaptation), decodes the query samples, and returns the scoreable pairs.
/// Functional — the state is never modified. A dataset that overlaps the
/// meta-training categories is a data error.
pub fn meta_test(
    state: &MetaState,
    lm: &TinyLM,
    tokenizer: &Tokenizer,
    dataset: &[CaptionedSample],
    split: &CategorySplit,
    episodes: usize,
    lr: f64,
    steps: usize,
    rng: &mut SeededRng,
) -> Result<Vec<GeneratedCaption>> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::Config(format!(
            "evaluation learning rate must be non-negative and finite, got {lr}"
        )));
    }
    guard_test_split(dataset, split)?;
    let adapt = lr > 0.0 && steps > 0;
    generate_on_episodes(
        &state.config,
        lm,
        dataset,
        tokenizer,
        episodes,
        rng,
        |episode| {
            let factors = if adapt {
                inner_adapt(state, lm, tokenizer, &episode.support, lr, steps)?
            } else {
                state.steps.clone()
            };
            factors.try_map(StepFactors::materialize)
        },
    )
}

/// Evaluates fixed parameters on the same episode stream meta-test uses,
/// ignoring every support set (no adaptation).
pub fn evaluate_params(
    params: &CotSteps<AdaptorStepParams>,
    config: &ExperimentConfig,
    lm: &TinyLM,
    tokenizer: &Tokenizer,
    dataset: &[CaptionedSample],
    split: &CategorySplit,
    episodes: usize,
    rng: &mut SeededRng,
) -> Result<Vec<GeneratedCaption>> {
    guard_test_split(dataset, split)?;
    generate_on_episodes(config, lm, dataset, tokenizer, episodes, rng, |_| {
        Ok(params.clone())
    })
}

/// Trains the identical chain architecture non-episodically: direct weights
/// (no subspace factoring), uniform mini-batches of captioned samples, and
/// the configured outer optimizer on the mean chain loss.
///
/// Both log-row loss columns carry the batch training loss — a plain run has
/// no support/query distinction.
pub fn baseline_train(
    config: &ExperimentConfig,
    lm: &TinyLM,
    tokenizer: &Tokenizer,
    dataset: &[CaptionedSample],
    iterations: usize,
    rng: &mut SeededRng,
) -> Result<(CotSteps<AdaptorStepParams>, Vec<TrainLogRow>)> {
    if dataset.is_empty() {
        return Err(Error::Data("baseline training set is empty".into()));
    }
    let start = Instant::now();
    let mut direct_cfg = config.clone();
    direct_cfg.toggles.subspace = false;
    let mut state = init_meta_state(&direct_cfg, rng)?;
    let opts = direct_cfg.cot_options();
    let mut log = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let batch: Vec<EpisodeSample> = (0..direct_cfg.baseline_batch)
            .map(|_| {
                let dataset_index = rng.random_range(0..dataset.len());
                let sample = dataset[dataset_index].clone();
                let reference_idx = rng.random_range(0..sample.references.len());
                EpisodeSample {
                    sample,
                    dataset_index,
                    reference_idx,
                }
            })
            .collect();
        let g = Graph::new();
        let lm_vars = lm.install_frozen(&g);
        let installed = install_state(&g, &state, true)?;
        let total = samples_loss(
            &g,
            lm,
            &lm_vars,
            tokenizer,
            &installed,
            &installed.adaptable,
            &batch,
            &opts,
        )?;
        let loss = g.scale(total, 1.0 / batch.len() as f64)?;
        let grads = g.backward(loss)?;
        let mut grad_map = BTreeMap::new();
        for (key, var) in &installed.meta_params {
            if let Some(t) = grads.tensor(&g, *var) {
                grad_map.insert(key.clone(), t);
            }
        }
        apply_updates(
            &mut state.steps,
            &mut state.optimizer,
            &grad_map,
            direct_cfg.outer_optimizer,
            direct_cfg.outer_lr,
            true,
        )?;
        state.iteration += 1;
        let batch_loss = g.value(loss).scalar_value()?;
        log.push(TrainLogRow {
            iteration: state.iteration,
            mean_support_loss: batch_loss,
            mean_query_loss: batch_loss,
            wallclock_ms: start.elapsed().as_millis(),
        });
    }
    let params = state.steps.try_map(StepFactors::materialize)?;
    Ok((params, log))
}

/// One ablation outcome.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub subspace: bool,
    pub sub_prompt: bool,
    pub obj_prompt: bool,
    pub report: MetricReport,
}

/// The toggle grid, from everything off to the full method: each row
/// meta-trains from scratch under its toggles (same seed, so shared stages
/// stay comparable) and scores held-out episodes.
pub fn ablate(config: &ExperimentConfig, ctx: &ExperimentContext) -> Result<Vec<AblationRow>> {
    let grid = [
        (false, false, false),
        (true, false, false),
        (true, true, false),
        (true, false, true),
        (true, true, true),
    ];
    let mut rows = Vec::with_capacity(grid.len());
    for (subspace, sub_prompt, obj_prompt) in grid {
        let mut row_cfg = config.clone();
        row_cfg.toggles.subspace = subspace;
        row_cfg.toggles.sub_prompt = sub_prompt;
        row_cfg.toggles.obj_prompt = obj_prompt;
        let mut init_rng = rng::stream(row_cfg.seed, streams::INIT);
        let state = init_meta_state(&row_cfg, &mut init_rng)?;
        let mut episode_rng = rng::stream(row_cfg.seed, streams::EPISODE);
        let (trained, _log) = meta_train(
            state,
            ctx.lm,
            ctx.tokenizer,
            ctx.train,
            row_cfg.iterations,
            &mut episode_rng,
            |_| Ok(()),
        )?;
        let mut test_rng = rng::stream(row_cfg.seed, streams::DECODE);
        let pairs = meta_test(
            &trained,
            ctx.lm,
            ctx.tokenizer,
            ctx.test,
            ctx.split,
            row_cfg.test_episodes,
            row_cfg.inner_lr,
            row_cfg.inner_steps,
            &mut test_rng,
        )?;
        let report = metric_report(&scored_pairs(&pairs), ctx.encoder, ctx.grammar)?;
        rows.push(AblationRow {
            subspace,
            sub_prompt,
            obj_prompt,
            report,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::testkit::tiny_fixture;
    use crate::models::EOS;

    #[test]
    fn meta_test_yields_validated_pairs_per_query() {
        let fx = tiny_fixture(80);
        let mut rng = rng::stream(80, "mt");
        let pairs = meta_test(
            &fx.state,
            &fx.lm,
            &fx.tokenizer,
            &fx.test,
            &fx.split,
            3,
            fx.cfg.inner_lr,
            1,
            &mut rng,
        )
        .unwrap();
        // 3 episodes × n_way 2 × query 2.
        assert_eq!(pairs.len(), 12);
        for g in &pairs {
            assert!(g.image_id < fx.test.len());
            assert_eq!(fx.test[g.image_id].references, g.pair.references);
            assert!(!g.pair.references.is_empty());
            assert!(g.pair.candidate.len() <= fx.cfg.max_caption_len);
            // Decoded words never include specials.
            for w in &g.pair.candidate {
                assert!(fx.tokenizer.encode_word(w).unwrap() > EOS);
            }
        }
    }

    #[test]
    fn meta_test_rejects_training_categories() {
        let fx = tiny_fixture(81);
        let mut rng = rng::stream(81, "guard");
        let err = meta_test(
            &fx.state,
            &fx.lm,
            &fx.tokenizer,
            &fx.train,
            &fx.split,
            1,
            fx.cfg.inner_lr,
            1,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn meta_test_is_functional_and_deterministic() {
        let fx = tiny_fixture(82);
        let before = serde_json::to_string(&fx.state).unwrap();
        let run = |seed_name: &str| {
            let mut rng = rng::stream(82, seed_name);
            meta_test(
                &fx.state,
                &fx.lm,
                &fx.tokenizer,
                &fx.test,
                &fx.split,
                2,
                fx.cfg.inner_lr,
                1,
                &mut rng,
            )
            .unwrap()
        };
        let a = run("same");
        let b = run("same");
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&fx.state).unwrap(), before);
    }

    #[test]
    fn zero_rate_or_zero_steps_skip_adaptation() {
        let fx = tiny_fixture(83);
        let run = |lr: f64, steps: usize| {
            let mut rng = rng::stream(83, "skip");
            meta_test(
                &fx.state,
                &fx.lm,
                &fx.tokenizer,
                &fx.test,
                &fx.split,
                2,
                lr,
                steps,
                &mut rng,
            )
            .unwrap()
        };
        // Both bypasses decode with the unadapted parameters, and match the
        // fixed-parameter path on the same episode stream.
        let zero_lr = run(0.0, 1);
        let zero_steps = run(0.5, 0);
        assert_eq!(zero_lr, zero_steps);
        let params = crate::meta::state::reconstruct_params(&fx.state).unwrap();
        let mut rng = rng::stream(83, "skip");
        let fixed = evaluate_params(
            &params,
            &fx.cfg,
            &fx.lm,
            &fx.tokenizer,
            &fx.test,
            &fx.split,
            2,
            &mut rng,
        )
        .unwrap();
        assert_eq!(zero_lr, fixed);
        // Adaptation with a real rate changes at least one candidate... or at
        // minimum the run completes; candidates may coincide for an untrained
        // LM, so only check it runs.
        let adapted = run(0.3, 2);
        assert_eq!(adapted.len(), fixed.len());
    }

    #[test]
    fn negative_rate_is_a_config_error() {
        let fx = tiny_fixture(84);
        let mut rng = rng::stream(84, "neg");
        assert!(matches!(
            meta_test(
                &fx.state,
                &fx.lm,
                &fx.tokenizer,
                &fx.test,
                &fx.split,
                1,
                -0.1,
                1,
                &mut rng,
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn baseline_trains_direct_weights_and_logs() {
        let fx = tiny_fixture(85);
        let mut cfg = fx.cfg.clone();
        cfg.baseline_batch = 4;
        let mut rng = rng::stream(85, "baseline");
        let (params, log) =
            baseline_train(&cfg, &fx.lm, &fx.tokenizer, &fx.train, 3, &mut rng).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|r| r.mean_support_loss == r.mean_query_loss));
        assert!(log.iter().all(|r| r.mean_query_loss.is_finite()));
        assert_eq!(params.caption.prompt.shape(), &[2, cfg.model.d_m]);
        assert!(params.sub.is_some() && params.obj.is_some());
        // The parameters must be usable for fixed evaluation.
        let mut eval_rng = rng::stream(85, "baseline-eval");
        let pairs = evaluate_params(
            &params,
            &cfg,
            &fx.lm,
            &fx.tokenizer,
            &fx.test,
            &fx.split,
            1,
            &mut eval_rng,
        )
        .unwrap();
        assert_eq!(pairs.len(), 4);
    }

    #[test]
    fn baseline_loss_decreases_over_training() {
        let fx = tiny_fixture(86);
        let mut cfg = fx.cfg.clone();
        cfg.baseline_batch = 8;
        cfg.outer_lr = 0.01;
        let mut rng = rng::stream(86, "baseline-descent");
        let (_params, log) =
            baseline_train(&cfg, &fx.lm, &fx.tokenizer, &fx.train, 30, &mut rng).unwrap();
        let first: f64 = log[..5].iter().map(|r| r.mean_query_loss).sum::<f64>() / 5.0;
        let last: f64 = log[log.len() - 5..]
            .iter()
            .map(|r| r.mean_query_loss)
            .sum::<f64>()
            / 5.0;
        assert!(
            last < first,
            "baseline loss did not descend: first-5 mean {first}, last-5 mean {last}"
        );
    }

    #[test]
    fn ablation_grid_has_five_rows_in_order() {
        let fx = tiny_fixture(87);
        let mut cfg = fx.cfg.clone();
        cfg.iterations = 1;
        cfg.episode_batch = 1;
        cfg.test_episodes = 1;
        let encoder = CaptionEncoder::new(
            &fx.vision,
            &fx.grammar,
            &mut rng::stream(cfg.seed, "caption-encoder"),
        )
        .unwrap();
        let ctx = ExperimentContext {
            lm: &fx.lm,
            tokenizer: &fx.tokenizer,
            grammar: &fx.grammar,
            encoder: &encoder,
            train: &fx.train,
            test: &fx.test,
            split: &fx.split,
        };
        let rows = ablate(&cfg, &ctx).unwrap();
        let flags: Vec<(bool, bool, bool)> = rows
            .iter()
            .map(|r| (r.subspace, r.sub_prompt, r.obj_prompt))
            .collect();
        assert_eq!(
            flags,
            vec![
                (false, false, false),
                (true, false, false),
                (true, true, false),
                (true, false, true),
                (true, true, true),
            ]
        );
        for row in &rows {
            row.report.validate().unwrap();
        }
    }
}
