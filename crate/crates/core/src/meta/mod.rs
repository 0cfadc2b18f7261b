//! The bilevel meta-learning engine.
//!
//! Every adaptor tensor is factored per chain step as `w = S·c`: an
//! orthonormal basis `S` spanning a low-dimensional subspace and coefficients
//! `c` inside it. The inner loop adapts only the coefficients on an episode's
//! support set; the outer loop updates bases and coefficients from the query
//! loss at the adapted coefficients. A direct (unfactored) mode backs the
//! plain-MAML ablation, a non-episodic baseline trains the same architecture
//! conventionally, and evaluation adapts to held-out categories and decodes
//! captions for scoring.

pub mod engine;
pub mod episode;
pub mod eval;
pub mod state;

pub use engine::{
    adapt_and_eval, inner_adapt, meta_train, outer_step, AdaptOutcome, InnerSettings, Pass,
    StepStats, TrainLogRow,
};
pub use episode::{sample_episode, sample_targets, Episode, EpisodeSample};
pub use eval::{
    ablate, baseline_train, evaluate_params, meta_test, scored_pairs, AblationRow,
    ExperimentContext, GeneratedCaption,
};
pub use state::{
    init_meta_state, read_state, reconstruct_params, write_state, MetaState, SlotFactor,
    SlotName, StepFactors, StepId,
};

#[cfg(test)]
pub(crate) mod testkit {
    //! Shared fixture for engine and evaluation tests: a real (small) world,
    //! vision features, tokenizer, a random frozen-width LM, and a fresh
    //! meta state. Everything is genuine except the LM is untrained.

    use crate::config::ExperimentConfig;
    use crate::meta::state::{init_meta_state, MetaState};
    use crate::models::{TinyLM, Tokenizer, VisionEncoder};
    use crate::rng;
    use crate::world::{
        build_grammar, make_dataset, split_categories, CaptionedSample, CategorySplit, Grammar,
        WorldConfig,
    };

    pub(crate) struct TinyFixture {
        pub cfg: ExperimentConfig,
        pub grammar: Grammar,
        pub split: CategorySplit,
        pub train: Vec<CaptionedSample>,
        pub test: Vec<CaptionedSample>,
        pub tokenizer: Tokenizer,
        pub vision: VisionEncoder,
        pub lm: TinyLM,
        pub state: MetaState,
    }

    pub(crate) fn tiny_fixture(seed: u64) -> TinyFixture {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.world = WorldConfig {
            categories: 10,
            test_categories: 4,
            per_category: 6,
            references: 3,
            ..WorldConfig::default()
        };
        cfg.model.d_v = 10;
        cfg.model.d_m = 8;
        cfg.model.lm_heads = 2;
        cfg.model.lm_blocks = 1;
        cfg.model.ffn_hidden = 16;
        cfg.model.t_max = 48;
        cfg.model.word_embed_dim = 6;
        cfg.model.noise_scale = 0.02;
        cfg.prompt_lengths = [1, 1, 2];
        cfg.n_way = 2;
        cfg.k_shot = 1;
        cfg.query_size = Some(2);
        cfg.episode_batch = 2;
        cfg.test_episodes = 3;
        cfg.iterations = 2;
        cfg.max_caption_len = 10;
        cfg.validate().unwrap();

        let mut world_rng = rng::stream(seed, "world");
        let grammar = build_grammar(&cfg.world, &mut world_rng).unwrap();
        let split =
            split_categories(cfg.world.categories, cfg.world.test_categories, &mut world_rng)
                .unwrap();
        let vision = VisionEncoder::new(
            &grammar,
            cfg.model.word_embed_dim,
            cfg.model.d_v,
            cfg.model.noise_scale,
            &mut rng::stream(seed, "vision"),
        )
        .unwrap();
        let (train, test) = make_dataset(&grammar, &split, &cfg.world, &mut world_rng, |scene| {
            vision.encode_image(scene)
        })
        .unwrap();
        let tokenizer = Tokenizer::from_grammar(&grammar).unwrap();
        let lm = TinyLM::init(
            cfg.lm_config_for_vocab(tokenizer.vocab_size()),
            &mut rng::stream(seed, "lm"),
        )
        .unwrap();
        let state = init_meta_state(&cfg, &mut rng::stream(seed, "meta-init")).unwrap();
        TinyFixture {
            cfg,
            grammar,
            split,
            train,
            test,
            tokenizer,
            vision,
            lm,
            state,
        }
    }
}
