//! Episode sampling for episodic training and evaluation.
//!
//! An N-way K-shot episode draws N categories, then K support and L query
//! samples per category without overlap. Each drawn sample also commits to
//! one of its reference captions up front, so episode construction resolves
//! all randomness before any (possibly parallel) evaluation begins.

use std::collections::BTreeMap;

use rand::Rng;

use crate::adaptor::CotTargets;
use crate::error::{Error, Result};
use crate::models::{Tokenizer, EOS};
use crate::rng::SeededRng;
use crate::world::CaptionedSample;

/// One drawn sample together with its committed reference caption.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSample {
    pub sample: CaptionedSample,
    /// Line index of the sample in the dataset it was drawn from; doubles as
    /// the image id in generated-caption files.
    pub dataset_index: usize,
    /// Index into `sample.references` used as the training target.
    pub reference_idx: usize,
}

/// An N-way K-shot episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// The categories drawn, in draw order.
    pub categories: Vec<usize>,
    /// K support samples per category, grouped by category in draw order.
    pub support: Vec<EpisodeSample>,
    /// L query samples per category, grouped the same way.
    pub query: Vec<EpisodeSample>,
}

/// Draws an episode from a captioned dataset.
///
/// Categories are drawn without replacement from those present in the
/// dataset; a dataset with fewer than `n_way` categories, or a drawn category
/// with fewer than `k_shot + query_size` samples, is a data error.
pub fn sample_episode(
    dataset: &[CaptionedSample],
    n_way: usize,
    k_shot: usize,
    query_size: usize,
    rng: &mut SeededRng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || query_size == 0 {
        return Err(Error::Config(
            "episode shape (n_way, k_shot, query_size) must be positive".into(),
        ));
    }
    let mut by_category: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, sample) in dataset.iter().enumerate() {
        by_category.entry(sample.category_id).or_default().push(idx);
    }
    if by_category.len() < n_way {
        return Err(Error::Data(format!(
            "dataset has {} categories, episode needs {n_way}",
            by_category.len()
        )));
    }
    let mut category_ids: Vec<usize> = by_category.keys().copied().collect();
    partial_shuffle(&mut category_ids, n_way, rng);
    let categories: Vec<usize> = category_ids[..n_way].to_vec();

    let per_category = k_shot + query_size;
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * query_size);
    for &cat in &categories {
        let mut indices = by_category[&cat].clone();
        if indices.len() < per_category {
            return Err(Error::Data(format!(
                "category {cat} has {} samples, episode needs {per_category}",
                indices.len()
            )));
        }
        partial_shuffle(&mut indices, per_category, rng);
        for (slot, &idx) in indices[..per_category].iter().enumerate() {
            let sample = dataset[idx].clone();
            let reference_idx = rng.random_range(0..sample.references.len());
            let drawn = EpisodeSample {
                sample,
                dataset_index: idx,
                reference_idx,
            };
            if slot < k_shot {
                support.push(drawn);
            } else {
                query.push(drawn);
            }
        }
    }
    Ok(Episode {
        categories,
        support,
        query,
    })
}

/// Fisher-Yates over the first `take` positions only.
fn partial_shuffle<T>(items: &mut [T], take: usize, rng: &mut SeededRng) {
    let n = items.len();
    for i in 0..take.min(n.saturating_sub(1)) {
        let j = rng.random_range(i..n);
        items.swap(i, j);
    }
}

/// Tokenizes a drawn sample into per-step targets: the subject token, the
/// object token, and the committed reference caption terminated by the
/// end-of-sequence token.
pub fn sample_targets(drawn: &EpisodeSample, tokenizer: &Tokenizer) -> Result<CotTargets> {
    let sub = tokenizer.encode_word(&drawn.sample.scene.subject)?;
    let obj = tokenizer.encode_word(&drawn.sample.scene.object)?;
    let reference = drawn
        .sample
        .references
        .get(drawn.reference_idx)
        .ok_or_else(|| {
            Error::Index(format!(
                "reference {} out of range for a sample with {} references",
                drawn.reference_idx,
                drawn.sample.references.len()
            ))
        })?;
    let mut caption = tokenizer.encode(reference)?;
    caption.push(EOS);
    CotTargets::new(vec![sub], vec![obj], caption)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Tokenizer;
    use crate::rng;
    use crate::world::{build_grammar, make_dataset, split_categories, WorldConfig};

    fn tiny_world() -> (Vec<CaptionedSample>, Tokenizer) {
        let cfg = WorldConfig {
            categories: 10,
            test_categories: 4,
            per_category: 8,
            ..WorldConfig::default()
        };
        let mut rng = rng::stream(40, "episode-world");
        let grammar = build_grammar(&cfg, &mut rng).unwrap();
        let split = split_categories(cfg.categories, cfg.test_categories, &mut rng).unwrap();
        let (train, _test) = make_dataset(&grammar, &split, &cfg, &mut rng, |_scene| {
            Ok(crate::tensor::Tensor::zeros(vec![1, 4]))
        })
        .unwrap();
        let tok = Tokenizer::from_grammar(&grammar).unwrap();
        (train, tok)
    }

    #[test]
    fn episode_counts_and_category_purity() {
        let (train, _tok) = tiny_world();
        let mut rng = rng::stream(41, "episodes");
        for _ in 0..200 {
            let ep = sample_episode(&train, 2, 1, 3, &mut rng).unwrap();
            assert_eq!(ep.categories.len(), 2);
            assert_ne!(ep.categories[0], ep.categories[1]);
            assert_eq!(ep.support.len(), 2);
            assert_eq!(ep.query.len(), 6);
            // Grouping: first k_shot support entries belong to the first
            // category, and so on.
            assert_eq!(ep.support[0].sample.category_id, ep.categories[0]);
            assert_eq!(ep.support[1].sample.category_id, ep.categories[1]);
            for (i, q) in ep.query.iter().enumerate() {
                assert_eq!(q.sample.category_id, ep.categories[i / 3]);
            }
        }
    }

    #[test]
    fn support_and_query_never_share_a_sample() {
        let (train, _tok) = tiny_world();
        let mut rng = rng::stream(42, "disjoint");
        for _ in 0..300 {
            let ep = sample_episode(&train, 3, 2, 2, &mut rng).unwrap();
            for drawn in ep.support.iter().chain(&ep.query) {
                assert_eq!(train[drawn.dataset_index], drawn.sample);
            }
            for s in &ep.support {
                for q in &ep.query {
                    assert_ne!(
                        s.dataset_index, q.dataset_index,
                        "support sample reused as query"
                    );
                }
            }
        }
    }

    #[test]
    fn all_present_categories_get_drawn_eventually() {
        let (train, _tok) = tiny_world();
        let mut rng = rng::stream(43, "coverage");
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..100 {
            let ep = sample_episode(&train, 2, 1, 1, &mut rng).unwrap();
            seen.extend(ep.categories.iter().copied());
        }
        let present: std::collections::BTreeSet<usize> =
            train.iter().map(|s| s.category_id).collect();
        assert_eq!(seen, present, "some category never sampled in 100 draws");
    }

    #[test]
    fn thin_category_is_a_data_error() {
        let (mut train, _tok) = tiny_world();
        // Keep only one sample of the smallest category id.
        let min_cat = train.iter().map(|s| s.category_id).min().unwrap();
        let mut kept_one = false;
        train.retain(|s| {
            if s.category_id != min_cat {
                return true;
            }
            if kept_one {
                false
            } else {
                kept_one = true;
                true
            }
        });
        let mut rng = rng::stream(44, "thin");
        let mut saw_error = false;
        for _ in 0..50 {
            match sample_episode(&train, 2, 1, 1, &mut rng) {
                Ok(_) => {}
                Err(Error::Data(msg)) => {
                    assert!(msg.contains("samples"), "unexpected message: {msg}");
                    saw_error = true;
                }
                Err(other) => panic!("unexpected error kind: {other}"),
            }
        }
        assert!(saw_error, "thin category never drawn in 50 episodes");
    }

    #[test]
    fn too_few_categories_is_a_data_error() {
        let (train, _tok) = tiny_world();
        let one_cat: Vec<_> = train
            .iter()
            .filter(|s| s.category_id == train[0].category_id)
            .cloned()
            .collect();
        let mut rng = rng::stream(45, "few-cats");
        assert!(matches!(
            sample_episode(&one_cat, 2, 1, 1, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn same_seed_reproduces_the_episode() {
        let (train, _tok) = tiny_world();
        let mut a = rng::stream(46, "repro");
        let mut b = rng::stream(46, "repro");
        let ea = sample_episode(&train, 2, 2, 2, &mut a).unwrap();
        let eb = sample_episode(&train, 2, 2, 2, &mut b).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn targets_encode_scene_and_terminated_reference() {
        let (train, tok) = tiny_world();
        let drawn = EpisodeSample {
            sample: train[0].clone(),
            dataset_index: 0,
            reference_idx: train[0].references.len() - 1,
        };
        let targets = sample_targets(&drawn, &tok).unwrap();
        assert_eq!(
            targets.sub_tokens,
            vec![tok.encode_word(&train[0].scene.subject).unwrap()]
        );
        assert_eq!(
            targets.obj_tokens,
            vec![tok.encode_word(&train[0].scene.object).unwrap()]
        );
        assert_eq!(*targets.caption_tokens.last().unwrap(), EOS);
        let words = tok
            .decode_words(&targets.caption_tokens)
            .unwrap();
        assert_eq!(&words, drawn.sample.references.last().unwrap());
    }
}
