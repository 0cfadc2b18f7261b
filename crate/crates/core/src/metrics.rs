//! Caption-quality metrics: corpus BLEU, ROUGE-L, CIDEr, retrieval recall,
//! and content-word coverage.
//!
//! Every score is a pure function of the scored pairs. The retrieval metric
//! needs a caption encoder that lives in the same space as the image
//! features; [`CaptionEncoder`] reuses the vision encoder's word tables so a
//! caption naming the right content words lands near its own image.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::vision::VisionEncoder;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::world::{Grammar, Pos, Scene};

/// One generated caption with its grading context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub candidate: Vec<String>,
    /// 1–5 ground-truth captions.
    pub references: Vec<Vec<String>>,
    pub image_feature: Tensor,
    pub scene: Scene,
}

impl ScoredPair {
    pub fn validate(&self) -> Result<()> {
        if self.references.is_empty() || self.references.len() > 5 {
            return Err(Error::Contract(
                "each pair needs between one and five references".into(),
            ));
        }
        Ok(())
    }
}

/// Corpus scores in one row. Ranges: BLEU/ROUGE/MRR/recalls in [0,1],
/// CIDEr in [0,10], coverage in [0,100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    pub mrr: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    /// Set when the retrieval pool was smaller than the largest recall
    /// cutoff, so those recalls saturate.
    pub pool_warning: bool,
    pub exact_noun: f64,
    pub exact_verb: f64,
    pub fuzzy_noun: f64,
    pub fuzzy_verb: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let unit = self
            .bleu
            .iter()
            .chain([
                &self.rouge_l,
                &self.mrr,
                &self.recall_at_1,
                &self.recall_at_5,
                &self.recall_at_10,
            ])
            .all(|v| (0.0..=1.0).contains(v));
        let cider_ok = (0.0..=10.0).contains(&self.cider);
        let coverage_ok = [
            self.exact_noun,
            self.exact_verb,
            self.fuzzy_noun,
            self.fuzzy_verb,
        ]
        .iter()
        .all(|v| (0.0..=100.0).contains(v));
        if unit && cider_ok && coverage_ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("metric out of range: {self:?}")))
        }
    }
}

fn non_empty(pairs: &[ScoredPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Contract("metrics need a non-empty corpus".into()));
    }
    for p in pairs {
        p.validate()?;
    }
    Ok(())
}

/// Multiset of n-grams of one order.
fn ngram_counts(words: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if words.len() >= n {
        for i in 0..=(words.len() - n) {
            *counts.entry(&words[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Candidate n-gram count clipped at the maximum count over the references
/// (the modified-precision numerator).
fn clipped_matches(candidate: &[String], references: &[Vec<String>], n: usize) -> usize {
    let cand = ngram_counts(candidate, n);
    let refs: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
    cand.iter()
        .map(|(gram, &count)| {
            let best = refs.iter().map(|r| r.get(gram).copied().unwrap_or(0)).max();
            count.min(best.unwrap_or(0))
        })
        .sum()
}

/// Corpus BLEU@n: geometric mean of the clipped modified precisions for
/// orders 1..=n times the brevity penalty. No smoothing — a zero precision
/// at any order zeroes the score. The effective reference length is the
/// per-segment reference length closest to the candidate's, ties resolved
/// toward the shorter reference.
pub fn bleu(pairs: &[ScoredPair], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    non_empty(pairs)?;
    let mut log_precision_sum = 0.0;
    for order in 1..=n {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for p in pairs {
            clipped += clipped_matches(&p.candidate, &p.references, order);
            total += p.candidate.len().saturating_sub(order - 1);
        }
        if clipped == 0 || total == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (clipped as f64 / total as f64).ln();
    }
    let candidate_len: usize = pairs.iter().map(|p| p.candidate.len()).sum();
    let reference_len: usize = pairs
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| r.len())
                .min_by_key(|&len| {
                    (len.abs_diff(p.candidate.len()), len)
                })
                .expect("references validated non-empty")
        })
        .sum();
    let bp = if candidate_len > reference_len {
        1.0
    } else if candidate_len == 0 {
        return Ok(0.0);
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };
    Ok(bp * (log_precision_sum / n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            row[j + 1] = if x == y {
                prev[j] + 1
            } else {
                row[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}

/// Mean over pairs of the best longest-common-subsequence F1 against any
/// reference (P = LCS/|candidate|, R = LCS/|reference|). An empty candidate
/// scores zero for its pair.
pub fn rouge_l(pairs: &[ScoredPair]) -> Result<f64> {
    non_empty(pairs)?;
    let mut total = 0.0;
    for p in pairs {
        let mut best: f64 = 0.0;
        if !p.candidate.is_empty() {
            for r in &p.references {
                if r.is_empty() {
                    continue;
                }
                let lcs = lcs_len(&p.candidate, r) as f64;
                if lcs > 0.0 {
                    let precision = lcs / p.candidate.len() as f64;
                    let recall = lcs / r.len() as f64;
                    best = best.max(2.0 * precision * recall / (precision + recall));
                }
            }
        }
        total += best;
    }
    Ok(total / pairs.len() as f64)
}

fn cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(k, &va)| b.get(k).map(|&vb| va * vb))
        .sum();
    let na: f64 = a.values().map(|v| v * v).sum();
    let nb: f64 = b.values().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb).sqrt()
}

fn tf_idf_vector(
    words: &[String],
    n: usize,
    idf: &BTreeMap<Vec<String>, f64>,
    default_idf: f64,
) -> BTreeMap<Vec<String>, f64> {
    ngram_counts(words, n)
        .into_iter()
        .map(|(gram, count)| {
            let key = gram.to_vec();
            let weight = idf.get(&key).copied().unwrap_or(default_idf);
            (key, count as f64 * weight)
        })
        .collect()
}

/// Per-pair CIDEr: 10 × the average over orders 1..4 of the mean cosine
/// between the candidate's and each reference's TF-IDF n-gram vectors.
///
/// Document frequency counts images whose reference set contains the n-gram
/// at least once; IDF = ln(images / df), with df floored at one so n-grams
/// unseen in any reference carry the maximal weight ln(images).
pub fn cider_per_pair(pairs: &[ScoredPair]) -> Result<Vec<f64>> {
    non_empty(pairs)?;
    if pairs.len() < 2 {
        return Err(Error::Contract(
            "CIDEr needs at least two images for a defined IDF".into(),
        ));
    }
    let images = pairs.len() as f64;
    let mut scores = Vec::with_capacity(pairs.len());
    let mut per_order_idf: Vec<BTreeMap<Vec<String>, f64>> = Vec::with_capacity(4);
    for n in 1..=4 {
        let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for p in pairs {
            let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
            for r in &p.references {
                for gram in ngram_counts(r, n).keys() {
                    seen.insert(gram.to_vec());
                }
            }
            for gram in seen {
                *df.entry(gram).or_insert(0) += 1;
            }
        }
        per_order_idf.push(
            df.into_iter()
                .map(|(gram, count)| (gram, (images / count as f64).ln()))
                .collect(),
        );
    }
    let default_idf = images.ln();
    for p in pairs {
        let mut order_sum = 0.0;
        for n in 1..=4 {
            let idf = &per_order_idf[n - 1];
            let cand = tf_idf_vector(&p.candidate, n, idf, default_idf);
            let sim_sum: f64 = p
                .references
                .iter()
                .map(|r| cosine(&cand, &tf_idf_vector(r, n, idf, default_idf)))
                .sum();
            order_sum += sim_sum / p.references.len() as f64;
        }
        scores.push(10.0 * order_sum / 4.0);
    }
    Ok(scores)
}

/// Corpus CIDEr: mean of the per-pair scores.
pub fn cider(pairs: &[ScoredPair]) -> Result<f64> {
    let scores = cider_per_pair(pairs)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Fixed caption embedding sharing the vision encoder's content-word tables:
/// mean word embedding, linearly mapped into image-feature space by the sum
/// of the vision projection's subject/object/verb blocks. Function words get
/// their own seeded rows.
#[derive(Debug, Clone)]
pub struct CaptionEncoder {
    embed_dim: usize,
    feature_dim: usize,
    content: BTreeMap<String, Tensor>,
    function: BTreeMap<String, Tensor>,
    /// [embed_dim × feature_dim]
    projection: Tensor,
}

impl CaptionEncoder {
    pub fn new(vision: &VisionEncoder, grammar: &Grammar, rng: &mut SeededRng) -> Result<Self> {
        let mut content = BTreeMap::new();
        let mut function = BTreeMap::new();
        for (word, pos) in &grammar.pos {
            if *pos == Pos::Function {
                function.insert(
                    word.clone(),
                    Tensor::gaussian(vec![1, vision.embed_dim], 1.0, rng),
                );
            } else {
                let row = vision.content_embedding(word).ok_or_else(|| {
                    Error::Contract(format!("vision tables lack content word {word}"))
                })?;
                content.insert(word.clone(), row.clone());
            }
        }
        let [ps, po, pv] = vision.projection_blocks()?;
        let mut projection = ps;
        for (dst, (o, v)) in projection
            .data_mut()
            .iter_mut()
            .zip(po.data().iter().zip(pv.data()))
        {
            *dst += o + v;
        }
        Ok(CaptionEncoder {
            embed_dim: vision.embed_dim,
            feature_dim: vision.feature_dim,
            content,
            function,
            projection,
        })
    }

    /// Embed a caption; unknown words are skipped, and a caption with no
    /// known words maps to the zero vector.
    pub fn encode(&self, words: &[String]) -> Tensor {
        let mut mean = vec![0.0; self.embed_dim];
        let mut known = 0usize;
        for w in words {
            if let Some(row) = self.content.get(w).or_else(|| self.function.get(w)) {
                for (m, &x) in mean.iter_mut().zip(row.data()) {
                    *m += x;
                }
                known += 1;
            }
        }
        let d = self.feature_dim;
        let mut out = vec![0.0; d];
        if known > 0 {
            let pd = self.projection.data();
            for (i, &m) in mean.iter().enumerate() {
                let scaled = m / known as f64;
                for (o, &p) in out.iter_mut().zip(&pd[i * d..(i + 1) * d]) {
                    *o += scaled * p;
                }
            }
        }
        Tensor::new(vec![1, d], out).expect("caption embedding construction cannot fail")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub mrr: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub pool_warning: bool,
}

fn dense_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na: f64 = a.data().iter().map(|x| x * x).sum();
    let nb: f64 = b.data().iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb).sqrt()
}

/// Rank each image's own generated caption within the pool of all generated
/// captions by image↔caption cosine; ties resolve toward the lower caption
/// index.
pub(crate) fn retrieval_from_scores(scores: &[Vec<f64>]) -> RetrievalScores {
    let pool = scores.len();
    let mut reciprocal_sum = 0.0;
    let mut hits = [0usize; 3]; // at 1, 5, 10
    for (i, row) in scores.iter().enumerate() {
        let own = row[i];
        let rank = 1 + row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own || (s == own && j < i))
            .count();
        reciprocal_sum += 1.0 / rank as f64;
        for (slot, k) in [1usize, 5, 10].into_iter().enumerate() {
            if rank <= k {
                hits[slot] += 1;
            }
        }
    }
    RetrievalScores {
        mrr: reciprocal_sum / pool as f64,
        recall_at_1: hits[0] as f64 / pool as f64,
        recall_at_5: hits[1] as f64 / pool as f64,
        recall_at_10: hits[2] as f64 / pool as f64,
        pool_warning: pool < 10,
    }
}

/// Retrieval quality of the generated captions: cosine score matrix between
/// every image feature and every encoded generated caption, then MRR and
/// recall@{1,5,10} of each image's own caption. A pool smaller than the
/// largest cutoff sets the warning flag (those recalls saturate).
pub fn retrieval_recall(
    pairs: &[ScoredPair],
    encoder: &CaptionEncoder,
) -> Result<RetrievalScores> {
    non_empty(pairs)?;
    if pairs.len() < 2 {
        return Err(Error::Contract(
            "retrieval needs at least two pairs to rank against".into(),
        ));
    }
    let encoded: Vec<Tensor> = pairs.iter().map(|p| encoder.encode(&p.candidate)).collect();
    let scores: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            encoded
                .iter()
                .map(|c| dense_cosine(&p.image_feature, c))
                .collect()
        })
        .collect();
    Ok(retrieval_from_scores(&scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub exact_noun: f64,
    pub exact_verb: f64,
    pub fuzzy_noun: f64,
    pub fuzzy_verb: f64,
}

fn content_set(captions: &[Vec<String>], grammar: &Grammar, pos: Pos) -> BTreeSet<String> {
    captions
        .iter()
        .flatten()
        .filter(|w| grammar.pos.get(*w) == Some(&pos))
        .cloned()
        .collect()
}

fn coverage_of(
    generated: &BTreeSet<String>,
    reference: &BTreeSet<String>,
    grammar: &Grammar,
    fuzzy: bool,
) -> f64 {
    let covered = reference
        .iter()
        .filter(|r| {
            if fuzzy {
                grammar.synonym_set(r).iter().any(|s| generated.contains(s))
            } else {
                generated.contains(*r)
            }
        })
        .count();
    covered as f64 / reference.len() as f64
}

/// Percentage of reference content words (union over references) that the
/// generated caption mentions, exactly or through a synonym. Pairs whose
/// references contain no word of the class are skipped for that class.
pub fn content_coverage(pairs: &[ScoredPair], grammar: &Grammar) -> Result<Coverage> {
    non_empty(pairs)?;
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 2]; // noun pairs, verb pairs
    for p in pairs {
        for (slot, pos) in [Pos::Noun, Pos::Verb].into_iter().enumerate() {
            let reference = content_set(&p.references, grammar, pos);
            if reference.is_empty() {
                continue;
            }
            let generated = content_set(std::slice::from_ref(&p.candidate), grammar, pos);
            counts[slot] += 1;
            sums[slot] += coverage_of(&generated, &reference, grammar, false);
            sums[slot + 2] += coverage_of(&generated, &reference, grammar, true);
        }
    }
    let mean = |sum: f64, count: usize| {
        if count == 0 {
            0.0
        } else {
            100.0 * sum / count as f64
        }
    };
    Ok(Coverage {
        exact_noun: mean(sums[0], counts[0]),
        exact_verb: mean(sums[1], counts[1]),
        fuzzy_noun: mean(sums[2], counts[0]),
        fuzzy_verb: mean(sums[3], counts[1]),
    })
}

/// The full battery in one report.
pub fn metric_report(
    pairs: &[ScoredPair],
    encoder: &CaptionEncoder,
    grammar: &Grammar,
) -> Result<MetricReport> {
    let bleu_scores = [
        bleu(pairs, 1)?,
        bleu(pairs, 2)?,
        bleu(pairs, 3)?,
        bleu(pairs, 4)?,
    ];
    let retrieval = retrieval_recall(pairs, encoder)?;
    let coverage = content_coverage(pairs, grammar)?;
    let report = MetricReport {
        bleu: bleu_scores,
        rouge_l: rouge_l(pairs)?,
        cider: cider(pairs)?,
        mrr: retrieval.mrr,
        recall_at_1: retrieval.recall_at_1,
        recall_at_5: retrieval.recall_at_5,
        recall_at_10: retrieval.recall_at_10,
        pool_warning: retrieval.pool_warning,
        exact_noun: coverage.exact_noun,
        exact_verb: coverage.exact_verb,
        fuzzy_noun: coverage.fuzzy_noun,
        fuzzy_verb: coverage.fuzzy_verb,
    };
    report.validate()?;
    Ok(report)
}
