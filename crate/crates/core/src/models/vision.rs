//! Deterministic stand-in for a frozen vision backbone.
//!
//! A scene's "image" is the projection of the concatenated (subject, object,
//! verb) word embeddings plus a small Gaussian perturbation seeded by the
//! scene itself — so each scene has exactly one feature vector, forever.
//! Synonymous words share an embedding row via canonicalization, which also
//! lets the retrieval metric's caption encoder reuse these tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;
use crate::world::{Grammar, Pos, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoder {
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub noise_scale: f64,
    /// content word → canonical synonym-set representative
    canonical: BTreeMap<String, String>,
    subject_table: BTreeMap<String, Tensor>,
    object_table: BTreeMap<String, Tensor>,
    verb_table: BTreeMap<String, Tensor>,
    /// [3·embed_dim × feature_dim]
    projection: Tensor,
}

impl VisionEncoder {
    /// Build the fixed tables from a grammar. Parameters never change after
    /// this call; there is deliberately no mutation API.
    pub fn new(
        grammar: &Grammar,
        embed_dim: usize,
        feature_dim: usize,
        noise_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if embed_dim == 0 || feature_dim == 0 {
            return Err(Error::Config("vision dims must be positive".into()));
        }
        if noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        let mut canonical = BTreeMap::new();
        for (word, pos) in &grammar.pos {
            if *pos != Pos::Function {
                let set = grammar.synonym_set(word);
                canonical.insert(word.clone(), set[0].clone());
            }
        }
        let table_for = |words: Vec<String>, rng: &mut SeededRng| {
            let mut canon: Vec<String> = words.iter().map(|w| canonical[w].clone()).collect();
            canon.sort();
            canon.dedup();
            let mut table = BTreeMap::new();
            for w in canon {
                table.insert(w, Tensor::gaussian(vec![1, embed_dim], 1.0, rng));
            }
            table
        };
        let subject_table =
            table_for(grammar.subjects.iter().map(|(w, _)| w.clone()).collect(), rng);
        let object_table = table_for(grammar.objects.clone(), rng);
        let verb_table = table_for(grammar.verbs.clone(), rng);
        let proj_std = 1.0 / (3.0 * embed_dim as f64).sqrt();
        let projection = Tensor::gaussian(vec![3 * embed_dim, feature_dim], proj_std, rng);
        Ok(VisionEncoder {
            embed_dim,
            feature_dim,
            noise_scale,
            canonical,
            subject_table,
            object_table,
            verb_table,
            projection,
        })
    }

    fn row<'t>(&self, table: &'t BTreeMap<String, Tensor>, word: &str) -> Result<&'t Tensor> {
        let canon = self
            .canonical
            .get(word)
            .ok_or_else(|| Error::Lookup(format!("word not in vision tables: {word}")))?;
        table
            .get(canon)
            .ok_or_else(|| Error::Lookup(format!("word {word} not in this table")))
    }

    /// The frozen feature for a scene: projection of the concatenated word
    /// embeddings, plus seeded zero-mean Gaussian noise.
    pub fn encode_image(&self, scene: &Scene) -> Result<Tensor> {
        let e_s = self.row(&self.subject_table, &scene.subject)?;
        let e_o = self.row(&self.object_table, &scene.object)?;
        let e_v = self.row(&self.verb_table, &scene.verb)?;
        let mut concat = Vec::with_capacity(3 * self.embed_dim);
        concat.extend_from_slice(e_s.data());
        concat.extend_from_slice(e_o.data());
        concat.extend_from_slice(e_v.data());

        let d = self.feature_dim;
        let pd = self.projection.data();
        let mut out = vec![0.0; d];
        for (i, &x) in concat.iter().enumerate() {
            for (o, &p) in out.iter_mut().zip(&pd[i * d..(i + 1) * d]) {
                *o += x * p;
            }
        }
        if self.noise_scale > 0.0 {
            let mut nr = rng::stream(scene.noise_seed, "image-noise");
            let noise = Tensor::gaussian(vec![1, d], self.noise_scale, &mut nr);
            for (o, &n) in out.iter_mut().zip(noise.data()) {
                *o += n;
            }
        }
        Tensor::new(vec![1, d], out)
    }

    /// Embedding row for any content word (searches the three tables),
    /// shared with the retrieval metric's caption encoder.
    pub fn content_embedding(&self, word: &str) -> Option<&Tensor> {
        let canon = self.canonical.get(word)?;
        self.subject_table
            .get(canon)
            .or_else(|| self.object_table.get(canon))
            .or_else(|| self.verb_table.get(canon))
    }

    /// The projection split into its (subject, object, verb) row blocks,
    /// each [embed_dim × feature_dim].
    pub fn projection_blocks(&self) -> Result<[Tensor; 3]> {
        let d_e = self.embed_dim;
        let d = self.feature_dim;
        let pd = self.projection.data();
        let block = |b: usize| {
            Tensor::new(vec![d_e, d], pd[b * d_e * d..(b + 1) * d_e * d].to_vec())
        };
        Ok([block(0)?, block(1)?, block(2)?])
    }
}

pub fn write_vision(path: &std::path::Path, enc: &VisionEncoder) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(enc)?)?;
    Ok(())
}

pub fn read_vision(path: &std::path::Path) -> Result<VisionEncoder> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{build_grammar, WorldConfig};

    fn fixture() -> (Grammar, VisionEncoder) {
        let g = build_grammar(&WorldConfig::default(), &mut rng::stream(21, "world")).unwrap();
        let enc = VisionEncoder::new(&g, 8, 16, 0.05, &mut rng::stream(21, "vision")).unwrap();
        (g, enc)
    }

    fn scene(g: &Grammar, noise_seed: u64) -> Scene {
        Scene {
            subject: g.subjects[0].0.clone(),
            object: g.objects[0].clone(),
            verb: g.compatibility[&g.subjects[0].1][&g.objects[0]][0].clone(),
            noise_seed,
        }
    }

    #[test]
    fn same_scene_same_vector() {
        let (g, enc) = fixture();
        let s = scene(&g, 42);
        assert_eq!(enc.encode_image(&s).unwrap(), enc.encode_image(&s).unwrap());
    }

    #[test]
    fn zero_noise_ignores_noise_seed() {
        let g = build_grammar(&WorldConfig::default(), &mut rng::stream(22, "world")).unwrap();
        let enc = VisionEncoder::new(&g, 8, 16, 0.0, &mut rng::stream(22, "vision")).unwrap();
        let a = enc.encode_image(&scene(&g, 1)).unwrap();
        let b = enc.encode_image(&scene(&g, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_dimension_matches_config() {
        let (g, enc) = fixture();
        let f = enc.encode_image(&scene(&g, 7)).unwrap();
        assert_eq!(f.shape(), &[1, 16]);
    }

    #[test]
    fn unknown_word_rejected() {
        let (_, enc) = fixture();
        let s = Scene {
            subject: "nosuchword".into(),
            object: "ball".into(),
            verb: "lifts".into(),
            noise_seed: 0,
        };
        assert!(enc.encode_image(&s).is_err());
    }

    #[test]
    fn synonyms_share_embeddings() {
        let (g, enc) = fixture();
        for (word, set) in &g.synonyms {
            if set.len() > 1 && g.pos[word] != Pos::Function {
                let a = enc.content_embedding(word);
                let b = enc.content_embedding(&set[0]);
                assert!(a.is_some());
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let (_, enc) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vision.json");
        write_vision(&path, &enc).unwrap();
        let back = read_vision(&path).unwrap();
        assert_eq!(enc, back);
        write_vision(&dir.path().join("again.json"), &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("again.json")).unwrap()
        );
    }

    #[test]
    fn projection_blocks_partition_the_projection() {
        let (g, enc) = fixture();
        let [ps, po, pv] = enc.projection_blocks().unwrap();
        assert_eq!(ps.shape(), &[8, 16]);
        // Reassemble and compare against a feature computed by blocks.
        let s = scene(&g, 3);
        let e_s = enc.content_embedding(&s.subject).unwrap();
        let manual = {
            let g2 = crate::graph::Graph::new();
            let es = g2.constant(e_s.clone());
            let eo = g2.constant(enc.content_embedding(&s.object).unwrap().clone());
            let ev = g2.constant(enc.content_embedding(&s.verb).unwrap().clone());
            let f = g2
                .add(
                    g2.add(
                        g2.matmul(es, g2.constant(ps)).unwrap(),
                        g2.matmul(eo, g2.constant(po)).unwrap(),
                    )
                    .unwrap(),
                    g2.matmul(ev, g2.constant(pv)).unwrap(),
                )
                .unwrap();
            g2.value(f)
        };
        let mut noiseless = enc.clone();
        noiseless.noise_scale = 0.0;
        let direct = noiseless.encode_image(&s).unwrap();
        assert!(direct.max_abs_diff(&manual).unwrap() < 1e-12);
    }
}
