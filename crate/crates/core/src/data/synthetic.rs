//! Synthetic antecedent task.
//!
//! Each sequence holds one antecedent pair `e_j c_k` per class (classes in
//! random order, entities drawn from a large pool) among filler tokens. Some
//! antecedents are later referred to by a mention `ref e_j`, placed so that
//! the mention's entity token sits `min_distance..=max_distance` positions
//! after the antecedent's entity token. The mention token is tagged `B-Ck`;
//! everything else is `O`. Its class is recoverable only from the matching
//! antecedent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conll::Sentence;
use crate::error::{Error, Result};

pub const MARKER: &str = "ref";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_distance: usize,
    pub max_distance: usize,
    pub classes: usize,
    /// Mentions per sequence; at most `classes`.
    pub mentions: usize,
    pub entities: usize,
    pub fillers: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            min_len: 40,
            max_len: 56,
            min_distance: 8,
            max_distance: 30,
            classes: 8,
            mentions: 2,
            entities: 500,
            fillers: 20,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSequence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    /// Position of the antecedent entity token, for mention tokens.
    pub antecedents: Vec<Option<usize>>,
}

impl SyntheticSequence {
    pub fn mention_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.antecedents.iter().enumerate().filter_map(|(i, a)| a.map(|_| i))
    }

    /// Sentence form; the middle column carries the antecedent position or `-`.
    pub fn to_sentence(&self, doc: usize) -> Sentence {
        Sentence {
            tokens: self.tokens.clone(),
            tags: self.tags.clone(),
            extra: self
                .antecedents
                .iter()
                .map(|a| vec![a.map_or_else(|| "-".to_string(), |p| p.to_string())])
                .collect(),
            doc,
        }
    }

    pub fn from_sentence(s: &Sentence) -> Result<Self> {
        let antecedents = s
            .extra
            .iter()
            .map(|cols| match cols.first().map(String::as_str) {
                Some("-") => Ok(None),
                Some(v) => v
                    .parse::<usize>()
                    .map(Some)
                    .map_err(|_| Error::Input(format!("bad antecedent column `{v}`"))),
                None => Err(Error::Input("synthetic corpus lacks the antecedent column".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tokens: s.tokens.clone(),
            tags: s.tags.clone(),
            antecedents,
        })
    }
}

pub fn class_label(k: usize) -> String {
    format!("B-C{k}")
}

/// `O` plus one label per class.
pub fn synthetic_labels(classes: usize) -> Vec<String> {
    std::iter::once("O".to_string()).chain((0..classes).map(class_label)).collect()
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, r: String| Err(Error::config(f, r));
        if self.n == 0 {
            return err("n", "must be at least 1".into());
        }
        if self.min_distance < 8 {
            return err("min_distance", format!("must be at least 8, got {}", self.min_distance));
        }
        if self.max_distance < self.min_distance {
            return err("max_distance", "must not be below min_distance".into());
        }
        if self.max_len < self.min_len {
            return err("max_len", "must not be below min_len".into());
        }
        if self.classes < 2 {
            return err("classes", "must be at least 2".into());
        }
        if self.mentions == 0 || self.mentions > self.classes {
            return err("mentions", format!("must lie in 1..={}", self.classes));
        }
        if self.entities < self.classes {
            return err("entities", "pool smaller than the number of classes".into());
        }
        if self.fillers == 0 {
            return err("fillers", "must be at least 1".into());
        }
        let needed = 2 * self.classes + 2 * self.mentions;
        if self.min_len < needed || self.min_len < self.min_distance + 2 {
            return err(
                "min_len",
                format!("too short to fit {} pairs at distance {}", self.classes, self.min_distance),
            );
        }
        Ok(())
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSequence>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n).map(|_| generate_one(cfg, &mut rng)).collect()
}

fn generate_one(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<SyntheticSequence> {
    for _ in 0..1000 {
        if let Some(seq) = try_generate(cfg, rng) {
            return Ok(seq);
        }
    }
    Err(Error::config(
        "min_len",
        "could not place all pairs; lengths and distances are infeasible",
    ))
}

fn try_generate(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Option<SyntheticSequence> {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let mut classes: Vec<usize> = (0..cfg.classes).collect();
    classes.shuffle(rng);
    let entities: Vec<usize> = rand::seq::index::sample(rng, cfg.entities, cfg.classes).into_vec();
    let mut mentioned: Vec<usize> = (0..cfg.classes).collect();
    mentioned.shuffle(rng);
    mentioned.truncate(cfg.mentions);

    let mut tokens: Vec<Option<String>> = vec![None; len];
    let mut tags = vec!["O".to_string(); len];
    let mut antecedents = vec![None; len];
    let free = |t: &[Option<String>], ps: &[usize]| ps.iter().all(|&p| p < t.len() && t[p].is_none());

    for k in 0..cfg.classes {
        let entity = format!("e{}", entities[k]);
        let class = format!("c{}", classes[k]);
        let mut placed = false;
        for _ in 0..100 {
            let a = rng.gen_range(0..len - 1);
            if mentioned.contains(&k) {
                let d = rng.gen_range(cfg.min_distance..=cfg.max_distance);
                let m = a + d;
                if !free(&tokens, &[a, a + 1, m - 1, m]) {
                    continue;
                }
                tokens[m - 1] = Some(MARKER.to_string());
                tokens[m] = Some(entity.clone());
                tags[m] = class_label(classes[k]);
                antecedents[m] = Some(a);
            } else if !free(&tokens, &[a, a + 1]) {
                continue;
            }
            tokens[a] = Some(entity.clone());
            tokens[a + 1] = Some(class.clone());
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    let tokens = tokens
        .into_iter()
        .map(|t| t.unwrap_or_else(|| format!("w{}", rng.gen_range(0..cfg.fillers))))
        .collect();
    Some(SyntheticSequence {
        tokens,
        tags,
        antecedents,
    })
}
