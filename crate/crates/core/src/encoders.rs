//! Token and post encoders producing the per-step inputs of the memory.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::memory::{CombineParams, GruParams};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lookup key of a surface token.
pub fn normalize(token: &str) -> String {
    token.to_lowercase()
}

/// Whitespace split, ASCII punctuation removed, empty pieces dropped.
pub fn tokenize_text(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Lowercased token inventory with reserved padding and unknown entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    /// Adds every token in first-seen order.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.insert(t);
        }
        v
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Integrity("vocabulary lacks reserved entries".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn insert(&mut self, token: &str) -> usize {
        let key = if token == PAD_TOKEN || token == UNK_TOKEN {
            token.to_string()
        } else {
            normalize(token)
        };
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(key.clone(), i);
        self.tokens.push(key);
        i
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(&normalize(token)).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&normalize(token))
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }
}

/// Six binary word-shape flags:
/// initial capital, all caps, all lower, non-initial capital,
/// letters mixed with digits, contains ASCII punctuation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LexicalFeatures(pub [bool; 6]);

impl LexicalFeatures {
    pub const WIDTH: usize = 6;

    pub fn of(token: &str) -> Self {
        let chars: Vec<char> = token.chars().collect();
        let initial_cap = chars.first().is_some_and(|c| c.is_uppercase());
        let all_caps = !chars.is_empty() && chars.iter().all(|c| c.is_alphabetic() && c.is_uppercase());
        let all_lower = !chars.is_empty() && chars.iter().all(|c| c.is_alphabetic() && c.is_lowercase());
        let inner_cap = !all_caps && chars.iter().skip(1).any(|c| c.is_uppercase());
        let alnum_mix = chars.iter().any(|c| c.is_alphabetic()) && chars.iter().any(|c| c.is_numeric());
        let punct = chars.iter().any(|c| c.is_ascii_punctuation());
        Self([initial_cap, all_caps, all_lower, inner_cap, alnum_mix, punct])
    }

    pub fn to_f64(self) -> [f64; 6] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }

    /// `T x 6` matrix of flags for a token sequence.
    pub fn matrix<S: AsRef<str>>(tokens: &[S]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let data = tokens
            .iter()
            .flat_map(|t| Self::of(t.as_ref()).to_f64())
            .collect();
        Tensor::new(tokens.len(), Self::WIDTH, data)
    }
}

/// Structural and punctuation features of a post.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostFeatures {
    pub initiator: bool,
    /// 1-based post index divided by thread length.
    pub relative_position: f64,
    pub questions: usize,
    pub exclamations: usize,
    pub urls: usize,
}

impl PostFeatures {
    /// `index` is 0-based; `raw_text` is the unstripped title and body.
    pub fn compute(index: usize, thread_len: usize, initiator: bool, raw_text: &str) -> Self {
        Self {
            initiator,
            relative_position: (index + 1) as f64 / thread_len as f64,
            questions: raw_text.matches('?').count(),
            exclamations: raw_text.matches('!').count(),
            urls: count_urls(raw_text),
        }
    }

    pub fn structural(&self) -> [f64; 2] {
        [f64::from(u8::from(self.initiator)), self.relative_position]
    }

    pub fn punctuation(&self) -> [f64; 3] {
        [self.questions as f64, self.exclamations as f64, self.urls as f64]
    }
}

/// Whitespace tokens containing `http://`, `https://` or `www.`.
pub fn count_urls(text: &str) -> usize {
    text.split_whitespace()
        .filter(|t| t.contains("http://") || t.contains("https://") || t.contains("www."))
        .count()
}

/// Word vectors read from a text file: `token v1 ... vd` per line.
#[derive(Clone, Debug, Default)]
pub struct Pretrained {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
    /// Tokens in file order (first occurrence wins).
    pub order: Vec<String>,
}

impl Pretrained {
    pub fn from_reader(reader: impl BufRead, path: &Path) -> Result<Self> {
        let mut out = Pretrained::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: format!("bad float: {e}"),
                })?;
            if values.is_empty() || (out.dim != 0 && values.len() != out.dim) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: format!("expected {} values, found {}", out.dim.max(1), values.len()),
                });
            }
            out.dim = values.len();
            let key = normalize(token);
            if !out.vectors.contains_key(&key) {
                out.order.push(key.clone());
                out.vectors.insert(key, values);
            }
        }
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|_| Error::NotFound(path.to_path_buf()))?;
        Self::from_reader(std::io::BufReader::new(file), path)
    }
}

/// Embedding lookup `Φ`. A fixed (pretrained) table gets a separate
/// trainable row for unknown tokens.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub unk: Option<ParamId>,
    pub dim: usize,
}

impl Embedding {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab: &Vocabulary,
        dim: usize,
        pretrained: Option<&Pretrained>,
        fixed: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if let Some(p) = pretrained {
            if p.dim != dim {
                return Err(Error::config(
                    "embedding_dim",
                    format!("is {dim} but the embedding file has width {}", p.dim),
                ));
            }
        }
        let bound = (3.0 / dim as f64).sqrt();
        let table = store.add_uniform(format!("{prefix}.table"), vocab.len(), dim, bound, rng)?;
        let frozen = fixed && pretrained.is_some();
        {
            let t = store.get_mut(table);
            t.row_mut(PAD).fill(0.0);
            if let Some(p) = pretrained {
                for (i, tok) in vocab.tokens().iter().enumerate().skip(2) {
                    if let Some(v) = p.vectors.get(tok) {
                        t.row_mut(i).copy_from_slice(v);
                    }
                }
            }
            if frozen {
                t.row_mut(UNK).fill(0.0);
            }
        }
        let unk = if frozen {
            store.set_trainable(table, false);
            Some(store.add_uniform(format!("{prefix}.unk"), 1, dim, bound, rng)?)
        } else {
            None
        };
        Ok(Self { table, unk, dim })
    }

    /// `T x d` rows for the given ids.
    pub fn embed(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let table = g.param(self.table);
        let rows = g.gather(table, ids.to_vec())?;
        let Some(unk) = self.unk else { return Ok(rows) };
        if !ids.contains(&UNK) {
            return Ok(rows);
        }
        let mut mask = Tensor::zeros(ids.len(), self.dim);
        for (r, &id) in ids.iter().enumerate() {
            if id == UNK {
                mask.row_mut(r).fill(1.0);
            }
        }
        let unk = g.param(unk);
        let unk_rows = g.gather(unk, vec![0; ids.len()])?;
        let mask = g.constant(mask);
        let unk_rows = g.mul(mask, unk_rows)?;
        g.add(rows, unk_rows)
    }
}

/// `x' = [embedding, lexical flags]` for every token.
pub fn featurize_tokens(g: &mut Graph<'_>, embedded: NodeId, lexical: &Tensor) -> Result<NodeId> {
    let flags = g.constant(lexical.clone());
    g.concat_cols(vec![embedded, flags])
}

/// Word-level bi-GRU whose last forward and first backward states are
/// merged by a tanh affine map.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoder {
    pub fwd: GruParams,
    pub rev: GruParams,
    pub combine: CombineParams,
}

impl TextEncoder {
    pub fn init(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fwd: GruParams::init(store, &format!("{prefix}.fwd"), input_dim, hidden, rng)?,
            rev: GruParams::init(store, &format!("{prefix}.rev"), input_dim, hidden, rng)?,
            combine: CombineParams::init(store, &format!("{prefix}.combine"), hidden, hidden, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    /// `1 x hidden` encoding; `None` (no tokens) encodes to zeros.
    pub fn encode(&self, g: &mut Graph<'_>, words: Option<NodeId>) -> Result<NodeId> {
        let Some(words) = words else {
            return Ok(g.constant(Tensor::zeros(1, self.hidden())));
        };
        let fwd = self.fwd.run(g, words, false)?;
        let rev = self.rev.run(g, words, true)?;
        self.combine.apply(g, *fwd.last().expect("nonempty"), rev[0])
    }
}

/// Title and text encoders plus the feature projections of the thread task.
#[derive(Clone, Copy, Debug)]
pub struct PostEncoder {
    pub title: TextEncoder,
    pub text: TextEncoder,
    pub w_struct: ParamId,
    pub w_punct: ParamId,
}

impl PostEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        word_dim: usize,
        hidden: usize,
        struct_dim: usize,
        punct_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            title: TextEncoder::init(store, &format!("{prefix}.title"), word_dim, hidden, rng)?,
            text: TextEncoder::init(store, &format!("{prefix}.text"), word_dim, hidden, rng)?,
            w_struct: store.add_glorot(format!("{prefix}.w_struct"), struct_dim, 2, rng)?,
            w_punct: store.add_glorot(format!("{prefix}.w_punct"), punct_dim, 3, rng)?,
        })
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        self.title.hidden() + self.text.hidden() + store.get(self.w_struct).rows() + store.get(self.w_punct).rows()
    }

    /// `x_t = [Φ_title, Φ_text]` for one post.
    pub fn encode(&self, g: &mut Graph<'_>, title: Option<NodeId>, text: Option<NodeId>) -> Result<NodeId> {
        if title.is_none() && text.is_none() {
            return Err(Error::Input("post has neither title nor text tokens".into()));
        }
        let a = self.title.encode(g, title)?;
        let b = self.text.encode(g, text)?;
        g.concat_cols(vec![a, b])
    }

    /// `x'_t = [x_t, W_struct Φ_s, W_punct Φ_p]`.
    pub fn featurize(&self, g: &mut Graph<'_>, x: NodeId, features: &PostFeatures) -> Result<NodeId> {
        let s = g.constant(Tensor::row_vector(features.structural().to_vec()));
        let p = g.constant(Tensor::row_vector(features.punctuation().to_vec()));
        let (ws, wp) = (g.param(self.w_struct), g.param(self.w_punct));
        let s = g.matmul_t(s, ws)?;
        let p = g.matmul_t(p, wp)?;
        g.concat_cols(vec![x, s, p])
    }
}
