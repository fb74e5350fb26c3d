//! The full tagger: inputs → bi-GRU memories → attention read → CRF (or
//! per-step softmax) over the final step representations.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Mode, NodeId, ParamId, ParamStore, Tensor};
use crate::config::{Decoder, Task, TrainConfig};
use crate::crf::{viterbi_decode, CrfParams};
use crate::encoders::{Embedding, LexicalFeatures, PostEncoder, PostFeatures, Pretrained, Vocabulary};
use crate::error::{Error, Result};
use crate::memory::{memnn_classify, stack, MemoryEncoder, ReadConfig};

/// One post of a thread, already mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PostInput {
    pub title: Vec<usize>,
    pub text: Vec<usize>,
    pub features: PostFeatures,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// A token stream (a whole document for NER).
    Tokens { ids: Vec<usize>, lexical: Tensor },
    Posts(Vec<PostInput>),
}

impl Inputs {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Tokens { ids, .. } => ids.len(),
            Inputs::Posts(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A run of consecutive steps decoded as one CRF chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub labels: Vec<usize>,
    /// Gold attention slot per step, when supervised.
    pub links: Vec<Option<usize>>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }
}

/// Memory scope plus the chains tagged against it.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub inputs: Inputs,
    pub segments: Vec<Segment>,
}

impl Instance {
    pub fn validate(&self, num_labels: usize) -> Result<()> {
        let n = self.inputs.len();
        if n == 0 {
            return Err(Error::Input("instance has no steps".into()));
        }
        for s in &self.segments {
            if s.is_empty() || s.range().end > n {
                return Err(Error::Input(format!("segment {:?} outside 0..{n}", s.range())));
            }
            if s.links.len() != s.len() {
                return Err(Error::Input("segment links and labels differ in length".into()));
            }
            if let Some(&bad) = s.labels.iter().find(|&&y| y >= num_labels) {
                return Err(Error::Input(format!("label index {bad} out of range for {num_labels} labels")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPrediction {
    pub labels: Vec<usize>,
    /// Highest-attention slot strictly before the step's own slot.
    pub links: Vec<Option<usize>>,
    /// Highest-attention slot over everything the step sees.
    pub attention_argmax: Vec<usize>,
}

/// Parameters and metadata of a trained or freshly initialised model.
#[derive(Clone, Debug)]
pub struct MeCrf {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub store: ParamStore,
    pub frozen_embeddings: bool,
    embedding: Embedding,
    post_encoder: Option<PostEncoder>,
    memory_in: MemoryEncoder,
    memory_out: Option<MemoryEncoder>,
    crf: Option<CrfParams>,
    w_da: Option<ParamId>,
}

struct Forward {
    /// Per segment: final representations and first-hop attention.
    blocks: Vec<(NodeId, NodeId, Vec<usize>, Vec<usize>)>,
}

impl MeCrf {
    /// Builds a model with parameters drawn from `config.seed`.
    pub fn new(config: TrainConfig, vocab: Vocabulary, labels: Vec<String>, pretrained: Option<&Pretrained>) -> Result<Self> {
        config.validate()?;
        if labels.is_empty() {
            return Err(Error::Input("empty label inventory".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let embedding = Embedding::init(
            &mut store,
            "embedding",
            &vocab,
            config.embedding_dim,
            pretrained,
            config.fixed_embeddings,
            &mut rng,
        )?;
        let frozen_embeddings = embedding.unk.is_some();
        let (post_encoder, input_dim) = match config.task {
            Task::Ner => {
                let lex = if config.lexical_features { LexicalFeatures::WIDTH } else { 0 };
                (None, config.embedding_dim + lex)
            }
            Task::Thread => {
                let enc = PostEncoder::init(
                    &mut store,
                    "post",
                    config.embedding_dim,
                    config.encoder_hidden,
                    config.struct_dim,
                    config.punct_dim,
                    &mut rng,
                )?;
                let d = enc.output_dim(&store);
                (Some(enc), d)
            }
        };
        let memory_in = MemoryEncoder::init(&mut store, "memory.input", input_dim, config.hidden, &mut rng)?;
        let memory_out = if config.tie_memories {
            None
        } else {
            Some(MemoryEncoder::init(&mut store, "memory.output", input_dim, config.hidden, &mut rng)?)
        };
        let (crf, w_da) = match config.decoder {
            Decoder::Crf => (Some(CrfParams::init(&mut store, "crf", labels.len(), config.hidden, &mut rng)?), None),
            Decoder::Softmax => (None, Some(store.add_glorot("softmax.w_da", labels.len(), config.hidden, &mut rng)?)),
        };
        Ok(Self {
            config,
            vocab,
            labels,
            store,
            frozen_embeddings,
            embedding,
            post_encoder,
            memory_in,
            memory_out,
            crf,
            w_da,
        })
    }

    /// Rebuilds the architecture and replaces every tensor by name.
    pub fn from_tensors(
        config: TrainConfig,
        vocab: Vocabulary,
        labels: Vec<String>,
        frozen_embeddings: bool,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let pretrained = frozen_embeddings.then(|| Pretrained {
            dim: config.embedding_dim,
            ..Pretrained::default()
        });
        let mut model = Self::new(config, vocab, labels, pretrained.as_ref())?;
        if tensors.len() != model.store.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                model.store.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Integrity(format!("unexpected tensor `{name}`")))?;
            if model.store.get(id).shape() != t.shape() {
                return Err(Error::Integrity(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = t;
        }
        Ok(model)
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self) -> HashMap<&str, usize> {
        self.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect()
    }

    pub fn transitions(&self) -> Option<ParamId> {
        self.crf.map(|c| c.transitions)
    }

    pub fn read_config(&self) -> ReadConfig {
        ReadConfig {
            hops: self.config.hops,
            dummy_slot: self.config.dummy_slot,
            window: self.config.window(),
            ablate_read: self.config.ablate_read,
        }
    }

    fn step_inputs(&self, g: &mut Graph<'_>, inputs: &Inputs) -> Result<NodeId> {
        match (inputs, self.post_encoder) {
            (Inputs::Tokens { ids, lexical }, None) => {
                let x = self.embedding.embed(g, ids)?;
                if self.config.lexical_features {
                    if lexical.shape() != [ids.len(), LexicalFeatures::WIDTH] {
                        return Err(Error::Input("lexical feature matrix does not match tokens".into()));
                    }
                    let flags = g.constant(lexical.clone());
                    g.concat_cols(vec![x, flags])
                } else {
                    Ok(x)
                }
            }
            (Inputs::Posts(posts), Some(enc)) => {
                let mut rows = Vec::with_capacity(posts.len());
                for post in posts {
                    let title = (!post.title.is_empty())
                        .then(|| self.embedding.embed(g, &post.title))
                        .transpose()?;
                    let text = (!post.text.is_empty())
                        .then(|| self.embedding.embed(g, &post.text))
                        .transpose()?;
                    let x = enc.encode(g, title, text)?;
                    rows.push(enc.featurize(g, x, &post.features)?);
                }
                stack(g, rows)
            }
            (Inputs::Tokens { .. }, Some(_)) => Err(Error::Input("thread model given a token stream".into())),
            (Inputs::Posts(_), None) => Err(Error::Input("token model given thread posts".into())),
        }
    }

    fn forward_blocks(&self, g: &mut Graph<'_>, inst: &Instance, segments: &[usize]) -> Result<Forward> {
        let x = self.step_inputs(g, &inst.inputs)?;
        let keep = self.config.keep_rate;
        let m = self.memory_in.build(g, x, keep)?;
        let c = match &self.memory_out {
            Some(enc) => enc.build(g, x, keep)?,
            None => m,
        };
        let read = self.read_config();
        let mut blocks = Vec::with_capacity(segments.len());
        for &si in segments {
            let seg = inst
                .segments
                .get(si)
                .ok_or_else(|| Error::Input(format!("segment {si} does not exist")))?;
            let r = read.read_block(g, m, c, seg.range())?;
            blocks.push((r.output, r.attention[0], r.columns, r.step_slots));
        }
        Ok(Forward { blocks })
    }

    /// Scalar training loss over the chosen segments.
    pub fn loss_node(&self, g: &mut Graph<'_>, inst: &Instance, segments: &[usize], frozen: bool) -> Result<NodeId> {
        inst.validate(self.num_labels())?;
        if segments.is_empty() {
            return Err(Error::Input("no segments selected".into()));
        }
        let fwd = self.forward_blocks(g, inst, segments)?;
        let mut tag_losses = Vec::new();
        let mut link_losses = Vec::new();
        for (&si, (u, attention, columns, _)) in segments.iter().zip(&fwd.blocks) {
            let seg = &inst.segments[si];
            let tag = match (self.crf, self.w_da) {
                (Some(crf), _) => {
                    let p = crf.emissions(g, *u)?;
                    crf.nll(g, p, &seg.labels, frozen)?
                }
                (None, Some(w)) => {
                    let w = g.param(w);
                    let probs = memnn_classify(g, *u, w)?;
                    let picks = seg.labels.iter().copied().enumerate().collect();
                    g.neg_log_pick(probs, picks)?
                }
                (None, None) => unreachable!("model has a decoder"),
            };
            tag_losses.push(tag);
            if self.config.link_supervision {
                let slot_col: HashMap<usize, usize> = columns.iter().enumerate().map(|(c, &s)| (s, c)).collect();
                let picks: Vec<(usize, usize)> = seg
                    .links
                    .iter()
                    .enumerate()
                    .filter_map(|(i, l)| l.and_then(|s| slot_col.get(&s).map(|&c| (i, c))))
                    .collect();
                if !picks.is_empty() {
                    link_losses.push(g.neg_log_pick(*attention, picks)?);
                }
            }
        }
        let tag = sum_nodes(g, tag_losses)?;
        if !self.config.link_supervision {
            return Ok(tag);
        }
        let w = self.config.tagging_weight();
        let tag = g.scale(tag, w);
        match sum_nodes(g, link_losses) {
            Ok(link) => {
                let link = g.scale(link, 1.0 - w);
                g.add(tag, link)
            }
            Err(_) => Ok(tag),
        }
    }

    /// Loss and gradients for one unit of work against `store` (which must
    /// have this model's layout).
    pub fn unit_gradients(
        &self,
        store: &ParamStore,
        inst: &Instance,
        segments: &[usize],
        frozen: bool,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(store);
        let loss = self.loss_node(&mut g, inst, segments, frozen)?;
        g.forward(&HashMap::new(), mode, rng)?;
        let value = g.value(loss)?.item();
        Ok((value, g.backward(loss)?))
    }

    /// Evaluation-mode loss without gradients.
    pub fn loss(&self, inst: &Instance, segments: &[usize], frozen: bool) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let loss = self.loss_node(&mut g, inst, segments, frozen)?;
        Ok(g.evaluate(loss)?.item())
    }

    /// Viterbi (or per-step argmax) labels and attention readouts for every
    /// segment. With `frozen` the transitions read as zero.
    pub fn predict(&self, inst: &Instance, frozen: bool) -> Result<Vec<SegmentPrediction>> {
        inst.validate(self.num_labels())?;
        let mut g = Graph::new(&self.store);
        let all: Vec<usize> = (0..inst.segments.len()).collect();
        if all.is_empty() {
            return Ok(Vec::new());
        }
        let fwd = self.forward_blocks(&mut g, inst, &all)?;
        let mut scores = Vec::new();
        for (u, ..) in &fwd.blocks {
            scores.push(match (self.crf, self.w_da) {
                (Some(crf), _) => crf.emissions(&mut g, *u)?,
                (None, Some(w)) => {
                    let w = g.param(w);
                    g.matmul_t(*u, w)?
                }
                (None, None) => unreachable!("model has a decoder"),
            });
        }
        g.forward(&HashMap::new(), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut out = Vec::with_capacity(all.len());
        for ((_, attention, columns, step_slots), score) in fwd.blocks.iter().zip(scores) {
            let score = g.value(score)?;
            let labels = match self.crf {
                Some(crf) => viterbi_decode(score, &crf.effective_transitions(&self.store, frozen))?,
                None => (0..score.rows()).map(|r| argmax(score.row(r))).collect(),
            };
            let p = g.value(*attention)?;
            let mut links = Vec::with_capacity(step_slots.len());
            let mut attention_argmax = Vec::with_capacity(step_slots.len());
            for (r, &own) in step_slots.iter().enumerate() {
                let row = p.row(r);
                attention_argmax.push(columns[argmax(row)]);
                let before: Vec<(usize, f64)> = columns
                    .iter()
                    .zip(row)
                    .filter(|(&s, _)| s < own)
                    .map(|(&s, &v)| (s, v))
                    .collect();
                links.push(
                    before
                        .iter()
                        .fold(None::<(usize, f64)>, |best, &(s, v)| match best {
                            Some((_, bv)) if bv >= v => best,
                            _ => Some((s, v)),
                        })
                        .map(|(s, _)| s),
                );
            }
            out.push(SegmentPrediction {
                labels,
                links,
                attention_argmax,
            });
        }
        Ok(out)
    }
}

fn sum_nodes(g: &mut Graph<'_>, nodes: Vec<NodeId>) -> Result<NodeId> {
    let mut it = nodes.into_iter();
    let first = it.next().ok_or_else(|| Error::Input("nothing to sum".into()))?;
    it.try_fold(first, |acc, n| g.add(acc, n))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
