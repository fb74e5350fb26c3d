//! Corpus readers and writers, and their conversion into model instances.

pub mod checkpoint;
pub mod conll;
pub mod synthetic;
pub mod threads;

use std::collections::HashMap;

pub use checkpoint::{check_labels, load_checkpoint, save_checkpoint};
pub use conll::{label_inventory, parse_conll, read_conll, write_conll, Sentence};
pub use synthetic::{generate_synthetic, synthetic_labels, SyntheticConfig, SyntheticSequence};
pub use threads::{da_inventory, parse_threads, read_threads, write_threads, Post, Thread};

use crate::encoders::{tokenize_text, LexicalFeatures, PostFeatures, Pretrained, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Inputs, Instance, PostInput, Segment};

fn label_ids(labels: &[String], tags: &[String]) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    tags.iter()
        .map(|t| {
            index
                .get(t.as_str())
                .copied()
                .ok_or_else(|| Error::LabelMismatch(format!("label `{t}` is not in the model inventory {labels:?}")))
        })
        .collect()
}

/// Training tokens, then any pretrained tokens not already present.
pub fn token_vocab<'a>(tokens: impl IntoIterator<Item = &'a str>, pretrained: Option<&Pretrained>) -> Vocabulary {
    let mut v = Vocabulary::from_tokens(tokens);
    if let Some(p) = pretrained {
        for t in &p.order {
            v.insert(t);
        }
    }
    v
}

pub fn sentence_vocab(sentences: &[Sentence], pretrained: Option<&Pretrained>) -> Vocabulary {
    token_vocab(sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)), pretrained)
}

pub fn thread_vocab(threads: &[Thread], pretrained: Option<&Pretrained>) -> Vocabulary {
    let words: Vec<String> = threads
        .iter()
        .flat_map(|t| t.posts.iter())
        .flat_map(|p| tokenize_text(&p.title).into_iter().chain(tokenize_text(&p.text)))
        .collect();
    token_vocab(words.iter().map(String::as_str), pretrained)
}

/// Groups consecutive sentences of a document into one instance whose memory
/// spans the whole document; each sentence is one segment.
pub fn sentence_instances(sentences: &[Sentence], vocab: &Vocabulary, labels: &[String]) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < sentences.len() {
        let doc = sentences[i].doc;
        let mut j = i;
        while j < sentences.len() && sentences[j].doc == doc {
            j += 1;
        }
        let group = &sentences[i..j];
        let tokens: Vec<&str> = group.iter().flat_map(|s| s.tokens.iter().map(String::as_str)).collect();
        let mut segments = Vec::with_capacity(group.len());
        let mut start = 0;
        for s in group {
            segments.push(Segment {
                start,
                labels: label_ids(labels, &s.tags)?,
                links: vec![None; s.len()],
            });
            start += s.len();
        }
        out.push(Instance {
            inputs: Inputs::Tokens {
                ids: vocab.ids(&tokens),
                lexical: LexicalFeatures::matrix(&tokens)?,
            },
            segments,
        });
        i = j;
    }
    Ok(out)
}

/// One instance per sequence with the antecedent position as gold slot.
pub fn synthetic_instances(
    seqs: &[SyntheticSequence],
    vocab: &Vocabulary,
    labels: &[String],
) -> Result<Vec<Instance>> {
    seqs.iter()
        .map(|s| {
            Ok(Instance {
                inputs: Inputs::Tokens {
                    ids: vocab.ids(&s.tokens),
                    lexical: LexicalFeatures::matrix(&s.tokens)?,
                },
                segments: vec![Segment {
                    start: 0,
                    labels: label_ids(labels, &s.tags)?,
                    links: s.antecedents.clone(),
                }],
            })
        })
        .collect()
}

/// Attention slot of a gold link (`0` = head, `j` = `j`-th post).
pub fn link_to_slot(link: usize, dummy_slot: bool) -> Option<usize> {
    if dummy_slot {
        Some(link)
    } else {
        link.checked_sub(1)
    }
}

/// Inverse of [`link_to_slot`]; no slot means the head.
pub fn slot_to_link(slot: Option<usize>, dummy_slot: bool) -> usize {
    match slot {
        Some(s) if dummy_slot => s,
        Some(s) => s + 1,
        None => 0,
    }
}

pub fn thread_instance(thread: &Thread, vocab: &Vocabulary, labels: &[String], dummy_slot: bool) -> Result<Instance> {
    thread.validate()?;
    let n = thread.posts.len();
    let initiator = thread.initiator();
    let posts = thread
        .posts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let raw = format!("{} {}", p.title, p.text);
            PostInput {
                title: vocab.ids(&tokenize_text(&p.title)),
                text: vocab.ids(&tokenize_text(&p.text)),
                features: PostFeatures::compute(i, n, p.author == initiator, &raw),
            }
        })
        .collect::<Vec<_>>();
    if let Some(i) = posts.iter().position(|p| p.title.is_empty() && p.text.is_empty()) {
        return Err(Error::Validation {
            thread: thread.id.clone(),
            post: i + 1,
            reason: "post has no words in title or text".into(),
        });
    }
    let das: Vec<String> = thread.posts.iter().map(|p| p.da.clone()).collect();
    Ok(Instance {
        inputs: Inputs::Posts(posts),
        segments: vec![Segment {
            start: 0,
            labels: label_ids(labels, &das)?,
            links: thread
                .posts
                .iter()
                .map(|p| link_to_slot(p.target_link(), dummy_slot))
                .collect(),
        }],
    })
}

pub fn thread_instances(threads: &[Thread], vocab: &Vocabulary, labels: &[String], dummy_slot: bool) -> Result<Vec<Instance>> {
    threads.iter().map(|t| thread_instance(t, vocab, labels, dummy_slot)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_share_one_instance() {
        let s = parse_conll("A B-X\nb O\n\nc O\n\n-DOCSTART- O\n\nd I-X\n", "f").unwrap();
        let labels = label_inventory(&s);
        let v = sentence_vocab(&s, None);
        let inst = sentence_instances(&s, &v, &labels).unwrap();
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].inputs.len(), 3);
        assert_eq!(inst[0].segments[1].start, 2);
        assert_eq!(inst[1].segments[0].labels, vec![1]);
    }

    #[test]
    fn unknown_label_is_a_mismatch() {
        let s = parse_conll("a B-Y\n", "f").unwrap();
        let v = sentence_vocab(&s, None);
        let err = sentence_instances(&s, &v, &["O".into()]).unwrap_err();
        assert!(matches!(err, Error::LabelMismatch(_)));
    }

    #[test]
    fn thread_links_map_to_slots() {
        let line = r#"{"id":"t","posts":[{"author":"a","title":"Help?","text":"x","links":[0],"da":"q"},{"author":"b","text":"see www.x.org","links":[1],"da":"a"},{"author":"a","text":"thanks!","links":[1,2],"da":"c"}]}"#;
        let t = parse_threads(line, "f").unwrap();
        let labels = da_inventory(&t);
        let v = thread_vocab(&t, None);
        let inst = thread_instance(&t[0], &v, &labels, true).unwrap();
        assert_eq!(inst.segments[0].links, vec![Some(0), Some(1), Some(2)]);
        let Inputs::Posts(posts) = &inst.inputs else { panic!() };
        assert_eq!(posts[0].features.structural(), [1.0, 1.0 / 3.0]);
        assert_eq!(posts[1].features.punctuation(), [0.0, 0.0, 1.0]);
        assert!(posts[2].features.initiator);
        let inst = thread_instance(&t[0], &v, &labels, false).unwrap();
        assert_eq!(inst.segments[0].links, vec![None, Some(0), Some(1)]);
        assert_eq!(slot_to_link(Some(1), false), 2);
        assert_eq!(slot_to_link(None, false), 0);
    }
}
