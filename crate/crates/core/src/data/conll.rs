//! CoNLL column format: one token per line, token first, tag last, blank
//! lines between sentences, `-DOCSTART-` lines between documents.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DOCSTART: &str = "-DOCSTART-";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    /// IOB2 tags.
    pub tags: Vec<String>,
    /// Middle columns (POS, chunk, ...) per token; carried through but unused.
    pub extra: Vec<Vec<String>>,
    pub doc: usize,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn read_conll(path: &Path) -> Result<Vec<Sentence>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    parse_conll(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn parse_conll(text: &str, source: &str) -> Result<Vec<Sentence>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: source.to_string(),
        line,
        reason,
    };
    let mut out = Vec::new();
    let mut doc = 0;
    let mut width: Option<usize> = None;
    let mut cur = Sentence {
        tokens: Vec::new(),
        tags: Vec::new(),
        extra: Vec::new(),
        doc,
    };
    let flush = |cur: &mut Sentence, doc: usize, out: &mut Vec<Sentence>| {
        if !cur.is_empty() {
            normalize_iob(&mut cur.tags);
            out.push(std::mem::replace(
                cur,
                Sentence {
                    tokens: Vec::new(),
                    tags: Vec::new(),
                    extra: Vec::new(),
                    doc,
                },
            ));
        }
        cur.doc = doc;
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut cur, doc, &mut out);
            continue;
        }
        if cols[0] == DOCSTART {
            flush(&mut cur, doc, &mut out);
            doc += 1;
            cur.doc = doc;
            continue;
        }
        if cols.len() < 2 {
            return Err(err(lineno, "expected at least a token and a tag column".into()));
        }
        match width {
            Some(w) if w != cols.len() => {
                return Err(err(lineno, format!("expected {w} columns, found {}", cols.len())));
            }
            None => width = Some(cols.len()),
            _ => {}
        }
        let tag = cols[cols.len() - 1];
        check_tag(tag).map_err(|reason| err(lineno, reason))?;
        cur.tokens.push(cols[0].to_string());
        cur.tags.push(tag.to_string());
        cur.extra
            .push(cols[1..cols.len() - 1].iter().map(|s| s.to_string()).collect());
    }
    flush(&mut cur, doc, &mut out);
    Ok(out)
}

fn check_tag(tag: &str) -> std::result::Result<(), String> {
    if tag == "O" {
        return Ok(());
    }
    match tag.split_once('-') {
        Some(("B" | "I", class)) if !class.is_empty() => Ok(()),
        _ => Err(format!("tag `{tag}` is not O, B-<class> or I-<class>")),
    }
}

/// Rewrites IOB1 tags in place so that every span opens with `B-`.
pub fn normalize_iob(tags: &mut [String]) {
    let mut prev_class: Option<String> = None;
    for tag in tags.iter_mut() {
        if tag == "O" {
            prev_class = None;
            continue;
        }
        let (prefix, class) = tag.split_once('-').expect("validated tag");
        let class = class.to_string();
        if prefix == "I" && prev_class.as_deref() != Some(&class) {
            *tag = format!("B-{class}");
        }
        prev_class = Some(class);
    }
}

/// Serialises sentences so that `parse_conll` yields them back unchanged.
pub fn write_conll(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    let mut doc = 0;
    for s in sentences {
        while doc < s.doc {
            doc += 1;
            let width = s.extra.first().map_or(0, Vec::len);
            let mut line = DOCSTART.to_string();
            for _ in 0..width {
                line.push_str(" -X-");
            }
            let _ = writeln!(out, "{line} O\n");
        }
        for i in 0..s.len() {
            out.push_str(&s.tokens[i]);
            for c in s.extra.get(i).into_iter().flatten() {
                out.push(' ');
                out.push_str(c);
            }
            out.push(' ');
            out.push_str(&s.tags[i]);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// `O` followed by every `B-`/`I-` pair of the classes present, sorted.
pub fn label_inventory<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Vec<String> {
    let mut classes = std::collections::BTreeSet::new();
    for s in sentences {
        for t in &s.tags {
            if let Some((_, c)) = t.split_once('-') {
                classes.insert(c.to_string());
            }
        }
    }
    let mut labels = vec!["O".to_string()];
    for c in classes {
        labels.push(format!("B-{c}"));
        labels.push(format!("I-{c}"));
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_fixture() {
        let s = parse_conll("EU NNP B-ORG\n. . O\n\n", "f").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].tokens, ["EU", "."]);
        assert_eq!(s[0].tags, ["B-ORG", "O"]);
    }

    #[test]
    fn docstart_increments_document() {
        let s = parse_conll("-DOCSTART- -X- O\n\nA x O\n\n-DOCSTART- -X- O\n\nB x O\n", "f").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].doc, s[1].doc), (1, 2));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_conll("", "f").unwrap().is_empty());
    }

    #[test]
    fn ragged_and_bad_tags_are_parse_errors() {
        let e = parse_conll("a NN O\nb O\n", "f").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_conll("a NN O\n\nb NN X-PER\n", "f").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn iob1_is_normalized() {
        let s = parse_conll("a I-PER\nb I-PER\nc I-LOC\nd O\ne I-LOC\n", "f").unwrap();
        assert_eq!(s[0].tags, ["B-PER", "I-PER", "B-LOC", "O", "B-LOC"]);
    }

    #[test]
    fn inventory_pairs_prefixes() {
        let s = parse_conll("a B-PER\nb B-LOC\n", "f").unwrap();
        assert_eq!(label_inventory(&s), ["O", "B-LOC", "I-LOC", "B-PER", "I-PER"]);
    }
}
