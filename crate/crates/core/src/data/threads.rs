//! Line-delimited thread records:
//!
//! ```text
//! {"id": "t1", "posts": [{"author": "ann", "title": "...", "text": "...", "links": [0], "da": "question"}, ...]}
//! ```
//!
//! Link `0` is the virtual head; link `j >= 1` is the `j`-th post (1-based).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub author: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub text: String,
    pub links: Vec<usize>,
    pub da: String,
}

impl Post {
    /// Link used as the training target: the most recent linked post.
    pub fn target_link(&self) -> usize {
        self.links.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thread {
    pub id: String,
    pub posts: Vec<Post>,
}

impl Thread {
    pub fn validate(&self) -> Result<()> {
        let fail = |post: usize, reason: String| Error::Validation {
            thread: self.id.clone(),
            post,
            reason,
        };
        if self.posts.is_empty() {
            return Err(fail(0, "thread has no posts".into()));
        }
        for (i, p) in self.posts.iter().enumerate() {
            let n = i + 1;
            if p.links.is_empty() {
                return Err(fail(n, "no gold link".into()));
            }
            if let Some(&l) = p.links.iter().find(|&&l| l >= n) {
                return Err(fail(n, format!("link {l} does not point to an earlier post")));
            }
            if p.da.trim().is_empty() {
                return Err(fail(n, "empty dialogue act".into()));
            }
        }
        Ok(())
    }

    pub fn initiator(&self) -> &str {
        &self.posts[0].author
    }
}

pub fn read_threads(path: &Path) -> Result<Vec<Thread>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    parse_threads(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn parse_threads(text: &str, source: &str) -> Result<Vec<Thread>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: Thread = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_threads(threads: &[Thread]) -> String {
    let mut out = String::new();
    for t in threads {
        out.push_str(&serde_json::to_string(t).expect("thread serialises"));
        out.push('\n');
    }
    out
}

/// Dialogue-act labels in sorted order.
pub fn da_inventory<'a>(threads: impl IntoIterator<Item = &'a Thread>) -> Vec<String> {
    let set: std::collections::BTreeSet<&str> = threads
        .into_iter()
        .flat_map(|t| t.posts.iter().map(|p| p.da.as_str()))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(links: &[usize]) -> String {
        format!(r#"{{"author":"a","title":"t","text":"x","links":{links:?},"da":"q"}}"#)
    }

    #[test]
    fn single_post_links_to_head() {
        let line = format!(r#"{{"id":"t","posts":[{}]}}"#, post(&[0]));
        let t = parse_threads(&line, "f").unwrap();
        assert_eq!(t[0].posts[0].links, [0]);
    }

    #[test]
    fn multi_headed_post_keeps_all_links() {
        let line = format!(r#"{{"id":"t","posts":[{},{},{}]}}"#, post(&[0]), post(&[1]), post(&[1, 2]));
        let t = parse_threads(&line, "f").unwrap();
        assert_eq!(t[0].posts[2].links, [1, 2]);
        assert_eq!(t[0].posts[2].target_link(), 2);
    }

    #[test]
    fn self_link_is_rejected() {
        let line = format!(r#"{{"id":"t9","posts":[{},{}]}}"#, post(&[0]), post(&[2]));
        let e = parse_threads(&line, "f").unwrap_err();
        assert!(matches!(e, Error::Validation { ref thread, post: 2, .. } if thread == "t9"));
    }

    #[test]
    fn round_trip() {
        let line = format!(r#"{{"id":"t","posts":[{},{}]}}"#, post(&[0]), post(&[0, 1]));
        let t = parse_threads(&line, "f").unwrap();
        assert_eq!(parse_threads(&write_threads(&t), "g").unwrap(), t);
    }
}
