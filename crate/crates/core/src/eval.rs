//! Span-level F-score, post-level link/DA/joint scores, depth buckets and
//! thread-level cross-validation splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Span {
    pub class: String,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

/// Spans of an IOB2 sequence. A stray `I-` (no open span of its class) opens
/// a new span, as the IOB1 reading would.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (prefix, class) = match tag.split_once('-') {
            Some((p, c)) if p == "B" || p == "I" => (p, c),
            _ => {
                spans.extend(open.take());
                continue;
            }
        };
        match &mut open {
            Some(s) if prefix == "I" && s.class == class => s.end = i,
            _ => {
                spans.extend(open.take());
                open = Some(Span {
                    class: class.to_string(),
                    start: i,
                    end: i,
                });
            }
        }
    }
    spans.extend(open);
    spans
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            correct,
            predicted,
            gold,
            precision,
            recall,
            f1,
        }
    }
}

/// Exact-match span scores over a corpus, overall and per class.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SpanReport {
    pub overall: Prf,
    pub per_class: BTreeMap<String, Prf>,
}

pub fn span_f1<S: AsRef<str>, T: AsRef<str>>(gold: &[Vec<S>], predicted: &[Vec<T>]) -> Result<SpanReport> {
    if gold.len() != predicted.len() {
        return Err(Error::Input(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            predicted.len()
        )));
    }
    let mut g = BTreeSet::new();
    let mut p = BTreeSet::new();
    for (i, (gs, ps)) in gold.iter().zip(predicted).enumerate() {
        if gs.len() != ps.len() {
            return Err(Error::Input(format!("sentence {i}: tag sequences differ in length")));
        }
        g.extend(extract_spans(gs).into_iter().map(|s| (i, s)));
        p.extend(extract_spans(ps).into_iter().map(|s| (i, s)));
    }
    Ok(span_sets_f1(&g, &p))
}

/// Scores two sets of `(sentence, span)` keys.
pub fn span_sets_f1(gold: &BTreeSet<(usize, Span)>, predicted: &BTreeSet<(usize, Span)>) -> SpanReport {
    let correct: BTreeSet<_> = gold.intersection(predicted).collect();
    let overall = Prf::from_counts(correct.len(), predicted.len(), gold.len());
    let classes: BTreeSet<&str> = gold.iter().chain(predicted).map(|(_, s)| s.class.as_str()).collect();
    let per_class = classes
        .into_iter()
        .map(|c| {
            let count = |it: &mut dyn Iterator<Item = &(usize, Span)>| it.filter(|(_, s)| s.class == c).count();
            let prf = Prf::from_counts(
                count(&mut correct.iter().copied()),
                count(&mut predicted.iter()),
                count(&mut gold.iter()),
            );
            (c.to_string(), prf)
        })
        .collect();
    SpanReport { overall, per_class }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PostPrediction {
    /// 1-based position in the thread.
    pub post: usize,
    pub predicted_link: usize,
    pub predicted_da: String,
    pub gold_links: Vec<usize>,
    pub gold_da: String,
}

impl PostPrediction {
    pub fn link_correct(&self) -> bool {
        self.gold_links.contains(&self.predicted_link)
    }

    pub fn da_correct(&self) -> bool {
        self.predicted_da == self.gold_da
    }
}

/// Micro-averaged post scores in percent. With exactly one prediction per
/// post, micro F equals the share of correct posts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PostMetrics {
    pub posts: usize,
    pub link_correct: usize,
    pub da_correct: usize,
    pub joint_correct: usize,
    pub link: f64,
    pub da: f64,
    pub joint: f64,
}

impl PostMetrics {
    pub fn from_counts(posts: usize, link_correct: usize, da_correct: usize, joint_correct: usize) -> Self {
        let pct = |c: usize| if posts == 0 { 0.0 } else { 100.0 * c as f64 / posts as f64 };
        Self {
            posts,
            link_correct,
            da_correct,
            joint_correct,
            link: pct(link_correct),
            da: pct(da_correct),
            joint: pct(joint_correct),
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self::from_counts(
            self.posts + other.posts,
            self.link_correct + other.link_correct,
            self.da_correct + other.da_correct,
            self.joint_correct + other.joint_correct,
        )
    }
}

pub fn post_metrics<'a>(predictions: impl IntoIterator<Item = &'a PostPrediction>) -> PostMetrics {
    let (mut n, mut l, mut d, mut j) = (0, 0, 0, 0);
    for p in predictions {
        n += 1;
        let (lc, dc) = (p.link_correct(), p.da_correct());
        l += usize::from(lc);
        d += usize::from(dc);
        j += usize::from(lc && dc);
    }
    PostMetrics::from_counts(n, l, d, j)
}

/// Share of threads whose posts are all jointly correct, in percent.
pub fn thread_accuracy(threads: &[Vec<PostPrediction>]) -> f64 {
    if threads.is_empty() {
        return 0.0;
    }
    let ok = threads
        .iter()
        .filter(|t| t.iter().all(|p| p.link_correct() && p.da_correct()))
        .count();
    100.0 * ok as f64 / threads.len() as f64
}

pub const DEPTH_BUCKETS: [(usize, usize); 5] = [(1, 2), (3, 4), (5, 6), (7, 8), (9, usize::MAX)];

pub fn bucket_name((lo, hi): (usize, usize)) -> String {
    if hi == usize::MAX {
        format!("{lo}+")
    } else {
        format!("{lo}-{hi}")
    }
}

pub fn depth_breakdown<'a>(predictions: impl IntoIterator<Item = &'a PostPrediction>) -> Vec<((usize, usize), PostMetrics)> {
    let preds: Vec<&PostPrediction> = predictions.into_iter().collect();
    DEPTH_BUCKETS
        .iter()
        .map(|&(lo, hi)| {
            let m = post_metrics(preds.iter().copied().filter(|p| p.post >= lo && p.post <= hi));
            ((lo, hi), m)
        })
        .collect()
}

/// Partitions `0..n` into `k` test folds after a seeded shuffle; fold sizes
/// differ by at most one.
pub fn stratified_kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::config("folds", format!("must lie in 1..={n}, got {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, t) in order.into_iter().enumerate() {
        folds[i % k].push(t);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Thread-task evaluation over one or more folds.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ThreadReport {
    pub overall: PostMetrics,
    pub thread_accuracy: f64,
    pub buckets: Vec<(String, PostMetrics)>,
    pub folds: Vec<PostMetrics>,
}

impl ThreadReport {
    /// `folds[f]` holds the per-thread predictions of test fold `f`.
    pub fn new(folds: &[Vec<Vec<PostPrediction>>]) -> Self {
        let all: Vec<&PostPrediction> = folds.iter().flatten().flatten().collect();
        let threads: Vec<Vec<PostPrediction>> = folds.iter().flatten().cloned().collect();
        Self {
            overall: post_metrics(all.iter().copied()),
            thread_accuracy: thread_accuracy(&threads),
            buckets: depth_breakdown(all.iter().copied())
                .into_iter()
                .map(|(b, m)| (bucket_name(b), m))
                .collect(),
            folds: folds.iter().map(|f| post_metrics(f.iter().flatten())).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.overall;
        let _ = writeln!(s, "posts\t{}", m.posts);
        let _ = writeln!(s, "link_f\t{:.2}", m.link);
        let _ = writeln!(s, "da_f\t{:.2}", m.da);
        let _ = writeln!(s, "joint_f\t{:.2}", m.joint);
        let _ = writeln!(s, "thread_acc\t{:.2}", self.thread_accuracy);
        let _ = writeln!(s, "\ndepth\tposts\tlink\tda\tjoint");
        for (name, b) in &self.buckets {
            let _ = writeln!(s, "{name}\t{}\t{:.2}\t{:.2}\t{:.2}", b.posts, b.link, b.da, b.joint);
        }
        if self.folds.len() > 1 {
            let _ = writeln!(s, "\nfold\tposts\tlink\tda\tjoint");
            for (i, f) in self.folds.iter().enumerate() {
                let _ = writeln!(s, "{}\t{}\t{:.2}\t{:.2}\t{:.2}", i + 1, f.posts, f.link, f.da, f.joint);
            }
        }
        s
    }
}

/// Macro average of link/DA/joint/thread accuracy across runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RunAverage {
    pub runs: usize,
    pub link: f64,
    pub da: f64,
    pub joint: f64,
    pub thread_accuracy: f64,
}

pub fn macro_average(reports: &[ThreadReport]) -> RunAverage {
    let n = reports.len().max(1) as f64;
    let sum = |f: &dyn Fn(&ThreadReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    RunAverage {
        runs: reports.len(),
        link: sum(&|r| r.overall.link),
        da: sum(&|r| r.overall.da),
        joint: sum(&|r| r.overall.joint),
        thread_accuracy: sum(&|r| r.thread_accuracy),
    }
}

pub fn span_report_text(r: &SpanReport) -> String {
    let mut s = String::new();
    let o = &r.overall;
    let _ = writeln!(
        s,
        "overall\tgold={}\tpred={}\tcorrect={}\tP={:.2}\tR={:.2}\tF={:.2}",
        o.gold,
        o.predicted,
        o.correct,
        100.0 * o.precision,
        100.0 * o.recall,
        100.0 * o.f1
    );
    for (c, p) in &r.per_class {
        let _ = writeln!(
            s,
            "{c}\tgold={}\tpred={}\tcorrect={}\tP={:.2}\tR={:.2}\tF={:.2}",
            p.gold,
            p.predicted,
            p.correct,
            100.0 * p.precision,
            100.0 * p.recall,
            100.0 * p.f1
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn span(c: &str, s: usize, e: usize) -> Span {
        Span {
            class: c.into(),
            start: s,
            end: e,
        }
    }

    #[test]
    fn span_extraction_examples() {
        assert_eq!(
            extract_spans(&["B-ORG", "I-ORG", "O", "B-LOC"]),
            vec![span("ORG", 0, 1), span("LOC", 3, 3)]
        );
        assert!(extract_spans(&["O", "O"]).is_empty());
        assert_eq!(extract_spans(&["B-ORG", "B-ORG"]), vec![span("ORG", 0, 0), span("ORG", 1, 1)]);
    }

    #[test]
    fn span_f1_examples() {
        let g = vec![vec!["B-A", "O", "O"]];
        assert_eq!(span_f1(&g, &g).unwrap().overall.f1, 1.0);
        let p = vec![vec!["B-A", "O", "B-B"]];
        let r = span_f1(&g, &p).unwrap().overall;
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        let none = vec![vec!["O", "O", "O"]];
        assert_eq!(span_f1(&g, &none).unwrap().overall.f1, 0.0);
    }

    fn pred(post: usize, link: usize, da: &str, gold: &[usize], gold_da: &str) -> PostPrediction {
        PostPrediction {
            post,
            predicted_link: link,
            predicted_da: da.into(),
            gold_links: gold.to_vec(),
            gold_da: gold_da.into(),
        }
    }

    #[test]
    fn post_metric_examples() {
        let all = [pred(1, 0, "q", &[0], "q"), pred(2, 1, "a", &[1], "a")];
        let m = post_metrics(&all);
        assert_eq!((m.link, m.da, m.joint), (100.0, 100.0, 100.0));
        let one = [pred(1, 0, "a", &[0], "q")];
        let m = post_metrics(&one);
        assert_eq!((m.link, m.da, m.joint), (100.0, 0.0, 0.0));
        assert!(pred(4, 3, "x", &[1, 3], "x").link_correct());
    }

    #[test]
    fn depth_buckets_partition_posts() {
        let preds: Vec<PostPrediction> = (1..=12).map(|i| pred(i, 0, "a", &[i % 2], "a")).collect();
        let buckets = depth_breakdown(&preds);
        assert_eq!(buckets[4].1.posts, 4);
        let total = buckets.iter().fold(PostMetrics::default(), |a, (_, m)| a.merge(m));
        assert_eq!(total, post_metrics(&preds));
        let two = [pred(1, 0, "a", &[0], "a"), pred(2, 0, "a", &[1], "a")];
        assert_eq!(depth_breakdown(&two)[0].1.posts, 2);
    }

    #[test]
    fn kfold_partitions() {
        let folds = stratified_kfold(10, 10, 3).unwrap();
        assert!(folds.iter().all(|f| f.len() == 1));
        let folds = stratified_kfold(23, 5, 3).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
        assert_eq!(folds, stratified_kfold(23, 5, 3).unwrap());
        assert!(matches!(stratified_kfold(3, 4, 0), Err(Error::Config { .. })));
    }

    fn tags() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["O", "B-A", "I-A", "B-B", "I-B"]), 1..10)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn swapping_gold_and_predicted_swaps_p_and_r(g in prop::collection::vec(tags(), 1..5), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<Vec<String>> = g.iter().map(|s| {
                let mut s = s.clone();
                s.shuffle(&mut rng);
                s
            }).collect();
            let a = span_f1(&g, &p).unwrap().overall;
            let b = span_f1(&p, &g).unwrap().overall;
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }

        #[test]
        fn joint_never_exceeds_link_or_da(v in prop::collection::vec((0usize..3, 0usize..3, 0usize..2, 0usize..2), 1..30)) {
            let preds: Vec<PostPrediction> = v.iter().enumerate().map(|(i, &(pl, gl, pd, gd))| {
                pred(i + 1, pl, &pd.to_string(), &[gl], &gd.to_string())
            }).collect();
            let m = post_metrics(&preds);
            prop_assert!(m.joint <= m.link.min(m.da));
        }
    }
}
