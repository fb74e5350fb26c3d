//! Task-level entry points: build vocabularies and instances, train, decode
//! and score.

use std::collections::BTreeSet;

use crate::config::{Task, TrainConfig};
use crate::data::{
    self, da_inventory, label_inventory, sentence_instances, sentence_vocab, slot_to_link, synthetic_instances,
    thread_instances, thread_vocab, Sentence, SyntheticSequence, Thread,
};
use crate::encoders::{Pretrained, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{post_metrics, span_f1, stratified_kfold, PostPrediction, SpanReport, ThreadReport};
use crate::model::MeCrf;
use crate::training::{DevMetrics, TrainOutcome, Trainer};

fn require_task(config: &TrainConfig, task: Task) -> Result<()> {
    if config.task != task {
        return Err(Error::config("task", format!("expected `{task}`, config says `{}`", config.task)));
    }
    Ok(())
}

/// Predicted IOB2 tags for every sentence.
pub fn tag_sentences(model: &MeCrf, sentences: &[Sentence]) -> Result<Vec<Vec<String>>> {
    let instances = sentence_instances(sentences, &model.vocab, &model.labels)?;
    let mut out = Vec::with_capacity(sentences.len());
    for inst in &instances {
        for seg in model.predict(inst, false)? {
            out.push(seg.labels.iter().map(|&y| model.labels[y].clone()).collect());
        }
    }
    Ok(out)
}

pub fn evaluate_sentences(model: &MeCrf, sentences: &[Sentence]) -> Result<SpanReport> {
    let predicted = tag_sentences(model, sentences)?;
    let gold: Vec<Vec<String>> = sentences.iter().map(|s| s.tags.clone()).collect();
    span_f1(&gold, &predicted)
}

/// Trains the NER configuration. Labels cover train and dev tags.
pub fn train_ner(
    config: TrainConfig,
    train: &[Sentence],
    dev: Option<&[Sentence]>,
    pretrained: Option<&Pretrained>,
) -> Result<TrainOutcome> {
    require_task(&config, Task::Ner)?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let labels = label_inventory(train.iter().chain(dev.unwrap_or_default()));
    let vocab = sentence_vocab(train, pretrained);
    let model = MeCrf::new(config, vocab, labels, pretrained)?;
    let instances = sentence_instances(train, &model.vocab, &model.labels)?;
    let dev_fn = |m: &MeCrf| -> Result<DevMetrics> {
        let r = evaluate_sentences(m, dev.unwrap_or_default())?;
        Ok(vec![("span_f1".into(), 100.0 * r.overall.f1)])
    };
    let trainer = Trainer::new(&instances);
    match dev {
        Some(d) if !d.is_empty() => trainer.with_dev(&dev_fn).run(model),
        _ => trainer.run(model),
    }
}

/// Per-thread predictions with gold annotations attached.
pub fn predict_threads(model: &MeCrf, threads: &[Thread]) -> Result<Vec<Vec<PostPrediction>>> {
    let dummy = model.config.dummy_slot;
    let instances = thread_instances(threads, &model.vocab, &model.labels, dummy)?;
    threads
        .iter()
        .zip(&instances)
        .map(|(t, inst)| {
            let seg = model.predict(inst, false)?.remove(0);
            Ok(t.posts
                .iter()
                .enumerate()
                .map(|(i, p)| PostPrediction {
                    post: i + 1,
                    predicted_link: slot_to_link(seg.links[i], dummy),
                    predicted_da: model.labels[seg.labels[i]].clone(),
                    gold_links: p.links.clone(),
                    gold_da: p.da.clone(),
                })
                .collect())
        })
        .collect()
}

pub fn evaluate_threads(model: &MeCrf, threads: &[Thread]) -> Result<ThreadReport> {
    Ok(ThreadReport::new(&[predict_threads(model, threads)?]))
}

/// Trains the thread configuration against a fixed DA inventory.
pub fn train_threads(
    config: TrainConfig,
    train: &[Thread],
    dev: Option<&[Thread]>,
    labels: Vec<String>,
    pretrained: Option<&Pretrained>,
) -> Result<TrainOutcome> {
    require_task(&config, Task::Thread)?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let vocab = thread_vocab(train, pretrained);
    let dummy = config.dummy_slot;
    let model = MeCrf::new(config, vocab, labels, pretrained)?;
    let instances = thread_instances(train, &model.vocab, &model.labels, dummy)?;
    let dev_fn = |m: &MeCrf| -> Result<DevMetrics> {
        let preds = predict_threads(m, dev.unwrap_or_default())?;
        let r = post_metrics(preds.iter().flatten());
        Ok(vec![("joint".into(), r.joint), ("link".into(), r.link), ("da".into(), r.da)])
    };
    let trainer = Trainer::new(&instances);
    match dev {
        Some(d) if !d.is_empty() => trainer.with_dev(&dev_fn).run(model),
        _ => trainer.run(model),
    }
}

/// Result of k-fold cross-validation over one or more seeded runs.
pub struct CrossValidation {
    pub reports: Vec<ThreadReport>,
    /// Metrics log of every (run, fold) training, in order.
    pub logs: Vec<String>,
}

/// `runs` repetitions of k-fold CV; run `r` uses seed `config.seed + r` for
/// both the folds and the model. Each fold model keeps its final epoch.
pub fn cross_validate(
    config: &TrainConfig,
    threads: &[Thread],
    folds: usize,
    runs: usize,
    pretrained: Option<&Pretrained>,
) -> Result<CrossValidation> {
    require_task(config, Task::Thread)?;
    if runs == 0 {
        return Err(Error::config("runs", "must be at least 1"));
    }
    let labels = da_inventory(threads);
    let mut reports = Vec::with_capacity(runs);
    let mut logs = Vec::new();
    for r in 0..runs {
        let mut cfg = config.clone();
        cfg.seed = config.seed + r as u64;
        let splits = stratified_kfold(threads.len(), folds, cfg.seed)?;
        let mut fold_preds = Vec::with_capacity(splits.len());
        for test in &splits {
            let test_set: BTreeSet<usize> = test.iter().copied().collect();
            let train: Vec<Thread> = (0..threads.len())
                .filter(|i| !test_set.contains(i))
                .map(|i| threads[i].clone())
                .collect();
            let test: Vec<Thread> = test.iter().map(|&i| threads[i].clone()).collect();
            let outcome = train_threads(cfg.clone(), &train, None, labels.clone(), pretrained)?;
            logs.push(outcome.metrics_log());
            fold_preds.push(predict_threads(&outcome.model, &test)?);
        }
        reports.push(ThreadReport::new(&fold_preds));
    }
    Ok(CrossValidation { reports, logs })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SyntheticScores {
    pub mentions: usize,
    /// Share of mention tokens with the correct class label.
    pub mention_accuracy: f64,
    /// Share of mention tokens whose attention argmax is the antecedent.
    pub attention_accuracy: f64,
    pub token_accuracy: f64,
}

pub fn synthetic_vocab(train: &[SyntheticSequence]) -> Vocabulary {
    data::token_vocab(train.iter().flat_map(|s| s.tokens.iter().map(String::as_str)), None)
}

pub fn evaluate_synthetic(model: &MeCrf, seqs: &[SyntheticSequence]) -> Result<SyntheticScores> {
    let instances = synthetic_instances(seqs, &model.vocab, &model.labels)?;
    let (mut mentions, mut right, mut attended, mut tokens, mut tok_right) = (0, 0, 0, 0, 0);
    for (s, inst) in seqs.iter().zip(&instances) {
        let pred = model.predict(inst, false)?.remove(0);
        let gold = &inst.segments[0].labels;
        for t in 0..gold.len() {
            tokens += 1;
            tok_right += usize::from(pred.labels[t] == gold[t]);
            if let Some(a) = s.antecedents[t] {
                mentions += 1;
                right += usize::from(pred.labels[t] == gold[t]);
                attended += usize::from(pred.attention_argmax[t] == model.read_config().slot_of_row(a));
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(SyntheticScores {
        mentions,
        mention_accuracy: ratio(right, mentions),
        attention_accuracy: ratio(attended, mentions),
        token_accuracy: ratio(tok_right, tokens),
    })
}

/// Trains on the synthetic antecedent task; `labels` must cover all classes.
pub fn train_synthetic(
    config: TrainConfig,
    train: &[SyntheticSequence],
    dev: Option<&[SyntheticSequence]>,
    labels: Vec<String>,
) -> Result<TrainOutcome> {
    require_task(&config, Task::Ner)?;
    let model = MeCrf::new(config, synthetic_vocab(train), labels, None)?;
    let instances = synthetic_instances(train, &model.vocab, &model.labels)?;
    let dev_fn = |m: &MeCrf| -> Result<DevMetrics> {
        let s = evaluate_synthetic(m, dev.unwrap_or_default())?;
        Ok(vec![
            ("mention_acc".into(), 100.0 * s.mention_accuracy),
            ("attention_acc".into(), 100.0 * s.attention_accuracy),
        ])
    };
    let trainer = Trainer::new(&instances);
    match dev {
        Some(d) if !d.is_empty() => trainer.with_dev(&dev_fn).run(model),
        _ => trainer.run(model),
    }
}
