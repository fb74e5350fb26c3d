//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line each; exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use mecrf::autodiff::Mode;
use mecrf::cli::toy_problem;
use mecrf::config::{Task, TrainConfig};
use mecrf::crf;
use mecrf::data::{
    da_inventory, generate_synthetic, synthetic_labels, thread_instances, thread_vocab, write_threads, SyntheticConfig,
};
use mecrf::eval::{post_metrics, span_f1, thread_accuracy, PostPrediction, Prf};
use mecrf::model::MeCrf;
use mecrf::pipeline::{evaluate_synthetic, train_synthetic};
use mecrf::training::Trainer;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn inference_matches_enumeration() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut path_mismatches = 0;
    for _ in 0..200 {
        let (t, y) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
        let em = random_tensor(&mut rng, t, y, 3.0);
        let a = random_tensor(&mut rng, y + 2, y + 2, 3.0);
        worst = worst.max((crf::log_partition(&em, &a).unwrap() - brute_log_partition(&em, &a)).abs());
        let m = crf::marginals(&em, &a).unwrap();
        for (i, row) in brute_marginals(&em, &a).iter().enumerate() {
            for (l, want) in row.iter().enumerate() {
                worst = worst.max((m.get(i, l) - want).abs());
            }
        }
        let (path, _) = brute_viterbi(&em, &a);
        path_mismatches += usize::from(crf::viterbi_decode(&em, &a).unwrap() != path);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-8 && path_mismatches == 0 && secs < 5.0,
        format!("200 instances, max abs error {worst:.2e}, viterbi mismatches {path_mismatches}, {secs:.2}s"),
    )
}

fn gradient_error(mut cfg: TrainConfig, samples: usize, seed: u64) -> (f64, usize, String) {
    cfg.link_supervision = cfg.task == Task::Thread;
    let (model, inst) = toy_problem(cfg, seed).unwrap();
    let segments: Vec<usize> = (0..inst.segments.len()).collect();
    let loss = |s: &mecrf::autodiff::ParamStore| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        model.unit_gradients(s, &inst, &segments, false, Mode::Train, &mut r).unwrap().0
    };
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (_, grads) = model.unit_gradients(&model.store, &inst, &segments, false, Mode::Train, &mut r).unwrap();

    let mut coords: Vec<(String, usize, f64)> = Vec::new();
    for (id, p) in model.store.iter().filter(|(_, p)| p.trainable) {
        let dense = grads.dense(id, &model.store);
        coords.extend(dense.data().iter().enumerate().map(|(i, &g)| (p.name.clone(), i, g)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    coords.shuffle(&mut rng);
    coords.truncate(samples);
    let mut worst = (0.0, String::new());
    for (name, i, analytic) in &coords {
        let numeric = central_difference(&model.store, name, *i, 1e-5, loss);
        let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        if err > worst.0 {
            worst = (err, format!("{name}[{i}]"));
        }
    }
    (worst.0, coords.len(), worst.1)
}

fn gradients_are_exact() -> Outcome {
    let start = Instant::now();
    let (te, tn, tw) = gradient_error(TrainConfig::for_task(Task::Thread), 500, 3);
    let (ne, nn, nw) = gradient_error(TrainConfig::for_task(Task::Ner), 500, 4);
    let secs = start.elapsed().as_secs_f64();
    check(
        te < 1e-4 && ne < 1e-4 && tn >= 500 && nn >= 500 && secs < 60.0,
        format!(
            "thread+links {tn} coords max rel {te:.2e} at {tw}; ner {nn} coords max rel {ne:.2e} at {nw}; {secs:.1}s"
        ),
    )
}

fn synthetic_config(ablate: bool) -> TrainConfig {
    let mut cfg = TrainConfig::for_task(Task::Ner);
    cfg.embedding_dim = 16;
    cfg.hidden = 32;
    cfg.lexical_features = false;
    cfg.fixed_embeddings = false;
    cfg.keep_rate = 1.0;
    cfg.lr = 0.005;
    cfg.epochs = 8;
    cfg.link_supervision = true;
    cfg.alpha = 0.5;
    cfg.ablate_read = ablate;
    cfg
}

fn long_range_and_attention() -> (Outcome, Outcome) {
    let start = Instant::now();
    let sc = SyntheticConfig {
        n: 2500,
        ..SyntheticConfig::default()
    };
    let all = generate_synthetic(&sc).unwrap();
    let (train, test) = all.split_at(2000);
    let labels = synthetic_labels(sc.classes);
    let full = train_synthetic(synthetic_config(false), train, None, labels.clone()).unwrap();
    let full = evaluate_synthetic(&full.model, test).unwrap();
    let ablated = train_synthetic(synthetic_config(true), train, None, labels).unwrap();
    let ablated = evaluate_synthetic(&ablated.model, test).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let bound = 1.0 / sc.classes as f64 + 0.10;
    let c3 = check(
        full.mention_accuracy >= 0.95 && ablated.mention_accuracy <= bound && secs < 900.0,
        format!(
            "{} classes, {} test mentions: full {:.1}%, read ablated {:.1}% (bound {:.1}%), {secs:.0}s",
            sc.classes,
            full.mentions,
            100.0 * full.mention_accuracy,
            100.0 * ablated.mention_accuracy,
            100.0 * bound
        ),
    );
    let c4 = check(
        full.attention_accuracy >= 0.90,
        format!("attention argmax on antecedent for {:.1}% of test mentions", 100.0 * full.attention_accuracy),
    );
    (c3, c4)
}

fn curriculum_freezes_transitions() -> Outcome {
    let threads = thread_fixture(12, 5);
    let mut cfg = small_thread_config();
    cfg.curriculum_epochs = 20;
    cfg.epochs = 25;
    let labels = da_inventory(&threads);
    let vocab = thread_vocab(&threads, None);
    let model = MeCrf::new(cfg, vocab, labels, None).unwrap();
    let instances = thread_instances(&threads, &model.vocab, &model.labels, model.config.dummy_slot).unwrap();
    let mut max_abs = Vec::new();
    let mut hook = |_: &mecrf::training::EpochRecord, m: &MeCrf| {
        let a = m.store.get(m.transitions().unwrap());
        max_abs.push(a.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs())));
    };
    Trainer::new(&instances).on_epoch(&mut hook).run(model).unwrap();
    let frozen_ok = max_abs.len() == 25 && max_abs[..20].iter().all(|&v| v == 0.0);
    let moved = max_abs[20..].iter().any(|&v| v > 0.0);
    check(
        frozen_ok && moved,
        format!(
            "max |A| is 0 for epochs 1-20: {frozen_ok}; after epoch 21 {:.2e}, after epoch 25 {:.2e}",
            max_abs.get(20).copied().unwrap_or(f64::NAN),
            max_abs.last().copied().unwrap_or(f64::NAN)
        ),
    )
}

const SPAN_FIXTURE: [(&str, &str); 20] = [
    ("B-PER I-PER O", "B-PER I-PER O"),
    ("B-LOC O", "B-LOC O"),
    ("B-ORG I-ORG I-ORG", "B-ORG I-ORG O"),
    ("B-PER O B-LOC", "B-PER O B-ORG"),
    ("O O O", "O B-MISC O"),
    ("B-MISC I-MISC", "B-MISC B-MISC"),
    ("O B-LOC I-LOC", "O I-LOC I-LOC"),
    ("B-ORG O", "O O"),
    ("O O", "O O"),
    ("B-PER B-PER", "B-PER B-PER"),
    ("B-LOC I-LOC O B-ORG", "B-LOC I-LOC O B-ORG"),
    ("I-PER O", "B-PER O"),
    ("B-MISC O O", "O O O"),
    ("O B-PER I-PER I-PER", "O B-PER I-PER I-PER"),
    ("B-ORG I-ORG", "B-LOC I-LOC"),
    ("O O B-LOC", "O O B-LOC"),
    ("B-PER O O", "B-PER I-PER O"),
    ("B-MISC", "B-MISC"),
    ("O B-ORG", "O B-ORG"),
    ("B-LOC O B-PER", "O O B-PER"),
];

fn post(post: usize, gold_links: &[usize], gold_da: &str, link: usize, da: &str) -> PostPrediction {
    PostPrediction {
        post,
        predicted_link: link,
        predicted_da: da.into(),
        gold_links: gold_links.to_vec(),
        gold_da: gold_da.into(),
    }
}

fn metrics_match_hand_counts() -> Outcome {
    let split = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    let gold: Vec<_> = SPAN_FIXTURE.iter().map(|(g, _)| split(g)).collect();
    let pred: Vec<_> = SPAN_FIXTURE.iter().map(|(_, p)| split(p)).collect();
    let r = span_f1(&gold, &pred).unwrap();
    // (correct, predicted, gold) counted by hand from the table above.
    let expected = [
        ("LOC", Prf::from_counts(4, 5, 6)),
        ("MISC", Prf::from_counts(1, 4, 3)),
        ("ORG", Prf::from_counts(2, 4, 5)),
        ("PER", Prf::from_counts(7, 8, 8)),
    ];
    let overall = Prf::from_counts(14, 21, 22);
    let f = |c: f64, p: f64, g: f64| {
        let (pr, rc) = (c / p, c / g);
        2.0 * pr * rc / (pr + rc)
    };
    let spans_ok = r.overall == overall
        && r.overall.f1 == f(14.0, 21.0, 22.0)
        && r.per_class.len() == 4
        && expected.iter().all(|(c, prf)| r.per_class.get(*c) == Some(prf));

    let threads = vec![
        vec![
            post(1, &[0], "question", 0, "question"),
            post(2, &[1], "answer", 1, "answer"),
            post(3, &[1, 2], "answer", 2, "question"),
            post(4, &[3], "resolution", 1, "resolution"),
        ],
        vec![
            post(1, &[0], "question", 0, "question"),
            post(2, &[1], "answer", 1, "answer"),
            post(3, &[2], "answer", 2, "answer"),
        ],
        vec![
            post(1, &[0], "question", 0, "answer"),
            post(2, &[1], "answer", 0, "answer"),
            post(3, &[1], "other", 1, "answer"),
        ],
    ];
    let m = post_metrics(threads.iter().flatten());
    let acc = thread_accuracy(&threads);
    let posts_ok = (m.posts, m.link_correct, m.da_correct, m.joint_correct) == (10, 8, 7, 5)
        && (m.link, m.da, m.joint) == (80.0, 70.0, 50.0)
        && acc == 100.0 / 3.0;
    check(
        spans_ok && posts_ok,
        format!(
            "span F1 {:.4} (P {:.4} R {:.4}) over 20 sentences, per-class match {spans_ok}; \
             posts link {} da {} joint {} thread acc {acc:.2}",
            r.overall.f1, r.overall.precision, r.overall.recall, m.link, m.da, m.joint
        ),
    )
}

fn mecrf(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_mecrf")).args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("`mecrf {}` failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_embeddings(path: &Path, dim: usize, words: &[&str]) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut text = String::new();
    for w in words {
        text.push_str(w);
        for _ in 0..dim {
            text.push_str(&format!(" {:.5}", rng.gen_range(-0.5..0.5)));
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn full_pipeline_runs() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();

    let threads = d.join("threads.jsonl");
    std::fs::write(&threads, write_threads(&thread_fixture(20, 8))).unwrap();
    let report = d.join("threads.report");
    mecrf(&["eval", "--task", "thread", "--data", s(&threads), "--folds", "10", "--out", s(&report)])?;
    let thread_report = std::fs::read_to_string(&report).unwrap();

    let (train, dev) = (d.join("train.conll"), d.join("dev.conll"));
    std::fs::write(&train, CONLL_TRAIN).unwrap();
    std::fs::write(&dev, CONLL_DEV).unwrap();
    let emb = d.join("vectors.txt");
    let ner = TrainConfig::for_task(Task::Ner);
    write_embeddings(&emb, ner.embedding_dim, &["eu", "german", "peter", "paris", "john", "berlin", "the", "."]);
    let ckpt = d.join("ner.ckpt");
    mecrf(&[
        "train", "--task", "ner", "--embeddings", s(&emb), "--train", s(&train), "--dev", s(&dev), "--out", s(&ckpt),
    ])?;
    let ner_report = mecrf(&["eval", "--checkpoint", s(&ckpt), "--data", s(&dev)])?;
    let secs = start.elapsed().as_secs_f64();
    let ok = thread_report.contains("joint") && ner_report.to_lowercase().contains("overall");
    check(
        ok,
        format!(
            "thread 10-fold CV and NER train/eval at published settings produced reports ({} + {} lines), {secs:.0}s",
            thread_report.lines().count(),
            ner_report.lines().count()
        ),
    )
}

fn runs_are_deterministic() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let threads = d.join("threads.jsonl");
    std::fs::write(&threads, write_threads(&thread_fixture(8, 4))).unwrap();
    let conll = d.join("train.conll");
    std::fs::write(&conll, CONLL_TRAIN).unwrap();
    let mut logs = Vec::new();
    for run in 0..2 {
        for (task, data, threads_flag) in [("thread", &threads, "2"), ("ner", &conll, "1")] {
            let out = d.join(format!("{task}{run}.ckpt"));
            let log = d.join(format!("{task}{run}.tsv"));
            mecrf(&[
                "train", "--task", task, "--train", s(data), "--out", s(&out), "--log", s(&log), "--seed", "13",
                "--threads", threads_flag, "--epochs", "10",
            ])?;
            logs.push((std::fs::read(&log).unwrap(), std::fs::read(&out).unwrap()));
        }
    }
    let same_logs = logs[0].0 == logs[2].0 && logs[1].0 == logs[3].0;
    let same_ckpts = logs[0].1 == logs[2].1 && logs[1].1 == logs[3].1;
    check(
        same_logs && same_ckpts && !logs[0].0.is_empty(),
        format!("thread and ner metrics logs identical: {same_logs}; checkpoints identical: {same_ckpts}"),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let (c3, c4) = catch_unwind(long_range_and_attention)
        .unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
    let results = [
        ("1 inference oracle", guarded(inference_matches_enumeration)),
        ("2 gradient check", guarded(gradients_are_exact)),
        ("3 long-range separation", c3),
        ("4 attention supervision", c4),
        ("5 curriculum", guarded(curriculum_freezes_transitions)),
        ("6 metric parity", guarded(metrics_match_hand_counts)),
        ("7 full pipeline", guarded(full_pipeline_runs)),
        ("8 determinism", guarded(runs_are_deterministic)),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("criterion {name}: PASS - {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {name}: FAIL - {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
