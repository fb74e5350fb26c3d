//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, GradCheckReport, Mode};
use crate::config::{Task, TrainConfig};
use crate::data::{
    da_inventory, label_inventory, load_checkpoint, read_conll, read_threads, save_checkpoint,
    write_conll, SyntheticConfig,
};
use crate::encoders::{LexicalFeatures, PostFeatures, Pretrained, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{macro_average, span_report_text};
use crate::model::{Inputs, Instance, MeCrf, PostInput, Segment};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "mecrf", version, about = "Memory-enhanced CRF tagger")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Tag a corpus with a trained checkpoint.
    Tag(TagArgs),
    /// Score a checkpoint, or cross-validate on a thread corpus.
    Eval(EvalArgs),
    /// Generate the synthetic antecedent corpus.
    Synth(SynthArgs),
    /// Finite-difference check of the full loss on a toy instance.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Flat TOML file of training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pretrained word vectors (`token v1 .. vd` per line).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub memory_window: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub curriculum_epochs: Option<usize>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path, self.task)?,
            None => {
                let task = self
                    .task
                    .ok_or_else(|| Error::config("task", "missing; pass --task or --config"))?;
                TrainConfig::for_task(task)
            }
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = self.memory_window {
            cfg.memory_window = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.curriculum_epochs {
            cfg.curriculum_epochs = v;
        }
        if let Some(v) = self.hops {
            cfg.hops = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn pretrained(&self) -> Result<Option<Pretrained>> {
        self.embeddings.as_deref().map(Pretrained::from_file).transpose()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Training corpus (CoNLL for ner, JSONL threads for thread).
    #[arg(long)]
    pub train: PathBuf,
    /// Development corpus used for model selection.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log path; defaults to `<out>.metrics.tsv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TagArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    #[default]
    Text,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Checkpoint to score; omit together with `--folds` for cross-validation.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Thread-level k-fold cross-validation (thread task).
    #[arg(long)]
    pub folds: Option<usize>,
    /// Seeded repetitions of the cross-validation, macro-averaged.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub mentions: usize,
    #[arg(long, default_value_t = 40)]
    pub min_len: usize,
    #[arg(long, default_value_t = 56)]
    pub max_len: usize,
    #[arg(long, default_value_t = 8)]
    pub min_distance: usize,
    #[arg(long, default_value_t = 30)]
    pub max_distance: usize,
    #[arg(long, default_value_t = 500)]
    pub entities: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Runs a parsed command and returns the text to print on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Tag(a) => tag(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Result<String> {
    let cfg = a.common.resolve()?;
    let pretrained = a.common.pretrained()?;
    let outcome = match cfg.task {
        Task::Ner => {
            let train = read_conll(&a.train)?;
            let dev = a.dev.as_deref().map(read_conll).transpose()?;
            pipeline::train_ner(cfg, &train, dev.as_deref(), pretrained.as_ref())?
        }
        Task::Thread => {
            let train = read_threads(&a.train)?;
            let dev = a.dev.as_deref().map(read_threads).transpose()?;
            let labels = da_inventory(train.iter().chain(dev.iter().flatten()));
            pipeline::train_threads(cfg, &train, dev.as_deref(), labels, pretrained.as_ref())?
        }
    };
    save_checkpoint(&outcome.model, &a.out)?;
    let log = a.log.unwrap_or_else(|| sibling(&a.out, ".metrics.tsv"));
    std::fs::write(&log, outcome.metrics_log())?;
    std::fs::write(sibling(&log, ".timing"), outcome.timing_log())?;
    Ok(format!(
        "trained {} epochs (kept epoch {}); checkpoint {}; log {}",
        outcome.epochs.len(),
        outcome.best_epoch,
        a.out.display(),
        log.display()
    ))
}

fn tag(a: TagArgs) -> Result<String> {
    let model = load_checkpoint(&a.checkpoint)?;
    match model.config.task {
        Task::Ner => {
            let mut sentences = read_conll(&a.data)?;
            let predicted = pipeline::tag_sentences(&model, &sentences)?;
            for (s, p) in sentences.iter_mut().zip(predicted) {
                for (i, tag) in p.into_iter().enumerate() {
                    let gold = std::mem::replace(&mut s.tags[i], tag);
                    s.extra[i].push(gold);
                }
            }
            std::fs::write(&a.out, write_conll(&sentences))?;
            Ok(format!("tagged {} sentences into {}", sentences.len(), a.out.display()))
        }
        Task::Thread => {
            let threads = read_threads(&a.data)?;
            let preds = pipeline::predict_threads(&model, &threads)?;
            let mut out = String::new();
            for (t, p) in threads.iter().zip(&preds) {
                let mut v = serde_json::to_value(t)?;
                for (post, pp) in v["posts"].as_array_mut().expect("posts array").iter_mut().zip(p) {
                    post["predicted_link"] = pp.predicted_link.into();
                    post["predicted_da"] = pp.predicted_da.clone().into();
                }
                out.push_str(&serde_json::to_string(&v)?);
                out.push('\n');
            }
            std::fs::write(&a.out, out)?;
            Ok(format!("tagged {} threads into {}", threads.len(), a.out.display()))
        }
    }
}

fn eval(a: EvalArgs) -> Result<String> {
    let report = match (&a.checkpoint, a.folds) {
        (Some(ckpt), None) => {
            let model = load_checkpoint(ckpt)?;
            match model.config.task {
                Task::Ner => {
                    let sentences = read_conll(&a.data)?;
                    check_label_subset(&model, &label_inventory(&sentences))?;
                    let r = pipeline::evaluate_sentences(&model, &sentences)?;
                    match a.format {
                        ReportFormat::Text => span_report_text(&r),
                        ReportFormat::Jsonl => jsonl(std::iter::once(serde_json::to_value(&r)?))?,
                    }
                }
                Task::Thread => {
                    let threads = read_threads(&a.data)?;
                    check_label_subset(&model, &da_inventory(&threads))?;
                    let preds = pipeline::predict_threads(&model, &threads)?;
                    let r = crate::eval::ThreadReport::new(&[preds.clone()]);
                    match a.format {
                        ReportFormat::Text => r.to_text(),
                        ReportFormat::Jsonl => jsonl(
                            std::iter::once(serde_json::to_value(&r)?)
                                .chain(preds.iter().flatten().map(|p| serde_json::to_value(p).expect("serialisable"))),
                        )?,
                    }
                }
            }
        }
        (None, Some(k)) => {
            let cfg = a.common.resolve()?;
            if cfg.task != Task::Thread {
                return Err(Error::config("task", "cross-validation applies to the thread task"));
            }
            let threads = read_threads(&a.data)?;
            let pretrained = a.common.pretrained()?;
            let cv = pipeline::cross_validate(&cfg, &threads, k, a.runs, pretrained.as_ref())?;
            let avg = macro_average(&cv.reports);
            match a.format {
                ReportFormat::Text => {
                    let mut s = String::new();
                    let _ = writeln!(
                        s,
                        "runs\t{}\nlink_f\t{:.2}\nda_f\t{:.2}\njoint_f\t{:.2}\nthread_acc\t{:.2}",
                        avg.runs, avg.link, avg.da, avg.joint, avg.thread_accuracy
                    );
                    for (i, r) in cv.reports.iter().enumerate() {
                        let _ = write!(s, "\n# run {}\n{}", i + 1, r.to_text());
                    }
                    s
                }
                ReportFormat::Jsonl => jsonl(
                    std::iter::once(serde_json::to_value(avg)?)
                        .chain(cv.reports.iter().map(|r| serde_json::to_value(r).expect("serialisable"))),
                )?,
            }
        }
        (Some(_), Some(_)) => return Err(Error::config("folds", "cannot be combined with --checkpoint")),
        (None, None) => return Err(Error::config("checkpoint", "pass --checkpoint, or --folds to cross-validate")),
    };
    match &a.out {
        Some(path) => {
            std::fs::write(path, &report)?;
            Ok(format!("report written to {}", path.display()))
        }
        None => Ok(report.trim_end().to_string()),
    }
}

fn check_label_subset(model: &MeCrf, data_labels: &[String]) -> Result<()> {
    if let Some(l) = data_labels.iter().find(|l| !model.labels.contains(l)) {
        return Err(Error::LabelMismatch(format!(
            "data label `{l}` is unknown to the checkpoint (labels {:?})",
            model.labels
        )));
    }
    Ok(())
}

fn jsonl(values: impl Iterator<Item = serde_json::Value>) -> Result<String> {
    let mut s = String::new();
    for v in values {
        s.push_str(&serde_json::to_string(&v)?);
        s.push('\n');
    }
    Ok(s)
}

fn synth(a: SynthArgs) -> Result<String> {
    let cfg = SyntheticConfig {
        n: a.n,
        min_len: a.min_len,
        max_len: a.max_len,
        min_distance: a.min_distance,
        max_distance: a.max_distance,
        classes: a.classes,
        mentions: a.mentions,
        entities: a.entities,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let seqs = crate::data::generate_synthetic(&cfg)?;
    let sentences: Vec<_> = seqs.iter().enumerate().map(|(i, s)| s.to_sentence(i)).collect();
    std::fs::write(&a.out, write_conll(&sentences))?;
    Ok(format!("wrote {} sequences to {}", seqs.len(), a.out.display()))
}

/// Small model of the requested task with random inputs, for checking
/// gradients. Dimensions are shrunk; every other setting is kept.
pub fn toy_problem(mut cfg: TrainConfig, seed: u64) -> Result<(MeCrf, Instance)> {
    cfg.embedding_dim = 4;
    cfg.hidden = 5;
    cfg.encoder_hidden = 3;
    cfg.struct_dim = 3;
    cfg.punct_dim = 3;
    cfg.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["Alpha", "beta", "GAMMA", "d3lta", "eps.", "zeta"];
    let vocab = Vocabulary::from_tokens(words.iter().copied());
    let pretrained = cfg.fixed_embeddings.then(|| Pretrained {
        dim: cfg.embedding_dim,
        ..Pretrained::default()
    });
    let labels: Vec<String> = ["O", "B-X", "I-X"].iter().map(|s| s.to_string()).collect();
    let mut model = MeCrf::new(cfg.clone(), vocab.clone(), labels, pretrained.as_ref())?;
    if let Some(a) = model.transitions() {
        for v in model.store.get_mut(a).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let dummy = usize::from(cfg.dummy_slot);
    let inst = match cfg.task {
        Task::Ner => {
            let toks: Vec<&str> = (0..7).map(|_| words[rng.gen_range(0..words.len())]).collect();
            let labels: Vec<usize> = (0..7).map(|_| rng.gen_range(0..3)).collect();
            let mut links = |range: std::ops::Range<usize>| -> Vec<Option<usize>> {
                range.map(|t| (t > 0).then(|| rng.gen_range(0..t) + dummy)).collect()
            };
            let (l1, l2) = (links(0..3), links(3..7));
            Instance {
                inputs: Inputs::Tokens {
                    ids: vocab.ids(&toks),
                    lexical: LexicalFeatures::matrix(&toks)?,
                },
                segments: vec![
                    Segment {
                        start: 0,
                        labels: labels[..3].to_vec(),
                        links: l1,
                    },
                    Segment {
                        start: 3,
                        labels: labels[3..].to_vec(),
                        links: l2,
                    },
                ],
            }
        }
        Task::Thread => {
            let n = 4;
            let posts = (0..n)
                .map(|i| {
                    let pick = |rng: &mut ChaCha8Rng, k: usize| -> Vec<usize> {
                        (0..k).map(|_| vocab.get(words[rng.gen_range(0..words.len())])).collect()
                    };
                    let title = if i == 0 { pick(&mut rng, 2) } else { Vec::new() };
                    PostInput {
                        title,
                        text: {
                            let k = rng.gen_range(1..4);
                            pick(&mut rng, k)
                        },
                        features: PostFeatures::compute(i, n, i % 2 == 0, "why? see http://x !"),
                    }
                })
                .collect();
            Instance {
                inputs: Inputs::Posts(posts),
                segments: vec![Segment {
                    start: 0,
                    labels: (0..n).map(|_| rng.gen_range(0..3)).collect(),
                    links: (0..n)
                        .map(|t| (t + dummy > 0).then(|| rng.gen_range(0..t + dummy)))
                        .collect(),
                }],
            }
        }
    };
    Ok((model, inst))
}

/// Finite-difference check of the toy problem's training loss (dropout
/// masks fixed by a constant seed).
pub fn check_toy_gradients(cfg: TrainConfig, samples: usize, epsilon: f64, seed: u64) -> Result<GradCheckReport> {
    let (model, inst) = toy_problem(cfg, seed)?;
    let segments: Vec<usize> = (0..inst.segments.len()).collect();
    let mut store = model.store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    gradient_check(&mut store, epsilon, samples, &mut rng, |s, want| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (loss, grads) = model.unit_gradients(s, &inst, &segments, false, Mode::Train, &mut r)?;
        Ok((loss, want.then_some(grads)))
    })
}

fn gradcheck(a: GradcheckArgs) -> Result<String> {
    let cfg = a.common.resolve()?;
    let seed = cfg.seed;
    let task = cfg.task;
    let r = check_toy_gradients(cfg, a.samples, a.epsilon, seed)?;
    let verdict = if r.passed(a.tolerance) { "PASS" } else { "FAIL" };
    let line = format!(
        "{verdict} task={task} checked={} max_rel_error={:.3e} worst={}[{}] analytic={:.6e} numeric={:.6e}",
        r.checked, r.max_rel_error, r.worst_param, r.worst_index, r.worst_analytic, r.worst_numeric
    );
    if r.passed(a.tolerance) {
        Ok(line)
    } else {
        Err(Error::State(line))
    }
}
