//! Mini-batch training with Adam, the transition-freezing curriculum and
//! dev-set model selection.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{AdamConfig, AdamState, Gradients, Mode, PROB_FLOOR};
use crate::config::{curriculum_gate, Decoder};
use crate::error::{Error, Result};
use crate::model::{Instance, MeCrf};

/// `-ln max(p[gold], 1e-12)`.
pub fn link_loss(p: &[f64], gold: usize) -> Result<f64> {
    let v = p
        .get(gold)
        .ok_or_else(|| Error::Input(format!("gold index {gold} outside distribution of length {}", p.len())))?;
    Ok(-v.max(PROB_FLOOR).ln())
}

/// `α L_DA + (1 - α) L_LNK`.
pub fn joint_loss(tagging: f64, link: f64, alpha: f64) -> f64 {
    alpha * tagging + (1.0 - alpha) * link
}

/// Named dev-set scores; the first entry drives model selection.
pub type DevMetrics = Vec<(String, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev: DevMetrics,
    pub transitions_frozen: bool,
    pub seconds: f64,
}

impl EpochRecord {
    /// Tab-separated `epoch, loss, dev metrics...`. Wall-clock time is kept
    /// out so that logs of identical runs are byte-identical.
    pub fn log_line(&self) -> String {
        let mut s = format!("{}\t{:.6}", self.epoch, self.loss);
        for (name, v) in &self.dev {
            s.push_str(&format!("\t{name}={v:.4}"));
        }
        s
    }
}

pub struct TrainOutcome {
    pub model: MeCrf,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn metrics_log(&self) -> String {
        self.epochs.iter().map(|e| e.log_line() + "\n").collect()
    }

    pub fn timing_log(&self) -> String {
        self.epochs.iter().map(|e| format!("{}\t{:.3}\n", e.epoch, e.seconds)).collect()
    }
}

type DevFn<'a> = dyn Fn(&MeCrf) -> Result<DevMetrics> + 'a;
type EpochHook<'a> = dyn FnMut(&EpochRecord, &MeCrf) + 'a;

/// Training driver. Build with [`Trainer::new`], optionally attach a dev
/// scorer and an epoch observer, then call [`Trainer::run`].
pub struct Trainer<'a> {
    train: &'a [Instance],
    dev: Option<&'a DevFn<'a>>,
    on_epoch: Option<&'a mut EpochHook<'a>>,
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a [Instance]) -> Self {
        Self {
            train,
            dev: None,
            on_epoch: None,
        }
    }

    pub fn with_dev(mut self, dev: &'a DevFn<'a>) -> Self {
        self.dev = Some(dev);
        self
    }

    pub fn on_epoch(mut self, hook: &'a mut EpochHook<'a>) -> Self {
        self.on_epoch = Some(hook);
        self
    }

    pub fn run(mut self, mut model: MeCrf) -> Result<TrainOutcome> {
        let cfg = model.config.clone();
        let units: Vec<(usize, usize)> = self
            .train
            .iter()
            .enumerate()
            .flat_map(|(i, inst)| (0..inst.segments.len()).map(move |s| (i, s)))
            .collect();
        if units.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        for inst in self.train {
            inst.validate(model.num_labels())?;
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?;
        let mut adam = AdamState::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &model.store,
        )?;
        let transitions = model.transitions();

        let mut records = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(f64, usize, crate::autodiff::ParamStore)> = None;
        let mut since_best = 0;
        for epoch in 1..=cfg.epochs {
            let started = Instant::now();
            let frozen = cfg.decoder == Decoder::Crf && curriculum_gate(epoch, cfg.curriculum_epochs);
            let skip: Vec<_> = if frozen { transitions.into_iter().collect() } else { Vec::new() };
            let mut order = units.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, epoch as u64])));
            let mut epoch_loss = 0.0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                // one work item per instance, segments in batch order
                let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                let mut first_seen = Vec::new();
                for &(i, s) in batch {
                    let e = groups.entry(i).or_default();
                    if e.is_empty() {
                        first_seen.push(i);
                    }
                    e.push(s);
                }
                let items: Vec<(usize, Vec<usize>)> = first_seen.into_iter().map(|i| (i, groups[&i].clone())).collect();
                let m = &model;
                let train = self.train;
                let results: Vec<Result<(f64, Gradients)>> = pool.install(|| {
                    items
                        .par_iter()
                        .enumerate()
                        .map(|(k, (i, segs))| {
                            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, epoch as u64, b as u64, k as u64]));
                            m.unit_gradients(&m.store, &train[*i], segs, frozen, Mode::Train, &mut rng)
                        })
                        .collect()
                });
                let mut grads = Gradients::new(model.store.len());
                let mut batch_loss = 0.0;
                for r in results {
                    let (loss, g) = match r {
                        Err(e) if e.is_numerical() => {
                            return Err(Error::Divergence {
                                epoch,
                                batch: b + 1,
                                loss: f64::NAN,
                            })
                        }
                        other => other?,
                    };
                    batch_loss += loss;
                    grads.merge(&g);
                }
                if !batch_loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b + 1,
                        loss: batch_loss,
                    });
                }
                adam.step(&mut model.store, &grads, &skip).map_err(|e| match e {
                    Error::NanGradient(_) => Error::Divergence {
                        epoch,
                        batch: b + 1,
                        loss: batch_loss,
                    },
                    e => e,
                })?;
                epoch_loss += batch_loss;
            }
            let dev = match self.dev {
                Some(f) => f(&model)?,
                None => Vec::new(),
            };
            let record = EpochRecord {
                epoch,
                loss: epoch_loss,
                dev,
                transitions_frozen: frozen,
                seconds: started.elapsed().as_secs_f64(),
            };
            log::info!("{}", record.log_line());
            if let Some(hook) = self.on_epoch.as_mut() {
                hook(&record, &model);
            }
            let score = record.dev.first().map(|(_, v)| *v);
            records.push(record);
            if let Some(score) = score {
                if best.as_ref().map_or(true, |(s, ..)| score > *s) {
                    best = Some((score, epoch, model.store.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if cfg.patience > 0 && since_best >= cfg.patience {
                        break;
                    }
                }
            }
        }
        let last = records.last().map_or(0, |r| r.epoch);
        let best_epoch = match best {
            Some((_, epoch, store)) => {
                model.store = store;
                epoch
            }
            None => last,
        };
        Ok(TrainOutcome {
            model,
            epochs: records,
            best_epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Task, TrainConfig};
    use crate::encoders::{LexicalFeatures, Vocabulary};
    use crate::model::{Inputs, Segment};

    #[test]
    fn loss_examples() {
        assert!((link_loss(&[0.2, 0.5, 0.3], 1).unwrap() - 0.5f64.ln().abs()).abs() < 1e-12);
        assert_eq!(link_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((link_loss(&[1.0, 0.0], 1).unwrap() - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(link_loss(&[1.0], 2).is_err());
        assert_eq!(joint_loss(2.0, 4.0, 0.5), 3.0);
    }

    fn tiny() -> (MeCrf, Vec<Instance>) {
        let mut cfg = TrainConfig::for_task(Task::Ner);
        cfg.embedding_dim = 4;
        cfg.hidden = 4;
        cfg.epochs = 4;
        cfg.batch_size = 2;
        cfg.lr = 0.05;
        cfg.fixed_embeddings = false;
        cfg.curriculum_epochs = 2;
        let vocab = Vocabulary::from_tokens(["a", "b"]);
        let model = MeCrf::new(cfg, vocab, vec!["O".into(), "B-X".into()], None).unwrap();
        let inst = |ids: Vec<usize>, labels: Vec<usize>| {
            let toks: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
            Instance {
                inputs: Inputs::Tokens {
                    lexical: LexicalFeatures::matrix(&toks).unwrap(),
                    ids,
                },
                segments: vec![Segment {
                    start: 0,
                    links: vec![None; labels.len()],
                    labels,
                }],
            }
        };
        let data = vec![
            inst(vec![2, 3, 2], vec![1, 0, 1]),
            inst(vec![3, 3], vec![0, 0]),
            inst(vec![2], vec![1]),
        ];
        (model, data)
    }

    #[test]
    fn runs_are_reproducible_and_freeze_transitions() {
        let (model, data) = tiny();
        let a_id = model.transitions().unwrap();
        let mut seen = Vec::new();
        let mut hook = |r: &EpochRecord, m: &MeCrf| seen.push((r.epoch, m.store.get(a_id).max_abs()));
        let a = Trainer::new(&data).on_epoch(&mut hook).run(model.clone()).unwrap();
        assert_eq!(seen[0].1, 0.0);
        assert_eq!(seen[1].1, 0.0);
        assert!(seen[2].1 > 0.0);
        let b = Trainer::new(&data).run(model).unwrap();
        assert_eq!(a.metrics_log(), b.metrics_log());
        assert_eq!(a.metrics_log().lines().count(), 4);
        assert_eq!(a.best_epoch, 4);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (model, data) = tiny();
        let mut m4 = model.clone();
        m4.config.threads = 4;
        let a = Trainer::new(&data).run(model).unwrap();
        let b = Trainer::new(&data).run(m4).unwrap();
        assert_eq!(a.metrics_log(), b.metrics_log());
    }

    #[test]
    fn early_stopping_returns_best_checkpoint() {
        let (model, data) = tiny();
        let counter = std::cell::Cell::new(0);
        let scores = [0.1, 0.9, 0.2, 0.3];
        let dev = |_: &MeCrf| {
            let i = counter.get();
            counter.set(i + 1);
            Ok(vec![("f1".to_string(), scores[i])])
        };
        let snapshots = std::cell::RefCell::new(Vec::new());
        let mut hook = |_: &EpochRecord, m: &MeCrf| snapshots.borrow_mut().push(m.store.clone());
        let out = Trainer::new(&data).with_dev(&dev).on_epoch(&mut hook).run(model).unwrap();
        assert_eq!(out.best_epoch, 2);
        let snaps = snapshots.borrow();
        for ((_, a), (_, b)) in out.model.store.iter().zip(snaps[1].iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn empty_training_set_is_an_input_error() {
        let (model, _) = tiny();
        assert!(matches!(Trainer::new(&[]).run(model), Err(Error::Input(_))));
    }
}
