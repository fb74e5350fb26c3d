#![allow(dead_code)]

use mecrf::autodiff::{ParamStore, Tensor};
use mecrf::config::{Task, TrainConfig};
use mecrf::data::{Post, Thread};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every label sequence of length `t` over `y` labels, in lexicographic order.
pub fn all_paths(t: usize, y: usize) -> Vec<Vec<usize>> {
    (0..y.pow(t as u32))
        .map(|code| (0..t).rev().map(|i| code / y.pow(i as u32) % y).collect())
        .collect()
}

pub fn brute_score(em: &Tensor, a: &Tensor, path: &[usize]) -> f64 {
    let y = em.cols();
    let (start, stop) = (y, y + 1);
    let mut s = a.get(start, path[0]) + a.get(path[path.len() - 1], stop);
    for (i, &l) in path.iter().enumerate() {
        s += em.get(i, l);
        if i > 0 {
            s += a.get(path[i - 1], l);
        }
    }
    s
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn brute_log_partition(em: &Tensor, a: &Tensor) -> f64 {
    let scores: Vec<f64> = all_paths(em.rows(), em.cols()).iter().map(|p| brute_score(em, a, p)).collect();
    lse(&scores)
}

/// `T x Y` matrix of per-position label probabilities.
pub fn brute_marginals(em: &Tensor, a: &Tensor) -> Vec<Vec<f64>> {
    let z = brute_log_partition(em, a);
    let mut m = vec![vec![0.0; em.cols()]; em.rows()];
    for p in all_paths(em.rows(), em.cols()) {
        let w = (brute_score(em, a, &p) - z).exp();
        for (i, &l) in p.iter().enumerate() {
            m[i][l] += w;
        }
    }
    m
}

/// Highest-scoring path and its score.
pub fn brute_viterbi(em: &Tensor, a: &Tensor) -> (Vec<usize>, f64) {
    all_paths(em.rows(), em.cols())
        .into_iter()
        .map(|p| {
            let s = brute_score(em, a, &p);
            (p, s)
        })
        .fold((Vec::new(), f64::NEG_INFINITY), |best, (p, s)| if s > best.1 { (p, s) } else { best })
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Central difference of `f` at coordinate `index` of parameter `name`.
pub fn central_difference(
    store: &ParamStore,
    name: &str,
    index: usize,
    eps: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let id = store.id(name).unwrap();
    let mut s = store.clone();
    let x = s.get(id).data()[index];
    s.get_mut(id).data_mut()[index] = x + eps;
    let up = f(&s);
    s.get_mut(id).data_mut()[index] = x - eps;
    let down = f(&s);
    (up - down) / (2.0 * eps)
}

const WORDS: &[&str] = &[
    "printer", "driver", "install", "error", "windows", "linux", "update", "screen", "network", "card",
];

/// Forum threads whose dialogue acts and links follow a simple pattern:
/// the first post asks, replies answer the post they link to, and a
/// closing post by the initiator thanks.
pub fn thread_fixture(n: usize, seed: u64) -> Vec<Thread> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(3..7);
            let authors = ["ann", "bob", "cid", "dee"];
            let op = *authors.choose(&mut rng).unwrap();
            let mut posts = Vec::with_capacity(len);
            for p in 0..len {
                let mut words: Vec<&str> = (0..rng.gen_range(3..8)).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
                let (author, da, links) = if p == 0 {
                    words.push("how?");
                    (op, "question", vec![0])
                } else if p == len - 1 && rng.gen_bool(0.5) {
                    words.insert(0, "thanks!");
                    (op, "resolution", vec![p])
                } else {
                    words.insert(0, "try");
                    let other = *authors.iter().filter(|a| **a != op).collect::<Vec<_>>().choose(&mut rng).unwrap();
                    (*other, "answer", vec![rng.gen_range(1..=p)])
                };
                posts.push(Post {
                    author: author.to_string(),
                    title: if p == 0 { format!("{} problem", WORDS[i % WORDS.len()]) } else { String::new() },
                    text: words.join(" "),
                    links,
                    da: da.to_string(),
                });
            }
            Thread {
                id: format!("t{i}"),
                posts,
            }
        })
        .collect()
}

pub fn small_thread_config() -> TrainConfig {
    let mut cfg = TrainConfig::for_task(Task::Thread);
    cfg.embedding_dim = 8;
    cfg.encoder_hidden = 6;
    cfg.hidden = 10;
    cfg.struct_dim = 4;
    cfg.punct_dim = 4;
    cfg.fixed_embeddings = false;
    cfg
}

pub const CONLL_TRAIN: &str = "\
-DOCSTART- -X- -X- O

EU NNP B-NP B-ORG
rejects VBZ B-VP O
German JJ B-NP B-MISC
call NN I-NP O
. . O O

Peter NNP B-NP B-PER
Blackburn NNP I-NP I-PER
lives VBZ B-VP O
in IN B-PP O
Paris NNP B-NP B-LOC
. . O O

-DOCSTART- -X- -X- O

John NNP B-NP B-PER
visited VBD B-VP O
Berlin NNP B-NP B-LOC
with IN B-PP O
the DT B-NP O
EU NNP I-NP B-ORG
. . O O
";

pub const CONLL_DEV: &str = "\
Peter NNP B-NP B-PER
visited VBD B-VP O
Paris NNP B-NP B-LOC
. . O O
";
