//! Linear-chain CRF over per-step emission scores.
//!
//! Transition scores live in a `(Y + 2) x (Y + 2)` matrix whose last two
//! indices are the virtual start and stop states. Only three blocks are ever
//! read: `start -> y`, `y -> y'` and `y -> stop`; transitions into start or out
//! of stop do not exist and the corresponding entries never receive gradient.
//!
//! All dynamic programs run in log-space.

use crate::autodiff::{logsumexp, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Index of the virtual start state for a label set of size `num_labels`.
#[inline]
pub fn start_state(num_labels: usize) -> usize {
    num_labels
}

/// Index of the virtual stop state.
#[inline]
pub fn stop_state(num_labels: usize) -> usize {
    num_labels + 1
}

/// Validates shapes and returns `(T, |Y|)`.
fn dims(emissions: &Tensor, transitions: &Tensor) -> Result<(usize, usize)> {
    let [t, y] = emissions.shape();
    if transitions.shape() != [y + 2, y + 2] {
        return Err(Error::Input(format!(
            "transition matrix must be {}x{} for {y} labels, got {:?}",
            y + 2,
            y + 2,
            transitions.shape()
        )));
    }
    Ok((t, y))
}

fn check_labels(labels: &[usize], len: usize, num_labels: usize) -> Result<()> {
    if labels.len() != len {
        return Err(Error::Input(format!(
            "label sequence has length {}, emissions have {len} rows",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= num_labels) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {num_labels} labels"
        )));
    }
    Ok(())
}

/// Unnormalised score of one label sequence: start and stop transitions,
/// `T - 1` internal transitions and `T` emissions.
pub fn sequence_score(emissions: &Tensor, transitions: &Tensor, labels: &[usize]) -> Result<f64> {
    let (t, y) = dims(emissions, transitions)?;
    check_labels(labels, t, y)?;
    let mut score = transitions.get(start_state(y), labels[0]);
    for (i, &l) in labels.iter().enumerate() {
        score += emissions.get(i, l);
        if i + 1 < t {
            score += transitions.get(l, labels[i + 1]);
        }
    }
    score += transitions.get(labels[t - 1], stop_state(y));
    Ok(score)
}

/// Forward recursion; row `t` holds log-sums over all prefixes ending in each
/// label at position `t`.
fn forward_table(emissions: &Tensor, transitions: &Tensor, y: usize) -> Tensor {
    let t_len = emissions.rows();
    let mut alpha = Tensor::zeros(t_len, y);
    let start = start_state(y);
    for j in 0..y {
        alpha.set(0, j, transitions.get(start, j) + emissions.get(0, j));
    }
    let mut scratch = vec![0.0; y];
    for t in 1..t_len {
        for j in 0..y {
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = alpha.get(t - 1, i) + transitions.get(i, j);
            }
            alpha.set(t, j, logsumexp(&scratch) + emissions.get(t, j));
        }
    }
    alpha
}

/// Backward recursion; row `t` holds log-sums over all suffixes after position
/// `t` given the label at `t`, including the stop transition.
fn backward_table(emissions: &Tensor, transitions: &Tensor, y: usize) -> Tensor {
    let t_len = emissions.rows();
    let mut beta = Tensor::zeros(t_len, y);
    let stop = stop_state(y);
    for i in 0..y {
        beta.set(t_len - 1, i, transitions.get(i, stop));
    }
    let mut scratch = vec![0.0; y];
    for t in (0..t_len - 1).rev() {
        for i in 0..y {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = transitions.get(i, j) + emissions.get(t + 1, j) + beta.get(t + 1, j);
            }
            beta.set(t, i, logsumexp(&scratch));
        }
    }
    beta
}

fn final_log_sum(alpha: &Tensor, transitions: &Tensor, y: usize) -> f64 {
    let last = alpha.rows() - 1;
    let stop = stop_state(y);
    let terms: Vec<f64> = (0..y)
        .map(|j| alpha.get(last, j) + transitions.get(j, stop))
        .collect();
    logsumexp(&terms)
}

/// Log of the sum of exponentiated scores over every label sequence.
pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> Result<f64> {
    let (_, y) = dims(emissions, transitions)?;
    let alpha = forward_table(emissions, transitions, y);
    Ok(final_log_sum(&alpha, transitions, y))
}

/// Negative log-likelihood of the gold sequence; never negative.
pub fn crf_nll(emissions: &Tensor, transitions: &Tensor, labels: &[usize]) -> Result<f64> {
    let score = sequence_score(emissions, transitions, labels)?;
    let log_z = log_partition(emissions, transitions)?;
    // log Z >= score mathematically; rounding can leave a tiny negative residue
    Ok((log_z - score).max(0.0))
}

/// Per-position posterior label probabilities via forward-backward.
pub fn marginals(emissions: &Tensor, transitions: &Tensor) -> Result<Tensor> {
    let (t_len, y) = dims(emissions, transitions)?;
    let alpha = forward_table(emissions, transitions, y);
    let beta = backward_table(emissions, transitions, y);
    let log_z = final_log_sum(&alpha, transitions, y);
    let mut out = Tensor::zeros(t_len, y);
    for t in 0..t_len {
        for j in 0..y {
            out.set(t, j, (alpha.get(t, j) + beta.get(t, j) - log_z).exp());
        }
    }
    Ok(out)
}

/// Highest-scoring label sequence. Ties go to the lower label index, both at
/// every backpointer and at the final state.
pub fn viterbi_decode(emissions: &Tensor, transitions: &Tensor) -> Result<Vec<usize>> {
    let (t_len, y) = dims(emissions, transitions)?;
    let start = start_state(y);
    let stop = stop_state(y);
    let mut delta: Vec<f64> = (0..y)
        .map(|j| transitions.get(start, j) + emissions.get(0, j))
        .collect();
    let mut back = vec![0usize; t_len * y];
    let mut next = vec![0.0; y];
    for t in 1..t_len {
        for j in 0..y {
            let mut best = 0;
            let mut best_score = delta[0] + transitions.get(0, j);
            for (i, &d) in delta.iter().enumerate().skip(1) {
                let s = d + transitions.get(i, j);
                if s > best_score {
                    best_score = s;
                    best = i;
                }
            }
            back[t * y + j] = best;
            next[j] = best_score + emissions.get(t, j);
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    let mut last_score = delta[0] + transitions.get(0, stop);
    for (j, &d) in delta.iter().enumerate().skip(1) {
        let s = d + transitions.get(j, stop);
        if s > last_score {
            last_score = s;
            last = j;
        }
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[t * y + path[t]];
    }
    Ok(path)
}

/// NLL together with its gradients with respect to the emissions and the
/// transition matrix.
///
/// The gradient is obtained by reverse-mode differentiation of the forward
/// recursion alone (softmax weights of each log-sum), which is a different
/// route from the alpha/beta marginals in [`marginals`].
pub fn nll_with_gradients(
    emissions: &Tensor,
    transitions: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor, Tensor)> {
    let (t_len, y) = dims(emissions, transitions)?;
    check_labels(labels, t_len, y)?;
    let start = start_state(y);
    let stop = stop_state(y);
    let alpha = forward_table(emissions, transitions, y);
    let log_z = final_log_sum(&alpha, transitions, y);
    let score = sequence_score(emissions, transitions, labels)?;

    let mut g_em = Tensor::zeros(t_len, y);
    let mut g_tr = Tensor::zeros(y + 2, y + 2);

    // d logZ / d alpha[T-1, j]
    let mut g_alpha: Vec<f64> = (0..y)
        .map(|j| (alpha.get(t_len - 1, j) + transitions.get(j, stop) - log_z).exp())
        .collect();
    for (j, &g) in g_alpha.iter().enumerate() {
        g_tr.set(j, stop, g);
    }
    let mut g_prev = vec![0.0; y];
    let mut w = vec![0.0; y];
    for t in (1..t_len).rev() {
        g_prev.fill(0.0);
        for j in 0..y {
            let gj = g_alpha[j];
            g_em.set(t, j, g_em.get(t, j) + gj);
            if gj == 0.0 {
                continue;
            }
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = alpha.get(t - 1, i) + transitions.get(i, j);
            }
            let lse = logsumexp(&w);
            for i in 0..y {
                let contrib = gj * (w[i] - lse).exp();
                g_prev[i] += contrib;
                g_tr.set(i, j, g_tr.get(i, j) + contrib);
            }
        }
        std::mem::swap(&mut g_alpha, &mut g_prev);
    }
    for (j, &g) in g_alpha.iter().enumerate() {
        g_em.set(0, j, g_em.get(0, j) + g);
        g_tr.set(start, j, g_tr.get(start, j) + g);
    }

    // minus the gold-path indicator counts
    g_tr.set(start, labels[0], g_tr.get(start, labels[0]) - 1.0);
    for (t, &l) in labels.iter().enumerate() {
        g_em.set(t, l, g_em.get(t, l) - 1.0);
        if t + 1 < t_len {
            let n = labels[t + 1];
            g_tr.set(l, n, g_tr.get(l, n) - 1.0);
        }
    }
    let last = labels[t_len - 1];
    g_tr.set(last, stop, g_tr.get(last, stop) - 1.0);

    Ok(((log_z - score).max(0.0), g_em, g_tr))
}

/// Trainable CRF parameters: transitions and the emission projection.
#[derive(Clone, Copy, Debug)]
pub struct CrfParams {
    pub transitions: ParamId,
    pub projection: ParamId,
    pub num_labels: usize,
}

impl CrfParams {
    /// Transitions start at zero; the projection is Glorot-initialised.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        num_labels: usize,
        input_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let transitions = store.add_zeros(format!("{prefix}.transitions"), num_labels + 2, num_labels + 2)?;
        let projection = store.add_glorot(format!("{prefix}.projection"), num_labels, input_dim, rng)?;
        Ok(Self {
            transitions,
            projection,
            num_labels,
        })
    }

    /// Emission scores `P = U W_proj^T` for a block of step representations.
    pub fn emissions(&self, g: &mut Graph<'_>, steps: NodeId) -> Result<NodeId> {
        let w = g.param(self.projection);
        g.matmul_t(steps, w)
    }

    /// NLL node. With `frozen` set the transition matrix reads as zero and no
    /// gradient reaches it.
    pub fn nll(&self, g: &mut Graph<'_>, emissions: NodeId, labels: &[usize], frozen: bool) -> Result<NodeId> {
        let transitions = if frozen {
            let n = self.num_labels + 2;
            g.constant(Tensor::zeros(n, n))
        } else {
            g.param(self.transitions)
        };
        g.crf_nll(emissions, transitions, labels.to_vec())
    }

    /// Transition values as the forward pass would see them.
    pub fn effective_transitions(&self, store: &ParamStore, frozen: bool) -> Tensor {
        if frozen {
            let n = self.num_labels + 2;
            Tensor::zeros(n, n)
        } else {
            store.get(self.transitions).clone()
        }
    }
}
