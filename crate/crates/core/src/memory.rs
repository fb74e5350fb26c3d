//! Bi-directionally encoded memories and attention over them.
//!
//! A memory row `m_i` is `tanh(W_fwd h_fwd_i + W_rev h_rev_i + b)` where the
//! two hidden sequences come from GRUs run left-to-right and right-to-left.
//! A step attends with `u_t = m_t` over the rows it may see, reads a convex
//! combination of the output-memory rows, and adds it back to `u_t`.

use std::ops::Range;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Added to attention logits of rows a step may not see. Its softmax weight
/// underflows to exactly zero, so no gradient flows through those entries.
pub const MASKED_LOGIT: f64 = -1e30;

/// GRU cell with update gate `z`, reset gate `r` and candidate state.
///
/// Weights are stored output-major (`hidden x input`), matching `W x` in
/// column-vector notation; activations are row vectors.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_c: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_c: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_c: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut w = |name: &str, cols: usize| store.add_glorot(format!("{prefix}.{name}"), hidden, cols, rng);
        let w_z = w("w_z", input_dim)?;
        let w_r = w("w_r", input_dim)?;
        let w_c = w("w_c", input_dim)?;
        let u_z = w("u_z", hidden)?;
        let u_r = w("u_r", hidden)?;
        let u_c = w("u_c", hidden)?;
        let b_z = store.add_zeros(format!("{prefix}.b_z"), 1, hidden)?;
        let b_r = store.add_zeros(format!("{prefix}.b_r"), 1, hidden)?;
        let b_c = store.add_zeros(format!("{prefix}.b_c"), 1, hidden)?;
        Ok(Self {
            w_z,
            w_r,
            w_c,
            u_z,
            u_r,
            u_c,
            b_z,
            b_r,
            b_c,
            input_dim,
            hidden,
        })
    }

    fn input_projection(&self, g: &mut Graph<'_>, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let (wn, bn) = (g.param(w), g.param(b));
        let p = g.matmul_t(x, wn)?;
        g.add_bias(p, bn)
    }

    /// Recurrence given precomputed input projections `xz`, `xr`, `xc`
    /// (each `1 x hidden`, bias already added).
    fn recur(&self, g: &mut Graph<'_>, xz: NodeId, xr: NodeId, xc: NodeId, h_prev: NodeId) -> Result<NodeId> {
        let (uz, ur, uc) = (g.param(self.u_z), g.param(self.u_r), g.param(self.u_c));
        let hz = g.matmul_t(h_prev, uz)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let hr = g.matmul_t(h_prev, ur)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h_prev)?;
        let hc = g.matmul_t(rh, uc)?;
        let cand = g.add(xc, hc)?;
        let cand = g.tanh(cand);
        // (1 - z) * h_prev + z * cand
        let delta = g.sub(cand, h_prev)?;
        let step = g.mul(z, delta)?;
        g.add(h_prev, step)
    }

    /// One GRU step on a single `1 x input_dim` row.
    pub fn step(&self, g: &mut Graph<'_>, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
        let xz = self.input_projection(g, x, self.w_z, self.b_z)?;
        let xr = self.input_projection(g, x, self.w_r, self.b_r)?;
        let xc = self.input_projection(g, x, self.w_c, self.b_c)?;
        self.recur(g, xz, xr, xc, h_prev)
    }

    /// Runs the GRU over the rows of `xs` from a zero initial state and
    /// returns the hidden state at every position, in input order. With
    /// `reverse` the recurrence runs from the last row to the first.
    pub fn run(&self, g: &mut Graph<'_>, xs: NodeId, reverse: bool) -> Result<Vec<NodeId>> {
        let len = g.shape(xs)[0];
        let xz = self.input_projection(g, xs, self.w_z, self.b_z)?;
        let xr = self.input_projection(g, xs, self.w_r, self.b_r)?;
        let xc = self.input_projection(g, xs, self.w_c, self.b_c)?;
        let mut h = g.constant(Tensor::zeros(1, self.hidden));
        let mut states = vec![h; len];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for t in order {
            let (rz, rr, rc) = if len == 1 {
                (xz, xr, xc)
            } else {
                (g.gather(xz, vec![t])?, g.gather(xr, vec![t])?, g.gather(xc, vec![t])?)
            };
            h = self.recur(g, rz, rr, rc, h)?;
            states[t] = h;
        }
        Ok(states)
    }
}

/// `tanh(W_fwd a + W_rev b + bias)`; merges the two directions.
#[derive(Clone, Copy, Debug)]
pub struct CombineParams {
    pub w_fwd: ParamId,
    pub w_rev: ParamId,
    pub bias: ParamId,
}

impl CombineParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w_fwd: store.add_glorot(format!("{prefix}.w_fwd"), output, input, rng)?,
            w_rev: store.add_glorot(format!("{prefix}.w_rev"), output, input, rng)?,
            bias: store.add_zeros(format!("{prefix}.bias"), 1, output)?,
        })
    }

    pub fn apply(&self, g: &mut Graph<'_>, fwd: NodeId, rev: NodeId) -> Result<NodeId> {
        let (wf, wr, b) = (g.param(self.w_fwd), g.param(self.w_rev), g.param(self.bias));
        let a = g.matmul_t(fwd, wf)?;
        let c = g.matmul_t(rev, wr)?;
        let s = g.add(a, c)?;
        let s = g.add_bias(s, b)?;
        Ok(g.tanh(s))
    }
}

/// Forward GRU, backward GRU and combine layer producing one memory.
#[derive(Clone, Copy, Debug)]
pub struct MemoryEncoder {
    pub fwd: GruParams,
    pub rev: GruParams,
    pub combine: CombineParams,
}

impl MemoryEncoder {
    pub fn init(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fwd: GruParams::init(store, &format!("{prefix}.fwd"), input_dim, hidden, rng)?,
            rev: GruParams::init(store, &format!("{prefix}.rev"), input_dim, hidden, rng)?,
            combine: CombineParams::init(store, &format!("{prefix}.combine"), hidden, hidden, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    /// Encodes `T x d` inputs into a `T x hidden` memory. Dropout with
    /// `keep_rate` is applied to the GRU inputs and to both GRU outputs.
    pub fn build(&self, g: &mut Graph<'_>, xs: NodeId, keep_rate: f64) -> Result<NodeId> {
        let xs = g.dropout(xs, keep_rate)?;
        let fwd = self.fwd.run(g, xs, false)?;
        let rev = self.rev.run(g, xs, true)?;
        let fwd = stack(g, fwd)?;
        let rev = stack(g, rev)?;
        let fwd = g.dropout(fwd, keep_rate)?;
        let rev = g.dropout(rev, keep_rate)?;
        self.combine.apply(g, fwd, rev)
    }
}

pub(crate) fn stack(g: &mut Graph<'_>, rows: Vec<NodeId>) -> Result<NodeId> {
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(rows)
    }
}

/// Attention distribution(s) `softmax(u mᵀ + mask)`, one row per query.
pub fn attend(g: &mut Graph<'_>, u: NodeId, memory: NodeId, mask: Option<Tensor>) -> Result<NodeId> {
    let [rows, _] = g.shape(u);
    let [slots, _] = g.shape(memory);
    let logits = g.matmul_t(u, memory)?;
    let logits = match mask {
        Some(mask) => {
            if mask.shape() != [rows, slots] {
                return Err(Error::Input(format!(
                    "attention mask {:?} does not match {rows}x{slots}",
                    mask.shape()
                )));
            }
            let m = g.constant(mask);
            g.add(logits, m)?
        }
        None => logits,
    };
    Ok(g.softmax(logits))
}

/// `o = p c`: convex combination of output-memory rows.
pub fn read_memory(g: &mut Graph<'_>, attention: NodeId, output_memory: NodeId) -> Result<NodeId> {
    g.matmul(attention, output_memory)
}

/// `u_{k+1} = o_k + u_k`.
pub fn hop_update(g: &mut Graph<'_>, u: NodeId, o: NodeId) -> Result<NodeId> {
    g.add(o, u)
}

/// Per-step label distribution `softmax(W_DA u)` of the memory-network
/// baseline.
pub fn memnn_classify(g: &mut Graph<'_>, u: NodeId, w_da: NodeId) -> Result<NodeId> {
    let logits = g.matmul_t(u, w_da)?;
    Ok(g.softmax(logits))
}

/// How a block of consecutive steps reads from the memory.
#[derive(Clone, Copy, Debug)]
pub struct ReadConfig {
    pub hops: usize,
    /// Prepend a zero "head" row that every step may attend to.
    pub dummy_slot: bool,
    /// Maximum number of real memory rows visible to a step.
    pub window: Option<usize>,
    /// Force `o = 0`.
    pub ablate_read: bool,
}

/// Result of reading the memory for a block of steps.
#[derive(Clone, Debug)]
pub struct BlockRead {
    /// Attention of every hop, `block_len x columns`.
    pub attention: Vec<NodeId>,
    /// Slot index of every attention column. Slot 0 is the dummy head when
    /// present; otherwise slot `i` is memory row `i`. With a dummy head, slot
    /// `i >= 1` is memory row `i - 1`.
    pub columns: Vec<usize>,
    /// Slot index of each step in the block.
    pub step_slots: Vec<usize>,
    /// Final representation `u^{K+1}`, `block_len x hidden`.
    pub output: NodeId,
}

impl ReadConfig {
    pub fn slot_of_row(&self, row: usize) -> usize {
        row + usize::from(self.dummy_slot)
    }

    /// Rows of the memory visible to the step at memory row `t`.
    pub fn visible_rows(&self, t: usize) -> Range<usize> {
        let lo = match self.window {
            Some(w) => (t + 1).saturating_sub(w),
            None => 0,
        };
        lo..t + 1
    }

    /// Attends from every step in `block` over the memory rows each may
    /// see (causal, optionally windowed) plus the optional dummy head.
    ///
    /// `input_memory` and `output_memory` are `T x h`; they may be the same
    /// node when memories are tied.
    pub fn read_block(
        &self,
        g: &mut Graph<'_>,
        input_memory: NodeId,
        output_memory: NodeId,
        block: Range<usize>,
    ) -> Result<BlockRead> {
        let [total, hidden] = g.shape(input_memory);
        if block.is_empty() || block.end > total {
            return Err(Error::Input(format!(
                "step block {block:?} is empty or exceeds memory of {total} rows"
            )));
        }
        if self.hops == 0 {
            return Err(Error::config("hops", "must be at least 1"));
        }
        let lo = self.visible_rows(block.start).start;
        let rows: Vec<usize> = (lo..block.end).collect();
        let mut columns: Vec<usize> = rows.iter().map(|&r| self.slot_of_row(r)).collect();
        if self.dummy_slot {
            columns.insert(0, 0);
        }
        let block_len = block.len();
        let mut mask = Tensor::zeros(block_len, columns.len());
        let mut any_masked = false;
        for (qi, t) in block.clone().enumerate() {
            let visible = self.visible_rows(t);
            for (ci, &slot) in columns.iter().enumerate() {
                let ok = if self.dummy_slot && slot == 0 {
                    true
                } else {
                    let row = slot - usize::from(self.dummy_slot);
                    visible.contains(&row)
                };
                if !ok {
                    mask.set(qi, ci, MASKED_LOGIT);
                    any_masked = true;
                }
            }
        }

        let u0 = g.gather(input_memory, block.clone().collect())?;
        let tied = output_memory == input_memory;
        let mut keys = g.gather(input_memory, rows.clone())?;
        let mut values = match (self.ablate_read, tied) {
            (true, _) => None,
            (false, true) => Some(keys),
            (false, false) => Some(g.gather(output_memory, rows.clone())?),
        };
        if self.dummy_slot {
            let zero = g.constant(Tensor::zeros(1, hidden));
            keys = g.concat_rows(vec![zero, keys])?;
            values = match values {
                Some(_) if tied => Some(keys),
                Some(v) => Some(g.concat_rows(vec![zero, v])?),
                None => None,
            };
        }

        let mut u = u0;
        let mut attention = Vec::with_capacity(self.hops);
        for _ in 0..self.hops {
            let p = attend(g, u, keys, any_masked.then(|| mask.clone()))?;
            attention.push(p);
            if let Some(values) = values {
                let o = read_memory(g, p, values)?;
                u = hop_update(g, u, o)?;
            }
        }
        Ok(BlockRead {
            attention,
            columns,
            step_slots: block.map(|t| self.slot_of_row(t)).collect(),
            output: u,
        })
    }
}
