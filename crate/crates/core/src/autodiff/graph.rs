use std::collections::HashMap;

use rand::Rng;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::crf;
use crate::error::{Error, Result};

/// Probability floor applied before taking logs in [`Graph::neg_log_pick`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Constant,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    AddBias { x: NodeId, bias: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId),
    Gather { src: NodeId, rows: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Dropout { x: NodeId, keep: f64 },
    Sum(NodeId),
    CrfNll { emissions: NodeId, transitions: NodeId, labels: Vec<usize> },
    NegLogPick { p: NodeId, picks: Vec<(usize, usize)> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Dropout { .. } => "dropout",
            Op::Sum(_) => "sum",
            Op::CrfNll { .. } => "crf_nll",
            Op::NegLogPick { .. } => "neg_log_pick",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: [usize; 2],
    requires_grad: bool,
}

/// Auxiliary forward-pass state needed by some backward rules.
#[derive(Clone, Debug)]
enum Aux {
    None,
    Mask(Vec<f64>),
    CrfGrads { emissions: Tensor, transitions: Tensor },
}

/// Static computation graph over a borrowed parameter store.
///
/// Nodes are appended in topological order by the builder methods, which
/// check shapes eagerly. [`Graph::forward`] then evaluates every node and
/// [`Graph::backward`] propagates gradients from a scalar loss node.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
    evaluated: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
            evaluated: false,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: [usize; 2], value: Option<Tensor>) -> NodeId {
        let requires_grad = match &op {
            Op::Input(_) | Op::Constant => false,
            Op::Param(p) => self.store.is_trainable(*p),
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        self.values.push(value);
        self.aux.push(Aux::None);
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    // ---- leaves -------------------------------------------------------

    /// Placeholder bound by name at [`Graph::forward`] time.
    pub fn input(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input(name.into()), [rows, cols], None)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape();
        self.push(Op::Constant, shape, Some(value))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let shape = self.store.get(id).shape();
        self.push(Op::Param(id), shape, None)
    }

    // ---- kernels ------------------------------------------------------

    /// `a · b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [r, k] = self.shape(a);
        let [k2, c] = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            [r, c],
            None,
        ))
    }

    /// `a · bᵀ`; the natural form for `x W^T` with row-vector activations.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [r, k] = self.shape(a);
        let [c, k2] = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul", format!("inner dims {k} vs {k2} (transposed rhs)")));
        }
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            [r, c],
            None,
        ))
    }

    /// Adds a `1 x c` bias to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let [r, c] = self.shape(x);
        if self.shape(bias) != [1, c] {
            return Err(self.shape_err(
                "add_bias",
                format!("bias {:?} does not fit rows of width {c}", self.shape(bias)),
            ));
        }
        Ok(self.push(Op::AddBias { x, bias }, [r, c], None))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<[usize; 2]> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s, None))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Scale(x, factor), s, None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Tanh(x), s, None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Sigmoid(x), s, None)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Softmax(x), s, None)
    }

    /// Row-wise log-sum-exp, producing an `r x 1` column.
    pub fn logsumexp(&mut self, x: NodeId) -> NodeId {
        let [r, _] = self.shape(x);
        self.push(Op::LogSumExp(x), [r, 1], None)
    }

    /// Selects rows of `src` (repeats allowed).
    pub fn gather(&mut self, src: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let [n, c] = self.shape(src);
        if rows.is_empty() {
            return Err(self.shape_err("gather", "empty row selection".into()));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(self.shape_err("gather", format!("row {bad} out of range for {n} rows")));
        }
        let r = rows.len();
        Ok(self.push(Op::Gather { src, rows }, [r, c], None))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| self.shape_err("concat_cols", "no inputs".into()))?;
        let r = self.shape(first)[0];
        let mut c = 0;
        for &p in &parts {
            let [pr, pc] = self.shape(p);
            if pr != r {
                return Err(self.shape_err("concat_cols", format!("row counts {r} vs {pr}")));
            }
            c += pc;
        }
        Ok(self.push(Op::ConcatCols(parts), [r, c], None))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| self.shape_err("concat_rows", "no inputs".into()))?;
        let c = self.shape(first)[1];
        let mut r = 0;
        for &p in &parts {
            let [pr, pc] = self.shape(p);
            if pc != c {
                return Err(self.shape_err("concat_rows", format!("column counts {c} vs {pc}")));
            }
            r += pr;
        }
        Ok(self.push(Op::ConcatRows(parts), [r, c], None))
    }

    /// Inverted dropout: in train mode each coordinate is kept with
    /// probability `keep` and scaled by `1 / keep`; identity in eval mode.
    pub fn dropout(&mut self, x: NodeId, keep: f64) -> Result<NodeId> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::config("keep_rate", format!("must lie in (0, 1], got {keep}")));
        }
        let s = self.shape(x);
        Ok(self.push(Op::Dropout { x, keep }, s, None))
    }

    /// Sum of all entries, as a `1 x 1` scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), [1, 1], None)
    }

    /// Negative log-likelihood of a linear-chain CRF (see [`crate::crf`]).
    pub fn crf_nll(&mut self, emissions: NodeId, transitions: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let [t, y] = self.shape(emissions);
        if self.shape(transitions) != [y + 2, y + 2] {
            return Err(self.shape_err(
                "crf_nll",
                format!("transitions {:?} do not fit {y} labels", self.shape(transitions)),
            ));
        }
        if labels.len() != t {
            return Err(self.shape_err("crf_nll", format!("{} labels for {t} steps", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= y) {
            return Err(Error::Input(format!("label {bad} out of range for {y} labels")));
        }
        Ok(self.push(
            Op::CrfNll {
                emissions,
                transitions,
                labels,
            },
            [1, 1],
            None,
        ))
    }

    /// `sum_k -ln(max(p[row_k, col_k], 1e-12))`: cross-entropy against
    /// one-hot targets given as `(row, col)` picks into a distribution matrix.
    pub fn neg_log_pick(&mut self, p: NodeId, picks: Vec<(usize, usize)>) -> Result<NodeId> {
        let [r, c] = self.shape(p);
        if let Some(&(pr, pc)) = picks.iter().find(|&&(pr, pc)| pr >= r || pc >= c) {
            return Err(self.shape_err("neg_log_pick", format!("pick ({pr}, {pc}) outside {r}x{c}")));
        }
        Ok(self.push(Op::NegLogPick { p, picks }, [1, 1], None))
    }

    // ---- evaluation ---------------------------------------------------

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        if let Op::Param(p) = self.nodes[id.0].op {
            return Ok(self.store.get(p));
        }
        self.values[id.0]
            .as_ref()
            .ok_or_else(|| Error::State(format!("node {} has not been evaluated", id.0)))
    }

    /// Evaluates every node in order. Inputs are bound by name; dropout masks
    /// are drawn from `rng` in node order, so a seeded rng fixes the result.
    pub fn forward(&mut self, inputs: &HashMap<String, Tensor>, mode: Mode, rng: &mut impl Rng) -> Result<()> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let (value, aux) = match &op {
                Op::Param(_) => {
                    continue;
                }
                Op::Constant => {
                    continue;
                }
                Op::Input(name) => {
                    let v = inputs
                        .get(name)
                        .ok_or_else(|| Error::State(format!("input `{name}` is not bound")))?;
                    if v.shape() != self.nodes[i].shape {
                        return Err(Error::Shape {
                            node: i,
                            op: "input",
                            detail: format!(
                                "`{name}` declared {:?}, bound {:?}",
                                self.nodes[i].shape,
                                v.shape()
                            ),
                        });
                    }
                    (v.clone(), Aux::None)
                }
                _ => self.eval_op(&op, mode, rng)?,
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: op.name(),
                });
            }
            self.values[i] = Some(value);
            self.aux[i] = aux;
        }
        self.evaluated = true;
        Ok(())
    }

    /// Convenience: forward pass in eval mode with no named inputs, returning
    /// the value of `output`.
    pub fn evaluate(&mut self, output: NodeId) -> Result<Tensor> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        self.forward(&HashMap::new(), Mode::Eval, &mut rng)?;
        self.value(output).cloned()
    }

    fn v(&self, id: NodeId) -> &Tensor {
        match self.nodes[id.0].op {
            Op::Param(p) => self.store.get(p),
            _ => self.values[id.0].as_ref().expect("parent evaluated before child"),
        }
    }

    fn eval_op(&self, op: &Op, mode: Mode, rng: &mut impl Rng) -> Result<(Tensor, Aux)> {
        let out = match op {
            Op::MatMul { a, b, transpose_b } => {
                if *transpose_b {
                    matmul_bt(self.v(*a), self.v(*b))
                } else {
                    matmul(self.v(*a), self.v(*b))
                }
            }
            Op::AddBias { x, bias } => {
                let mut out = self.v(*x).clone();
                let b = self.v(*bias).data();
                for r in 0..out.rows() {
                    for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
                        *o += bv;
                    }
                }
                out
            }
            Op::Add(a, b) => zip_map(self.v(*a), self.v(*b), |x, y| x + y),
            Op::Sub(a, b) => zip_map(self.v(*a), self.v(*b), |x, y| x - y),
            Op::Mul(a, b) => zip_map(self.v(*a), self.v(*b), |x, y| x * y),
            Op::Scale(x, f) => self.v(*x).map(|v| v * f),
            Op::Tanh(x) => self.v(*x).map(f64::tanh),
            Op::Sigmoid(x) => self.v(*x).map(sigmoid),
            Op::Softmax(x) => softmax_rows(self.v(*x)),
            Op::LogSumExp(x) => {
                let x = self.v(*x);
                let data = (0..x.rows()).map(|r| logsumexp(x.row(r))).collect();
                Tensor::new(x.rows(), 1, data)?
            }
            Op::Gather { src, rows } => {
                let src = self.v(*src);
                let mut data = Vec::with_capacity(rows.len() * src.cols());
                for &r in rows {
                    data.extend_from_slice(src.row(r));
                }
                Tensor::new(rows.len(), src.cols(), data)?
            }
            Op::ConcatCols(parts) => {
                let r = self.v(parts[0]).rows();
                let c: usize = parts.iter().map(|p| self.v(*p).cols()).sum();
                let mut data = Vec::with_capacity(r * c);
                for row in 0..r {
                    for p in parts {
                        data.extend_from_slice(self.v(*p).row(row));
                    }
                }
                Tensor::new(r, c, data)?
            }
            Op::ConcatRows(parts) => {
                let c = self.v(parts[0]).cols();
                let mut data = Vec::new();
                for p in parts {
                    data.extend_from_slice(self.v(*p).data());
                }
                Tensor::new(data.len() / c, c, data)?
            }
            Op::Dropout { x, keep } => {
                let x = self.v(*x);
                if mode == Mode::Eval || *keep >= 1.0 {
                    return Ok((x.clone(), Aux::None));
                }
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < *keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                return Ok((Tensor::new(x.rows(), x.cols(), data)?, Aux::Mask(mask)));
            }
            Op::Sum(x) => Tensor::scalar(self.v(*x).data().iter().sum()),
            Op::CrfNll {
                emissions,
                transitions,
                labels,
            } => {
                let (nll, ge, gt) = crf::nll_with_gradients(self.v(*emissions), self.v(*transitions), labels)?;
                return Ok((
                    Tensor::scalar(nll),
                    Aux::CrfGrads {
                        emissions: ge,
                        transitions: gt,
                    },
                ));
            }
            Op::NegLogPick { p, picks } => {
                let p = self.v(*p);
                let loss = picks.iter().map(|&(r, c)| -p.get(r, c).max(PROB_FLOOR).ln()).sum();
                Tensor::scalar(loss)
            }
            Op::Input(_) | Op::Constant | Op::Param(_) => unreachable!("leaves are not evaluated"),
        };
        Ok((out, Aux::None))
    }

    // ---- backward -----------------------------------------------------

    /// Gradients of a scalar `loss` node with respect to every trainable
    /// parameter it depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::State("backward called before forward".into()));
        }
        if self.shape(loss) != [1, 1] {
            return Err(Error::State(format!(
                "loss node {} is {:?}, expected a scalar",
                loss.0,
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new(self.store.len());

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(p) => out.accumulate(*p, &g),
                Op::Input(_) | Op::Constant => {}
                Op::MatMul { a, b, transpose_b } => {
                    let (va, vb) = (self.v(*a), self.v(*b));
                    if self.needs(*a) {
                        let ga = if *transpose_b { matmul(&g, vb) } else { matmul_bt(&g, vb) };
                        acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = if *transpose_b { matmul_at(&g, va) } else { matmul_at(va, &g) };
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::AddBias { x, bias } => {
                    if self.needs(*bias) {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *bias, gb);
                    }
                    if self.needs(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, zip_map(&g, self.v(*b), |x, y| x * y));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, zip_map(&g, self.v(*a), |x, y| x * y));
                    }
                }
                Op::Scale(x, f) => acc(&mut grads, *x, g.map(|v| v * f)),
                Op::Tanh(x) => {
                    let y = self.values[i].as_ref().expect("evaluated");
                    acc(&mut grads, *x, zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::Sigmoid(x) => {
                    let y = self.values[i].as_ref().expect("evaluated");
                    acc(&mut grads, *x, zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv)));
                }
                Op::Softmax(x) => {
                    let y = self.values[i].as_ref().expect("evaluated");
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LogSumExp(x) => {
                    let sm = softmax_rows(self.v(*x));
                    let mut gx = sm;
                    for r in 0..gx.rows() {
                        let gr = g.get(r, 0);
                        for v in gx.row_mut(r) {
                            *v *= gr;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { src, rows } => {
                    let [n, c] = self.shape(*src);
                    if let Op::Param(p) = self.nodes[src.0].op {
                        // scatter straight into the parameter gradient
                        let slot = out.slot(p, [n, c]);
                        for (k, &r) in rows.iter().enumerate() {
                            for (o, v) in slot.row_mut(r).iter_mut().zip(g.row(k)) {
                                *o += v;
                            }
                        }
                    } else {
                        let mut gs = Tensor::zeros(n, c);
                        for (k, &r) in rows.iter().enumerate() {
                            for (o, v) in gs.row_mut(r).iter_mut().zip(g.row(k)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *src, gs);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let [pr, pc] = self.shape(*p);
                        if self.needs(*p) {
                            let mut gp = Tensor::zeros(pr, pc);
                            for r in 0..pr {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                            }
                            acc(&mut grads, *p, gp);
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pr = self.shape(*p)[0];
                        if self.needs(*p) {
                            let data = g.data()[offset * c..(offset + pr) * c].to_vec();
                            acc(&mut grads, *p, Tensor::new(pr, c, data)?);
                        }
                        offset += pr;
                    }
                }
                Op::Dropout { x, .. } => match &self.aux[i] {
                    Aux::Mask(mask) => {
                        let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                        acc(&mut grads, *x, Tensor::new(g.rows(), g.cols(), data)?);
                    }
                    _ => acc(&mut grads, *x, g),
                },
                Op::Sum(x) => {
                    let [r, c] = self.shape(*x);
                    acc(&mut grads, *x, Tensor::filled(r, c, g.item()));
                }
                Op::CrfNll {
                    emissions,
                    transitions,
                    ..
                } => {
                    let Aux::CrfGrads {
                        emissions: ge,
                        transitions: gt,
                    } = &self.aux[i]
                    else {
                        return Err(Error::State(format!("crf node {i} missing forward state")));
                    };
                    let up = g.item();
                    if self.needs(*emissions) {
                        acc(&mut grads, *emissions, ge.map(|v| v * up));
                    }
                    if self.needs(*transitions) {
                        acc(&mut grads, *transitions, gt.map(|v| v * up));
                    }
                }
                Op::NegLogPick { p, picks } => {
                    let pv = self.v(*p);
                    let up = g.item();
                    let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                    for &(r, c) in picks {
                        let prob = pv.get(r, c);
                        if prob > PROB_FLOOR {
                            gp.set(r, c, gp.get(r, c) - up / prob);
                        }
                    }
                    acc(&mut grads, *p, gp);
                }
            }
        }
        Ok(out)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

fn parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input(_) | Op::Constant | Op::Param(_) => vec![],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::AddBias { x, bias } => vec![*x, *bias],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Tanh(x)
        | Op::Sigmoid(x)
        | Op::Softmax(x)
        | Op::LogSumExp(x)
        | Op::Sum(x)
        | Op::Dropout { x, .. } => vec![*x],
        Op::Gather { src, .. } => vec![*src],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
        Op::CrfNll {
            emissions,
            transitions,
            ..
        } => vec![*emissions, *transitions],
        Op::NegLogPick { p, .. } => vec![*p],
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("shapes checked at build time")
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln(sum(exp(xs)))`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Row-wise softmax computed as `exp(x - logsumexp(x))`.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let lse = logsumexp(x.row(r));
        for v in out.row_mut(r) {
            *v = (*v - lse).exp();
        }
    }
    out
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(r, c);
    let bd = b.data();
    for i in 0..r {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
pub(crate) fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let arow = a.row(i);
        for j in 0..c {
            let brow = b.row(j);
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out.set(i, j, s);
        }
    }
    out
}

/// `aᵀ · b`
pub(crate) fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, r, c) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(r, c);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.row_mut(i).iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
