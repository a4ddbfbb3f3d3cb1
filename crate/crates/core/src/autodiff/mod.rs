//! Define-by-run reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in execution order. Inputs always
//! precede the nodes that consume them, so [`Tape::backward`] only needs a
//! single reverse sweep. Tapes are rebuilt for every optimisation step.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a recorded primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale,
    Relu,
    Tanh,
    Sigmoid,
    HardSigmoid,
    Softmax,
    Ln,
    Clamp,
    Mean,
    Sum,
    MeanRows,
    RowNorm,
    NormalizeRows,
    BceWithLogits,
    CeWithLogits,
}

/// Order of the per-row norm primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormOrder {
    L1,
    L2,
}

impl NormOrder {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(NormOrder::L1),
            2 => Ok(NormOrder::L2),
            other => Err(Error::invalid(format!(
                "norm order p must be 1 or 2, got {other}"
            ))),
        }
    }
}

/// Scales the adjoint of one primitive kind. Only used to verify that the
/// gradient checker catches a broken backward rule.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointFault {
    pub op: OpKind,
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    HardSigmoid(Var, f64),
    Softmax(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Mean(Var),
    Sum(Var),
    MeanRows(Var),
    RowNorm(Var, NormOrder),
    NormalizeRows(Var),
    BceWithLogits(Var, Tensor),
    CeWithLogits(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::HardSigmoid(..) => OpKind::HardSigmoid,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Ln(..) => OpKind::Ln,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::RowNorm(..) => OpKind::RowNorm,
            Op::NormalizeRows(..) => OpKind::NormalizeRows,
            Op::BceWithLogits(..) => OpKind::BceWithLogits,
            Op::CeWithLogits(..) => OpKind::CeWithLogits,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves a gradient out; returns zeros shaped like `like` when the leaf
    /// did not influence the loss.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Recording of primitive operations for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<AdjointFault>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    #[doc(hidden)]
    pub fn with_adjoint_fault(fault: Option<AdjointFault>) -> Self {
        Tape {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a non-trainable leaf; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { trainable },
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name(op.kind()),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- forward primitives -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// Adds a row vector (`[m]` or `[1, m]`) to every row of `a: [n, m]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, m) = self.matrix_dims("add_row", a)?;
        let rv = self.value(row);
        if rv.len() != m || rv.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.value(a).shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let r = rv.data().to_vec();
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| c * x);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(logistic);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// `clamp(slope·x + 0.5, 0, 1)`; an infinite slope gives the unit step
    /// with value 0.5 at the origin.
    pub fn hard_sigmoid(&mut self, a: Var, slope: f64) -> Result<Var> {
        if slope.is_nan() || slope <= 0.0 {
            return Err(Error::invalid(format!(
                "hard sigmoid slope must be > 0, got {slope}"
            )));
        }
        let t = self.value(a).map(|x| hard_sigmoid(x, slope));
        self.push(t, Op::HardSigmoid(a, slope), &[a])
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Softmax(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some((index, &value)) = ta.data().iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(Error::LogDomain { index, value });
        }
        let t = ta.map(f64::ln);
        self.push(t, Op::Ln(a), &[a])
    }

    /// Gradient passes strictly inside `(lo, hi)` and is zero elsewhere.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let v = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push(Tensor::scalar(v), Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(v), Op::Sum(a), &[a])
    }

    /// Column means of `a: [n, m]`, giving `[1, m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("mean_rows", a)?;
        let mut out = vec![0.0; m];
        for row in self.value(a).iter_rows() {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let t = Tensor::new(vec![1, m], out)?;
        self.push(t, Op::MeanRows(a), &[a])
    }

    /// Per-row p-norm of `a: [n, m]`, giving `[n, 1]`.
    pub fn row_norm(&mut self, a: Var, order: NormOrder) -> Result<Var> {
        let (n, _) = self.matrix_dims("row_norm", a)?;
        let out = self
            .value(a)
            .iter_rows()
            .map(|r| match order {
                NormOrder::L1 => r.iter().map(|x| x.abs()).sum(),
                NormOrder::L2 => r.iter().map(|x| x * x).sum::<f64>().sqrt(),
            })
            .collect();
        let t = Tensor::new(vec![n, 1], out)?;
        self.push(t, Op::RowNorm(a, order), &[a])
    }

    /// Divides each row of a positive-sum matrix by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims("normalize_rows", a)?;
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::invalid(format!(
                    "normalize_rows: row {i} sums to {s}"
                )));
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::NormalizeRows(a), &[a])
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let tl = self.value(logits);
        if tl.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                left: tl.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let n = tl.len() as f64;
        let v = tl
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(v),
            Op::BceWithLogits(logits, targets.clone()),
            &[logits],
        )
    }

    /// Mean categorical cross-entropy of `softmax(logits)` against labels.
    pub fn ce_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix_dims("ce_with_logits", logits)?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "ce_with_logits",
                left: vec![n, m],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {m} classes"
            )));
        }
        let v = self
            .value(logits)
            .iter_rows()
            .zip(labels)
            .map(|(r, &l)| log_sum_exp(r) - r[l])
            .sum::<f64>()
            / n as f64;
        self.push(
            Tensor::scalar(v),
            Op::CeWithLogits(logits, labels.to_vec()),
            &[logits],
        )
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if let Op::Leaf { trainable } = node.op {
                if !trainable {
                    grads[id] = None;
                }
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let factor = match self.fault {
                Some(f) if f.op == node.op.kind() => f.factor,
                _ => 1.0,
            };
            self.propagate(node, &g, factor, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, factor: f64, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let gd = g.data();
        let mut send = |v: Var, mut delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            if factor != 1.0 {
                delta.data_mut().iter_mut().for_each(|d| *d *= factor);
            }
            match &mut grads[v.0] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(delta.data())
                    .for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("adjoint shape")
        };
        let unary = |a: Var, f: &dyn Fn(usize, f64) -> f64| {
            let data = gd.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            like(a, data)
        };
        // Adjoint of a reduction, indexed over the input's elements.
        let expand = |a: Var, f: &dyn Fn(usize) -> f64| {
            let data = (0..self.value(a).len()).map(f).collect();
            like(a, data)
        };

        match &node.op {
            Op::Leaf { .. } => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                if self.nodes[a.0].needs_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm_strided(
                        m,
                        n,
                        k,
                        gd,
                        (n as isize, 1),
                        self.value(b).data(),
                        (1, n as isize),
                        &mut da,
                        0.0,
                    );
                    send(a, like(a, da));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm_strided(
                        k,
                        m,
                        n,
                        self.value(a).data(),
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        &mut db,
                        0.0,
                    );
                    send(b, like(b, db));
                }
            }
            &Op::Add(a, b) => {
                send(a, g.clone());
                send(b, g.clone());
            }
            &Op::Sub(a, b) => {
                send(a, g.clone());
                send(b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.nodes[a.0].needs_grad {
                    send(a, unary(a, &|i, gi| gi * vb[i]));
                }
                if self.nodes[b.0].needs_grad {
                    send(b, unary(b, &|i, gi| gi * va[i]));
                }
            }
            &Op::AddRow(a, row) => {
                send(a, g.clone());
                if self.nodes[row.0].needs_grad {
                    let m = g.cols();
                    let mut acc = vec![0.0; m];
                    for r in g.iter_rows() {
                        acc.iter_mut().zip(r).for_each(|(s, x)| *s += x);
                    }
                    send(row, like(row, acc));
                }
            }
            &Op::Scale(a, c) => send(a, g.map(|x| c * x)),
            &Op::Relu(a) => {
                let x = self.value(a).data();
                send(a, unary(a, &|i, gi| if x[i] > 0.0 { gi } else { 0.0 }));
            }
            &Op::Tanh(a) => {
                let yd = y.data();
                send(a, unary(a, &|i, gi| gi * (1.0 - yd[i] * yd[i])));
            }
            &Op::Sigmoid(a) => {
                let yd = y.data();
                send(a, unary(a, &|i, gi| gi * yd[i] * (1.0 - yd[i])));
            }
            &Op::HardSigmoid(a, slope) => {
                let x = self.value(a).data();
                send(
                    a,
                    unary(a, &|i, gi| {
                        let u = slope * x[i] + 0.5;
                        if slope.is_finite() && u > 0.0 && u < 1.0 {
                            gi * slope
                        } else {
                            0.0
                        }
                    }),
                );
            }
            &Op::Softmax(a) => {
                let c = y.cols();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_mut(c).zip(y.iter_rows()).zip(g.iter_rows()) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(a, like(a, out));
            }
            &Op::Ln(a) => {
                let x = self.value(a).data();
                send(a, unary(a, &|i, gi| gi / x[i]));
            }
            &Op::Clamp(a, lo, hi) => {
                let x = self.value(a).data();
                send(
                    a,
                    unary(a, &|i, gi| if x[i] > lo && x[i] < hi { gi } else { 0.0 }),
                );
            }
            &Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                send(a, Tensor::full(self.value(a).shape(), gd[0] / n));
            }
            &Op::Sum(a) => send(a, Tensor::full(self.value(a).shape(), gd[0])),
            &Op::MeanRows(a) => {
                let xa = self.value(a);
                let n = xa.rows() as f64;
                let m = xa.cols();
                let data = (0..xa.len()).map(|i| gd[i % m] / n).collect();
                send(a, like(a, data));
            }
            &Op::RowNorm(a, order) => {
                let xa = self.value(a);
                let m = xa.cols();
                let yd = y.data();
                let xd = xa.data();
                send(
                    a,
                    expand(a, &|i| {
                        let r = i / m;
                        let gi = gd[r];
                        match order {
                            NormOrder::L1 => {
                                if xd[i] > 0.0 {
                                    gi
                                } else if xd[i] < 0.0 {
                                    -gi
                                } else {
                                    0.0
                                }
                            }
                            NormOrder::L2 => {
                                if yd[r] > 0.0 {
                                    gi * xd[i] / yd[r]
                                } else {
                                    0.0
                                }
                            }
                        }
                    }),
                );
            }
            &Op::NormalizeRows(a) => {
                let xa = self.value(a);
                let c = xa.cols();
                let mut out = vec![0.0; xa.len()];
                for (((o, yr), gr), xr) in out
                    .chunks_mut(c)
                    .zip(y.iter_rows())
                    .zip(g.iter_rows())
                    .zip(xa.iter_rows())
                {
                    let s: f64 = xr.iter().sum();
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        o[j] = (gr[j] - dot) / s;
                    }
                }
                send(a, like(a, out));
            }
            Op::BceWithLogits(a, targets) => {
                let a = *a;
                let x = self.value(a).data();
                let n = x.len() as f64;
                let t = targets.data();
                send(a, expand(a, &|i| gd[0] * (logistic(x[i]) - t[i]) / n));
            }
            Op::CeWithLogits(a, labels) => {
                let a = *a;
                let xa = self.value(a);
                let (n, m) = (xa.rows(), xa.cols());
                let mut out = xa.data().to_vec();
                for (r, row) in out.chunks_mut(m).enumerate() {
                    softmax_in_place(row);
                    row[labels[r]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gd[0] / n as f64);
                }
                send(a, like(a, out));
            }
        }
    }
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::MatMul => "matmul",
        OpKind::Add => "add",
        OpKind::AddRow => "add_row",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Scale => "scale",
        OpKind::Relu => "relu",
        OpKind::Tanh => "tanh",
        OpKind::Sigmoid => "sigmoid",
        OpKind::HardSigmoid => "hard_sigmoid",
        OpKind::Softmax => "softmax",
        OpKind::Ln => "ln",
        OpKind::Clamp => "clamp",
        OpKind::Mean => "mean",
        OpKind::Sum => "sum",
        OpKind::MeanRows => "mean_rows",
        OpKind::RowNorm => "row_norm",
        OpKind::NormalizeRows => "normalize_rows",
        OpKind::BceWithLogits => "bce_with_logits",
        OpKind::CeWithLogits => "ce_with_logits",
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn hard_sigmoid(x: f64, slope: f64) -> f64 {
    if slope.is_infinite() {
        return if x > 0.0 {
            1.0
        } else if x < 0.0 {
            0.0
        } else {
            0.5
        };
    }
    (slope * x + 0.5).clamp(0.0, 1.0)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let a = mat(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 4.0], &[7.0, 8.0, -9.0]]);
        let i = t.constant(Tensor::eye(3));
        let av = t.constant(a.clone());
        let out = t.matmul(i, av).unwrap();
        assert_eq!(t.value(out), &a);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 3]));
        let s = t.softmax(z).unwrap();
        for &v in t.value(s).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn bce_at_zero_logit() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let l = t.bce_with_logits(z, &Tensor::scalar(1.0)).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row_vector(&[1.0, 0.0]).unwrap());
        assert!(matches!(t.ln(a), Err(Error::LogDomain { index: 1, .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row_vector(&[0.3, -1.0, 2.0, 5.0]).unwrap());
        let s = t.sum(w).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn mean_square_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row_vector(&[1.0, 2.0]).unwrap());
        let sq = t.mul(w, w).unwrap();
        let l = t.mean(sq).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row_vector(&[1.0, 2.0]).unwrap());
        let c = t.constant(Tensor::row_vector(&[3.0, 4.0]).unwrap());
        let p = t.mul(w, c).unwrap();
        let l = t.sum(p).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row_vector(&[1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(w), Err(Error::NonScalarLoss(_))));
        assert!(Tape::new().backward(Var(0)).is_err());
    }

    #[test]
    fn forward_rejects_non_finite() {
        let mut t = Tape::new();
        let w = t.constant(Tensor::scalar(1e300));
        assert!(matches!(
            t.scale(w, 1e300),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn hard_sigmoid_step_limit() {
        assert_eq!(hard_sigmoid(0.2, f64::INFINITY), 1.0);
        assert_eq!(hard_sigmoid(-0.2, f64::INFINITY), 0.0);
        assert_eq!(hard_sigmoid(0.0, 10.0), 0.5);
        assert_eq!(hard_sigmoid(0.5, 10.0), 1.0);
    }

    #[test]
    fn clamp_boundary_subgradient_is_zero() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row_vector(&[0.0, 0.5, 1.0]).unwrap());
        let c = t.clamp(w, 0.0, 1.0).unwrap();
        let l = t.sum(c).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
