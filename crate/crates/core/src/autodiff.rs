//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive operation in execution order, so the
//! node list is already topologically sorted. [`Graph::backward`] walks it
//! once in reverse and returns the gradient of a scalar root with respect to
//! every node that depends on a gradient-tracking leaf.
//!
//! Broadcasting is limited to a trailing vector added (or multiplied) across
//! the rows of a matrix.

use log::warn;

use crate::error::{DhagError, Result};
use crate::tensor::Tensor;

/// Additive guard in cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-12;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Relu,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryOp, Var, Var, bool),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    RowNorm(Var),
    RowCosine(Var, Var),
    Bce(Var, Vec<f64>),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    GradReverse(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; drop it after `backward`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `target`'s grad slot. Nodes that
    /// received no gradient contribute zeros.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Keep the output strictly inside (0, 1) even when exp saturates.
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn conv_out_len(len: usize, width: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < width {
        None
    } else {
        Some((padded - width) / stride + 1)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn tracks(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Non-finite leaves are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("graph leaf")?;
        let mut value = value;
        value.zero_grad();
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Leaf tracking gradients, copied from a parameter tensor.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.clone(), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(DhagError::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let out = transpose_raw(self.value(a).data(), m, n);
        let rg = self.tracks(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn broadcast(&self, a: Var, b: Var) -> Result<bool> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(false);
        }
        if let [_, cols] = *sa {
            let trailing = match *sb {
                [n] => n == cols,
                [1, n] => n == cols,
                _ => false,
            };
            if trailing {
                return Ok(true);
            }
        }
        Err(DhagError::Dimension(format!(
            "incompatible shapes {sa:?} and {sb:?}"
        )))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let cols = vb.len();
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let out: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, if bc { vb[i % cols] } else { vb[i] }))
            .collect();
        let shape = va.shape().to_vec();
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(op, a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let va = self.value(a);
        let f = match op {
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Relu => |x: f64| if x > 0.0 { x } else { 0.0 },
            UnaryOp::Tanh => f64::tanh,
        };
        let out = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let rg = self.tracks(a);
        self.push(value, Op::Unary(op, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = va.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let rg = self.tracks(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, da) = self.value(a).dims2()?;
        let (mb, db) = self.value(b).dims2()?;
        if m != mb {
            return Err(DhagError::Dimension(format!(
                "concat_cols row mismatch {m} vs {mb}"
            )));
        }
        let mut out = Vec::with_capacity(m * (da + db));
        for i in 0..m {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(
            Tensor::new(vec![m, da + db], out)?,
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    /// Appends a constant noise column to `a`; no gradient reaches the noise.
    pub fn concat_channel(&mut self, a: Var, noise: &Tensor) -> Result<Var> {
        let (m, _) = self.value(a).dims2()?;
        if noise.shape() != [m, 1] {
            return Err(DhagError::Dimension(format!(
                "noise column must be {m}x1, got {:?}",
                noise.shape()
            )));
        }
        let n = self.constant(noise.clone())?;
        self.concat_cols(a, n)
    }

    /// Vertical stack of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| DhagError::Dimension("concat_rows of nothing".into()))?;
        let (_, cols) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(DhagError::Dimension(format!(
                    "concat_rows column mismatch {cols} vs {c}"
                )));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.tracks(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.tracks(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Euclidean norm of every row of a matrix. Zero rows have norm 0 and
    /// subgradient 0.
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.value(a).dims2()?;
        let va = self.value(a);
        let out = (0..m)
            .map(|i| va.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.tracks(a);
        Ok(self.push(Tensor::new(vec![m], out)?, Op::RowNorm(a), rg))
    }

    /// Row-wise cosine similarity `<a_i, b_i> / (|a_i| |b_i| + 1e-12)`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, z) = self.value(a).dims2()?;
        if self.shape(b) != [m, z] {
            return Err(DhagError::Dimension(format!(
                "row_cosine {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut both_zero = 0;
        let out = (0..m)
            .map(|i| {
                let stats = cosine_stats(va.row(i), vb.row(i));
                if stats.na == 0.0 && stats.nb == 0.0 {
                    both_zero += 1;
                }
                stats.value()
            })
            .collect();
        if both_zero > 0 {
            warn!("cosine similarity of {both_zero} zero-vector pair(s) defined as 0");
        }
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(Tensor::new(vec![m], out)?, Op::RowCosine(a, b), rg))
    }

    /// Cosine similarity of two vectors of equal length, as a scalar.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let za = self.value(a).len();
        let zb = self.value(b).len();
        if za != zb || self.value(a).rank() != 1 || self.value(b).rank() != 1 {
            return Err(DhagError::Dimension(format!(
                "cosine_sim needs equal-length vectors, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ra = self.reshape(a, vec![1, za])?;
        let rb = self.reshape(b, vec![1, zb])?;
        let c = self.row_cosine(ra, rb)?;
        self.reshape(c, vec![])
    }

    /// Elementwise binary cross-entropy of probabilities `p` against 0/1 labels.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let vp = self.value(p);
        if vp.len() != labels.len() {
            return Err(DhagError::Dimension(format!(
                "bce: {} probabilities, {} labels",
                vp.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(DhagError::Label(format!("label {bad} is not 0 or 1")));
        }
        let out = vp
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| bce_value(p, y))
            .collect();
        let value = Tensor::new(vp.shape().to_vec(), out)?;
        let rg = self.tracks(p);
        Ok(self.push(value, Op::Bce(p, labels.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.tracks(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `sum_i w_i a_i` over the flattened tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let va = self.value(a);
        if va.len() != weights.len() {
            return Err(DhagError::Dimension(format!(
                "weighted_sum: {} values, {} weights",
                va.len(),
                weights.len()
            )));
        }
        let s = va.data().iter().zip(weights).map(|(x, w)| x * w).sum();
        let rg = self.tracks(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights.to_vec()), rg))
    }

    /// Identity forward; negates the gradient on the way back.
    pub fn grad_reverse(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        let rg = self.tracks(a);
        self.push(value, Op::GradReverse(a), rg)
    }

    /// 1D cross-correlation. `input` is `[batch, in_ch, len]`, `kernel` is
    /// `[out_ch, in_ch, width]`, `bias` is `[out_ch]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, len) = match *self.shape(input) {
            [n, c, len] => (n, c, len),
            ref s => return Err(DhagError::Rank(format!("conv1d input shape {s:?}"))),
        };
        let (o, kc, w) = match *self.shape(kernel) {
            [o, kc, w] => (o, kc, w),
            ref s => return Err(DhagError::Rank(format!("conv1d kernel shape {s:?}"))),
        };
        if kc != c {
            return Err(DhagError::Dimension(format!(
                "conv1d kernel expects {kc} channels, input has {c}"
            )));
        }
        if self.shape(bias) != [o] {
            return Err(DhagError::Dimension(format!(
                "conv1d bias shape {:?}, expected [{o}]",
                self.shape(bias)
            )));
        }
        let out_len = conv_out_len(len, w, stride, padding).ok_or_else(|| {
            DhagError::Dimension(format!(
                "conv1d kernel width {w} exceeds padded length {}",
                len + 2 * padding
            ))
        })?;
        let geom = ConvGeom {
            n,
            c,
            len,
            w,
            stride,
            padding,
            out_len,
        };
        let cols = geom.im2col(self.value(input).data());
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let cw = c * w;
        let mut out = vec![0.0; n * o * out_len];
        for (r, col) in cols.chunks_exact(cw).enumerate() {
            let (bi, t) = (r / out_len, r % out_len);
            for oc in 0..o {
                let krow = &k[oc * cw..(oc + 1) * cw];
                out[(bi * o + oc) * out_len + t] = krow
                    .iter()
                    .zip(col)
                    .fold(b[oc], |acc, (kv, xv)| acc + kv * xv);
            }
        }
        let rg = self.tracks(input) || self.tracks(kernel) || self.tracks(bias);
        Ok(self.push(
            Tensor::new(vec![n, o, out_len], out)?,
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(DhagError::Rank(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        rv.ensure_finite("backward root")?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.tracks(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.tracks(*a) {
                    let bt = transpose_raw(vb.data(), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.tracks(*b) {
                    let at = transpose_raw(va.data(), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                send(*a, transpose_raw(g, n, m));
            }
            Op::Binary(op, a, b, bc) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let cols = vb.len();
                let bval = |i: usize| if *bc { vb[i % cols] } else { vb[i] };
                let (ga, gb_full): (Vec<f64>, Vec<f64>) = match op {
                    BinaryOp::Add => (g.to_vec(), g.to_vec()),
                    BinaryOp::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    BinaryOp::Mul => (
                        g.iter().enumerate().map(|(i, gi)| gi * bval(i)).collect(),
                        g.iter().zip(va).map(|(gi, ai)| gi * ai).collect(),
                    ),
                };
                send(*a, ga);
                if *bc {
                    let mut gb = vec![0.0; cols];
                    gb_full
                        .iter()
                        .enumerate()
                        .for_each(|(i, x)| gb[i % cols] += x);
                    send(*b, gb);
                } else {
                    send(*b, gb_full);
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let ga = match op {
                    UnaryOp::Sigmoid => g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect(),
                    UnaryOp::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                    UnaryOp::Tanh => g.iter().zip(y).map(|(gi, t)| gi * (1.0 - t * t)).collect(),
                };
                send(*a, ga);
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::ConcatCols(a, b) => {
                let (m, da) = (self.shape(*a)[0], self.shape(*a)[1]);
                let db = self.shape(*b)[1];
                let mut ga = Vec::with_capacity(m * da);
                let mut gb = Vec::with_capacity(m * db);
                for i in 0..m {
                    let row = &g[i * (da + db)..(i + 1) * (da + db)];
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    send(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Reshape(a) | Op::GradReverse(a) => {
                let contrib = if matches!(node.op, Op::GradReverse(_)) {
                    g.iter().map(|x| -x).collect()
                } else {
                    g.to_vec()
                };
                send(*a, contrib);
            }
            Op::RowNorm(a) => {
                let va = self.value(*a);
                let z = va.shape()[1];
                let norms = node.value.data();
                let mut ga = vec![0.0; va.len()];
                for (i, (&n, &gi)) in norms.iter().zip(g).enumerate() {
                    if n > 0.0 {
                        for j in 0..z {
                            ga[i * z + j] = gi * va.data()[i * z + j] / n;
                        }
                    }
                }
                send(*a, ga);
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let z = va.shape()[1];
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let (ra, rb) = (va.row(i), vb.row(i));
                    let s = cosine_stats(ra, rb);
                    let denom = s.na * s.nb + COSINE_EPS;
                    let d2 = denom * denom;
                    for j in 0..z {
                        let ua = if s.na > 0.0 { ra[j] / s.na } else { 0.0 };
                        let ub = if s.nb > 0.0 { rb[j] / s.nb } else { 0.0 };
                        ga[i * z + j] = gi * (rb[j] / denom - s.dot * s.nb * ua / d2);
                        gb[i * z + j] = gi * (ra[j] / denom - s.dot * s.na * ub / d2);
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Bce(p, labels) => {
                let vp = self.value(*p).data();
                let gp = g
                    .iter()
                    .zip(vp)
                    .zip(labels)
                    .map(|((gi, &p), &y)| {
                        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        gi * (-y / pc + (1.0 - y) / (1.0 - pc))
                    })
                    .collect();
                send(*p, gp);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::WeightedSum(a, w) => send(*a, w.iter().map(|wi| g[0] * wi).collect()),
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let s = self.shape(*input);
                let (o, w) = (self.shape(*kernel)[0], self.shape(*kernel)[2]);
                let geom = ConvGeom {
                    n: s[0],
                    c: s[1],
                    len: s[2],
                    w,
                    stride: *stride,
                    padding: *padding,
                    out_len: node.value.shape()[2],
                };
                let cols = geom.im2col(self.value(*input).data());
                let k = self.value(*kernel).data();
                let cw = geom.c * w;
                let mut gcols = vec![0.0; cols.len()];
                let mut gk = vec![0.0; k.len()];
                let mut gbias = vec![0.0; o];
                for (r, col) in cols.chunks_exact(cw).enumerate() {
                    let (bi, t) = (r / geom.out_len, r % geom.out_len);
                    let gcol = &mut gcols[r * cw..(r + 1) * cw];
                    for oc in 0..o {
                        let go = g[(bi * o + oc) * geom.out_len + t];
                        gbias[oc] += go;
                        let gkrow = &mut gk[oc * cw..(oc + 1) * cw];
                        gkrow.iter_mut().zip(col).for_each(|(a, xv)| *a += go * xv);
                        let krow = &k[oc * cw..(oc + 1) * cw];
                        gcol.iter_mut().zip(krow).for_each(|(a, kv)| *a += go * kv);
                    }
                }
                let gx = geom.col2im(&gcols);
                send(*input, gx);
                send(*kernel, gk);
                send(*bias, gbias);
            }
        }
    }
}

/// Shape bookkeeping for a 1D convolution lowered to row dot products.
struct ConvGeom {
    n: usize,
    c: usize,
    len: usize,
    w: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
}

impl ConvGeom {
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        (t * self.stride + j)
            .checked_sub(self.padding)
            .filter(|&p| p < self.len)
    }

    /// `[n * out_len, c * w]` patches; padded positions are zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cw = self.c * self.w;
        let mut cols = vec![0.0; self.n * self.out_len * cw];
        for bi in 0..self.n {
            for t in 0..self.out_len {
                let row = &mut cols[(bi * self.out_len + t) * cw..][..cw];
                for ic in 0..self.c {
                    for j in 0..self.w {
                        if let Some(p) = self.source(t, j) {
                            row[ic * self.w + j] = x[(bi * self.c + ic) * self.len + p];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let cw = self.c * self.w;
        let mut x = vec![0.0; self.n * self.c * self.len];
        for bi in 0..self.n {
            for t in 0..self.out_len {
                let row = &cols[(bi * self.out_len + t) * cw..][..cw];
                for ic in 0..self.c {
                    for j in 0..self.w {
                        if let Some(p) = self.source(t, j) {
                            x[(bi * self.c + ic) * self.len + p] += row[ic * self.w + j];
                        }
                    }
                }
            }
        }
        x
    }
}

struct CosineStats {
    dot: f64,
    na: f64,
    nb: f64,
}

impl CosineStats {
    fn value(&self) -> f64 {
        self.dot / (self.na * self.nb + COSINE_EPS)
    }
}

fn cosine_stats(a: &[f64], b: &[f64]) -> CosineStats {
    let dot = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    CosineStats { dot, na, nb }
}

/// Cross-entropy of one probability against a 0/1 label, with clamping.
pub fn bce_value(p: f64, y: f64) -> f64 {
    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -y * pc.ln() - (1.0 - y) * (1.0 - pc).ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Compares the analytic gradient of a scalar function with central
/// differences. Returns the largest `|a - c| / (|a| + |c| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone())?;
        let out = f(&mut g, v)?;
        let y = g.value(out).item()?;
        if !y.is_finite() {
            return Err(DhagError::Numerical(format!("f evaluated to {y}")));
        }
        Ok(y)
    };
    eval(x)?;
    let mut g = Graph::new();
    let v = g.param(x)?;
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let c = (fp - fm) / (2.0 * h);
        worst = worst.max((a - c).abs() / (a.abs() + c.abs() + 1e-12));
    }
    Ok(worst)
}
