use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Log,
    Exp,
    Neg,
    Abs,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, cols: Vec<T> },
    ChannelBias(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Upsample(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    Gather2d(Var, Vec<usize>, Vec<usize>),
    SqDist(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended in
/// evaluation order, so every node's inputs precede it.
#[derive(Debug)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the leaf does not require grad or is
    /// unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor on the tape.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.leaf(Tensor::scalar(value), false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── elementwise ────────────────────────────────────────────────

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        if kind == Binary::Div && tb.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())?
        } else if ta.is_scalar() {
            let x = ta.item();
            Tensor::new(tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(shape_err(name, ta, tb));
        };
        self.push(name, value, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let name = match kind {
            Unary::Relu => "relu",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Neg => "neg",
            Unary::Abs => "abs",
        };
        if kind == Unary::Log {
            if let Some(bad) = ta.data().iter().find(|v| **v <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("argument {bad} is not positive"),
                });
            }
        }
        let data = ta
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Relu => x.max(T::zero()),
                Unary::Log => x.ln(),
                Unary::Exp => x.exp(),
                Unary::Neg => -x,
                Unary::Abs => x.abs(),
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, Op::Unary(kind, a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * s).collect())?;
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    // ── linear algebra ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(ta.data(), tb.data(), &mut out, m, k, n, false, false, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// 2-d convolution of `input[C_in×H×W]` with `kernel[C_out×C_in×k×k]`,
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let (is, ks) = (ti.shape(), tk.shape());
        if is.len() != 3 || ks.len() != 4 || ks[1] != is[0] || ks[2] != ks[3] {
            return Err(shape_err("conv2d", ti, tk));
        }
        let geom = ConvGeom::new(is[0], is[1], is[2], ks[0], ks[2], stride, pad).ok_or_else(|| {
            Error::invalid(format!(
                "conv2d: kernel {} with stride {stride} does not fit input {}x{} padded by {pad}",
                ks[2], is[1], is[2]
            ))
        })?;
        let cols = kernels::im2col(ti.data(), &geom);
        let p = geom.out_positions();
        let mut out = vec![T::zero(); geom.c_out * p];
        kernels::matmul_into(tk.data(), &cols, &mut out, geom.c_out, geom.patch_len(), p, false, false, false);
        let value = Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?;
        // the patch matrix is only needed for the kernel gradient
        let cols = if self.nodes[kernel.0].requires_grad { cols } else { Vec::new() };
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            &[input, kernel],
        )
    }

    /// Adds `bias[C]` to every position of channel `c` of `x[C×H×W]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tx.shape().is_empty() || tb.shape() != [tx.shape()[0]] {
            return Err(shape_err("channel_bias", tx, tb));
        }
        let plane = tx.numel() / tx.shape()[0];
        let mut data = tx.data().to_vec();
        for (c, chunk) in data.chunks_mut(plane.max(1)).enumerate() {
            let b = tb.data()[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("channel_bias", value, Op::ChannelBias(x, bias), &[x, bias])
    }

    // ── normalisation and resampling ───────────────────────────────

    /// Softmax over the last dimension (a 1-d tensor is a single row).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let n = last_dim(ta.shape());
        if ta.numel() == 0 || n == 0 {
            return Err(Error::invalid("softmax of an empty vector"));
        }
        let value = Tensor::new(ta.shape().to_vec(), kernels::softmax_rows(ta.data(), n))?;
        self.push("softmax", value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let n = last_dim(ta.shape());
        if ta.numel() == 0 || n == 0 {
            return Err(Error::invalid("log_softmax of an empty vector"));
        }
        let value = Tensor::new(ta.shape().to_vec(), kernels::log_softmax_rows(ta.data(), n))?;
        self.push("log_softmax", value, Op::LogSoftmaxRows(a), &[a])
    }

    /// Bilinear align-corners resize of `map[C×h×w]` to `C×H×W`.
    pub fn bilinear_upsample(&mut self, map: Var, h: usize, w: usize) -> Result<Var> {
        let tm = &self.nodes[map.0].value;
        let s = tm.shape();
        if s.len() != 3 {
            return Err(Error::invalid(format!("bilinear_upsample expects C×h×w, got {s:?}")));
        }
        if h < s[1] || w < s[2] {
            return Err(Error::invalid(format!(
                "bilinear_upsample target {h}x{w} smaller than source {}x{}",
                s[1], s[2]
            )));
        }
        let data = kernels::bilinear_forward(tm.data(), s[0], s[1], s[2], h, w);
        let value = Tensor::new(vec![s[0], h, w], data)?;
        self.push("bilinear_upsample", value, Op::Upsample(map), &[map])
    }

    // ── reductions and structure ───────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.numel() == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s: T = ta.data().iter().copied().sum::<T>() / T::from_usize(ta.numel()).unwrap();
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(Error::invalid(format!("transpose expects a matrix, got {:?}", ta.shape())));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(Error::invalid(format!("gather_rows expects a matrix, got {:?}", ta.shape())));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::invalid(format!("gather_rows: row {i} out of range {r}")));
            }
            out.extend_from_slice(&ta.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        self.push("gather_rows", value, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Sub-matrix at the given rows and columns.
    pub fn gather2d(&mut self, a: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(Error::invalid(format!("gather2d expects a matrix, got {:?}", ta.shape())));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        if rows.iter().any(|&i| i >= r) || cols.iter().any(|&j| j >= c) {
            return Err(Error::invalid("gather2d index out of range"));
        }
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            out.extend(cols.iter().map(|&j| ta.data()[i * c + j]));
        }
        let value = Tensor::new(vec![rows.len(), cols.len()], out)?;
        self.push("gather2d", value, Op::Gather2d(a, rows.to_vec(), cols.to_vec()), &[a])
    }

    /// Squared euclidean distances between rows: `a[n×d]`, `b[m×d]` → `[n×m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("sq_dist", ta, tb));
        }
        let (n, m, d) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
        let value = Tensor::new(vec![n, m], kernels::sq_dist(ta.data(), tb.data(), n, m, d))?;
        self.push("sq_dist", value, Op::SqDist(a, b), &[a, b])
    }

    /// Mean over targeted rows of `-log softmax(logits[i])[target_i]`.
    /// Rows with a `None` target are skipped; zero when every row is skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = tl.shape()[1];
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let logp = kernels::log_softmax_rows(tl.data(), c);
        let mut total = T::zero();
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                total -= logp[i * c + t];
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        let probs = logp.iter().map(|v| v.exp()).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    // ── backward ───────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    /// Reduces an elementwise gradient onto operand `v`, summing when `v` was
    /// broadcast as a scalar.
    fn reduce_to(&self, v: Var, out_numel: usize, delta: Vec<T>) -> Vec<T> {
        if self.nodes[v.0].value.numel() == out_numel {
            delta
        } else {
            vec![delta.into_iter().sum()]
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = gd.len();
                let av = |i: usize| if ta.numel() == n { ta.data()[i] } else { ta.item() };
                let bv = |i: usize| if tb.numel() == n { tb.data()[i] } else { tb.item() };
                let (da, db): (Vec<T>, Vec<T>) = match kind {
                    Binary::Add => (gd.to_vec(), gd.to_vec()),
                    Binary::Sub => (gd.to_vec(), gd.iter().map(|&x| -x).collect()),
                    Binary::Mul => (
                        (0..n).map(|i| gd[i] * bv(i)).collect(),
                        (0..n).map(|i| gd[i] * av(i)).collect(),
                    ),
                    Binary::Div => (
                        (0..n).map(|i| gd[i] / bv(i)).collect(),
                        (0..n).map(|i| -gd[i] * av(i) / (bv(i) * bv(i))).collect(),
                    ),
                };
                if self.nodes[a.0].requires_grad {
                    let da = self.reduce_to(*a, n, da);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = self.reduce_to(*b, n, db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let d: Vec<T> = match kind {
                    Unary::Relu => gd
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    Unary::Log => gd.iter().zip(x).map(|(&g, &x)| g / x).collect(),
                    Unary::Exp => gd.iter().zip(out).map(|(&g, &y)| g * y).collect(),
                    Unary::Neg => gd.iter().map(|&g| -g).collect(),
                    Unary::Abs => gd
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                };
                self.accumulate(grads, *a, d);
            }
            Op::Scale(a, s) => {
                let d = gd.iter().map(|&g| g * *s).collect();
                self.accumulate(grads, *a, d);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_into(gd, tb.data(), &mut da, m, n, k, false, true, false);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_into(ta.data(), gd, &mut db, k, m, n, true, false, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let p = geom.out_positions();
                let pl = geom.patch_len();
                if self.nodes[kernel.0].requires_grad {
                    let mut dk = vec![T::zero(); geom.c_out * pl];
                    kernels::matmul_into(gd, cols, &mut dk, geom.c_out, p, pl, false, true, false);
                    self.accumulate(grads, *kernel, dk);
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![T::zero(); pl * p];
                    let kd = self.value(*kernel).data();
                    kernels::matmul_into(kd, gd, &mut dcols, pl, geom.c_out, p, true, false, false);
                    let mut di = vec![T::zero(); geom.c_in * geom.h * geom.w];
                    kernels::col2im(&dcols, geom, &mut di);
                    self.accumulate(grads, *input, di);
                }
            }
            Op::ChannelBias(x, bias) => {
                let c = self.value(*bias).numel();
                if self.nodes[bias.0].requires_grad {
                    let plane = (gd.len() / c).max(1);
                    let db = gd.chunks(plane).map(|ch| ch.iter().copied().sum()).collect();
                    self.accumulate(grads, *bias, db);
                }
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::SoftmaxRows(a) => {
                let n = last_dim(node.value.shape());
                let mut d = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(n).zip(out.chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    d.extend(grow.iter().zip(yrow).map(|(&g, &y)| y * (g - dot)));
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let n = last_dim(node.value.shape());
                let mut d = Vec::with_capacity(gd.len());
                for (grow, lrow) in gd.chunks(n).zip(out.chunks(n)) {
                    let gsum: T = grow.iter().copied().sum();
                    d.extend(grow.iter().zip(lrow).map(|(&g, &l)| g - l.exp() * gsum));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Upsample(a) => {
                let s = self.value(*a).shape();
                let os = node.value.shape();
                let d = kernels::bilinear_backward(gd, s[0], s[1], s[2], os[1], os[2]);
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = gd[0] / T::from_usize(n).unwrap();
                self.accumulate(grads, *a, vec![v; n]);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, rows) => {
                let src = self.value(*a);
                let c = src.shape()[1];
                let mut d = vec![T::zero(); src.numel()];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gd[k * c + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Gather2d(a, rows, cols) => {
                let src = self.value(*a);
                let c = src.shape()[1];
                let mut d = vec![T::zero(); src.numel()];
                for (ri, &i) in rows.iter().enumerate() {
                    for (ci, &j) in cols.iter().enumerate() {
                        d[i * c + j] += gd[ri * cols.len() + ci];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, dim) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
                let two = T::one() + T::one();
                let mut da = vec![T::zero(); n * dim];
                let mut db = vec![T::zero(); m * dim];
                for i in 0..n {
                    let ai = &ta.data()[i * dim..(i + 1) * dim];
                    for j in 0..m {
                        let gij = gd[i * m + j] * two;
                        if gij == T::zero() {
                            continue;
                        }
                        let bj = &tb.data()[j * dim..(j + 1) * dim];
                        for k in 0..dim {
                            let diff = gij * (ai[k] - bj[k]);
                            da[i * dim + k] += diff;
                            db[j * dim + k] -= diff;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = self.value(*logits).shape()[1];
                let mut d = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = gd[0] / T::from_usize(*count).unwrap();
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for j in 0..c {
                                d[i * c + j] = probs[i * c + j] * scale;
                            }
                            d[i * c + t] -= scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}
