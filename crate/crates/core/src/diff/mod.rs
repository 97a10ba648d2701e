//! A small tape-based reverse-mode differentiation engine.
//!
//! Values are 64-bit and tensors are at most 2-D in practice. Every
//! operation appends a node to the [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse creation order, which is a valid topological order since
//! nodes can only reference earlier nodes. A tape is meant to live for one
//! training step and be discarded (or [`Tape::reset`]) afterwards.

mod checkpoint;
mod kernels;
mod optim;

use std::sync::Arc;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use optim::{ParamId, ParamStore, RmsProp, RmsPropConfig};

use crate::{Error, Execution, Result};
use kernels::{gemm, ConvDims};

/// A plain n-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }
}

/// Flat neighbor lookup used by [`Tape::gather`]-style convolution:
/// `cells x kernel_size` source positions, `None` reading as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    pub cells: usize,
    pub kernel_size: usize,
    index: Vec<Option<usize>>,
}

impl NeighborTable {
    pub fn new(cells: usize, kernel_size: usize, index: Vec<Option<usize>>) -> Result<Self> {
        if index.len() != cells * kernel_size {
            return Err(Error::shape("NeighborTable::new", &[index.len()], &[cells, kernel_size]));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= cells) {
            return Err(Error::Data(format!("neighbor position {bad} outside {cells} cells")));
        }
        Ok(NeighborTable {
            cells,
            kernel_size,
            index,
        })
    }

    #[inline]
    pub fn get(&self, cell: usize, slot: usize) -> Option<usize> {
        self.index[cell * self.kernel_size + slot]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (m x k) * b`, with `b` either `k x n` or, transposed, `n x k`.
    MatMul { a: Var, b: Var, trans_b: bool },
    Gather { src: Var, index: Arc<[Option<usize>]> },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceRows { src: Var, start: usize },
    AddBias { x: Var, bias: Var },
    NeighborConv { x: Var, kernel: Var, bias: Var, table: Arc<NeighborTable> },
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// The recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    exec: Execution,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_execution(exec: Execution) -> Self {
        Tape {
            exec,
            ..Self::default()
        }
    }

    /// Drop every node so the tape can record a new step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A tracked leaf whose gradient will be populated by `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// An untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` loss with respect to `v`. Tracked
    /// nodes the loss does not depend on have a zero gradient; untracked
    /// nodes have none.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let node = &self.nodes[v.0];
        node.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, tracked, node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        let tracked = self.tracked(&[a]);
        self.push(t, tracked, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `a (m x k)` times `b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m x k)` times the transpose of `b (n x k)`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (br, bc) = self.value(b).dims2("matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        let bs = if trans_b { (1, bc) } else { (bc, 1) };
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), bs, &mut out, (n, 1), 0.0);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, tracked, Op::MatMul { a, b, trans_b }))
    }

    /// `out[p] = src.flat[index[p]]`, with `None` producing 0 and routing no
    /// gradient. Duplicate positions accumulate in the backward pass.
    pub fn gather(&mut self, src: Var, index: Arc<[Option<usize>]>, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        let s = self.data(src);
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= s.len()) {
            return Err(Error::Data(format!("gather index {bad} outside source of {} elements", s.len())));
        }
        let data = index.iter().map(|i| i.map_or(0.0, |i| s[i])).collect();
        let tracked = self.tracked(&[src]);
        Ok(self.push(Tensor { shape, data }, tracked, Op::Gather { src, index }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), &shape));
        }
        let t = Tensor {
            shape,
            data: self.data(a).to_vec(),
        };
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, tracked, Op::Reshape(a)))
    }

    /// Concatenate along the first axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Data("concat of nothing".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor { shape, data }, tracked, Op::Concat(parts.to_vec())))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(src).dims2("slice_rows")?;
        if start + len > r {
            return Err(Error::shape("slice_rows", self.shape(src), &[start, len]));
        }
        let data = self.data(src)[start * c..(start + len) * c].to_vec();
        let tracked = self.tracked(&[src]);
        Ok(self.push(Tensor { shape: vec![len, c], data }, tracked, Op::SliceRows { src, start }))
    }

    /// Add a length-`c` bias to every row of an `r x c` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2("add_bias")?;
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(t, tracked, Op::AddBias { x, bias }))
    }

    /// Fused gather + weighted sum over neighbor lists.
    ///
    /// `x` is `(frames * cells) x c_in`, `kernel` is `c_out x c_in x S`,
    /// `bias` is `c_out`. Output row `f * cells + n`, channel `o` is
    /// `bias[o] + sum_{c,s} kernel[o,c,s] * x[f * cells + table(n, s), c]`.
    pub fn neighbor_conv(&mut self, x: Var, kernel: Var, bias: Var, table: Arc<NeighborTable>) -> Result<Var> {
        let (rows, c_in) = self.value(x).dims2("neighbor_conv")?;
        let (c_out, k_in, s) = match self.shape(kernel)[..] {
            [o, c, s] => (o, c, s),
            _ => return Err(Error::shape("neighbor_conv", self.shape(kernel), &[0, c_in, table.kernel_size])),
        };
        if k_in != c_in || s != table.kernel_size {
            return Err(Error::shape("neighbor_conv", self.shape(x), self.shape(kernel)));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape("neighbor_conv", self.shape(kernel), self.shape(bias)));
        }
        if rows % table.cells != 0 {
            return Err(Error::shape("neighbor_conv", self.shape(x), &[table.cells, c_in]));
        }
        let dims = ConvDims { rows, c_in, c_out };
        let out = kernels::neighbor_conv_forward(self.data(x), self.data(kernel), self.data(bias), &table, &dims, self.exec);
        let tracked = self.tracked(&[x, kernel, bias]);
        Ok(self.push(
            Tensor {
                shape: vec![rows, c_out],
                data: out,
            },
            tracked,
            Op::NeighborConv { x, kernel, bias, table },
        ))
    }

    /// Mean squared error, a 1-element tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let p = self.data(pred);
        let n = p.len().max(1) as f64;
        let sum: f64 = p.iter().zip(self.data(target)).map(|(a, b)| (a - b) * (a - b)).sum();
        let tracked = self.tracked(&[pred, target]);
        Ok(self.push(Tensor::scalar(sum / n), tracked, Op::Mse { pred, target }))
    }

    /// Populate gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward called twice on the same tape; reset it first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.nodes[id].grad.take().unwrap();
            self.propagate(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        // a parent's own value is never needed when accumulating into itself
        let grad = node.grad.as_mut().expect("tracked nodes carry a gradient buffer");
        f(grad, &node.value);
    }

    fn add_into(&mut self, v: Var, g: &[f64], scale: f64) {
        self.accumulate(v, |acc, _| acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b));
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(*a, g, 1.0);
                self.add_into(*b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.add_into(*a, g, 1.0);
                self.add_into(*b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga: Vec<f64> = g.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                self.add_into(a, &ga, 1.0);
                self.add_into(b, &gb, 1.0);
            }
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, g),
            Op::Gather { src, index } => {
                self.accumulate(*src, |acc, _| {
                    for (i, gv) in index.iter().zip(g) {
                        if let Some(i) = i {
                            acc[*i] += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value.data;
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.add_into(*a, &ga, 1.0);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value.data;
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.add_into(*a, &ga, 1.0);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g.iter().zip(self.data(*a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.add_into(*a, &ga, 1.0);
            }
            Op::Reshape(a) => self.add_into(*a, g, 1.0),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.add_into(p, &g[offset..offset + n], 1.0);
                    offset += n;
                }
            }
            Op::SliceRows { src, start } => {
                let c = self.shape(*src)[1];
                let off = start * c;
                self.accumulate(*src, |acc, _| {
                    acc[off..off + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                });
            }
            Op::AddBias { x, bias } => {
                self.add_into(*x, g, 1.0);
                let c = self.shape(*bias)[0];
                self.accumulate(*bias, |acc, _| {
                    for row in g.chunks(c) {
                        acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::NeighborConv { x, kernel, bias, table } => {
                let (rows, c_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dims = ConvDims {
                    rows,
                    c_in,
                    c_out: self.shape(*kernel)[0],
                };
                let want_dx = self.nodes[x.0].requires_grad;
                let (dk, db, dx) =
                    kernels::neighbor_conv_backward(self.data(*x), self.data(*kernel), g, table, &dims, want_dx, self.exec);
                self.add_into(*kernel, &dk, 1.0);
                self.add_into(*bias, &db, 1.0);
                if let Some(dx) = dx {
                    self.add_into(*x, &dx, 1.0);
                }
            }
            Op::Mse { pred, target } => {
                let n = self.value(*pred).len().max(1) as f64;
                let scale = 2.0 * g[0] / n;
                let diff: Vec<f64> = self
                    .data(*pred)
                    .iter()
                    .zip(self.data(*target))
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                self.add_into(*pred, &diff, 1.0);
                self.add_into(*target, &diff, -1.0);
            }
        }
        self.nodes[id].op = op;
    }

    fn matmul_backward(&mut self, a: Var, b: Var, trans_b: bool, g: &[f64]) {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (br, bc) = (self.shape(b)[0], self.shape(b)[1]);
        let n = if trans_b { br } else { bc };
        if self.nodes[a.0].requires_grad {
            // dA (m x k) = G (m x n) * B^T
            let mut da = vec![0.0; m * k];
            let bs = if trans_b { (bc, 1) } else { (1, bc) };
            gemm(m, n, k, g, (n, 1), self.data(b), bs, &mut da, (k, 1), 0.0);
            self.add_into(a, &da, 1.0);
        }
        if self.nodes[b.0].requires_grad {
            let mut db = vec![0.0; br * bc];
            if trans_b {
                // dB (n x k) = G^T * A
                gemm(n, m, k, g, (1, n), self.data(a), (k, 1), &mut db, (k, 1), 0.0);
            } else {
                // dB (k x n) = A^T * G
                gemm(k, m, n, self.data(a), (1, k), g, (n, 1), &mut db, (n, 1), 0.0);
            }
            self.add_into(b, &db, 1.0);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
