//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its output value
//! and references to its inputs. Nodes are appended in execution order, so
//! the tape is topologically sorted by construction and the backward pass
//! is a single reverse sweep that visits each node once.
//!
//! ```
//! use ssvc_core::autodiff::Graph;
//! use ssvc_core::tensor::Tensor;
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! A graph is single-threaded (`!Sync`); independent graphs can be built on
//! separate threads.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{axis_extents, Result, Tensor, TensorError};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    RepeatRows(usize),
    Stack(Vec<usize>),
    Row(usize, usize),
    WeightedSum(usize, usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Sum(usize),
    AddN(Vec<usize>),
    SoftmaxXent {
        logits: usize,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The operation tape.
#[derive(Debug)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    generation: Cell<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            generation: Cell::new(fresh_generation()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every node so the graph can be reused. Handles created before
    /// the reset are rejected afterwards with [`TensorError::Consumed`].
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.generation.set(fresh_generation());
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let id = self.id(v)?;
        Ok(self.nodes.borrow()[id].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        let id = self.id(v)?;
        Ok(self.nodes.borrow()[id].value.shape().to_vec())
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let id = self.id(v)?;
        let nodes = self.nodes.borrow();
        let t = &nodes[id].value;
        if !t.is_scalar() {
            return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
        }
        Ok(t.data()[0])
    }

    fn id(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation.get() || v.id >= self.nodes.borrow().len() {
            return Err(TensorError::Consumed);
        }
        Ok(v.id)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            generation: self.generation.get(),
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Matrix product. `a` may be a matrix `[m, k]` or a row vector `[k]`;
    /// `b` must be `[k, n]`. The result has the rank of `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.id(a)?, self.id(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[ia].value, &nodes[ib].value);
            let (m, k) = as_matrix(av, "matmul")?;
            if bv.rank() != 2 || bv.shape()[0] != k {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: av.shape().to_vec(),
                    right: bv.shape().to_vec(),
                });
            }
            let n = bv.shape()[1];
            let out = matmul_raw(av.data(), bv.data(), m, k, n);
            let shape = if av.rank() == 1 { vec![n] } else { vec![m, n] };
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::MatMul(ia, ib), self.rg(&[ia, ib])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn zip(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.id(a)?, self.id(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[ia].value, &nodes[ib].value);
            same_shape(av, bv, name)?;
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        Ok(self.push(value, op(ia, ib), self.rg(&[ia, ib])))
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.id(x)?, self.id(bias)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[ix].value, &nodes[ib].value);
            if bv.rank() != 1 || xv.rank() == 0 || xv.last_dim() != bv.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    left: xv.shape().to_vec(),
                    right: bv.shape().to_vec(),
                });
            }
            let n = bv.len();
            let data = xv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bv.data()[i % n])
                .collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::AddRow(ix, ib), self.rg(&[ix, ib])))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Result<Var> {
        self.map(x, |v| v * factor, |i| Op::Scale(i, factor))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.map(x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.map(x, |v| v.max(0.0), Op::Relu)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Result<Var> {
        let ix = self.id(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            Tensor::new(
                xv.shape().to_vec(),
                xv.data().iter().map(|&v| f(v)).collect(),
            )?
        };
        Ok(self.push(value, op(ix), self.rg(&[ix])))
    }

    /// Max-subtracted softmax along the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let ix = self.id(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            if xv.rank() == 0 {
                return Err(TensorError::Empty("softmax"));
            }
            let n = xv.last_dim();
            let mut out = Vec::with_capacity(xv.len());
            for row in xv.data().chunks(n) {
                out.extend(softmax_slice(row));
            }
            Tensor::new(xv.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::Softmax(ix), self.rg(&[ix])))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::Empty("concat"));
        }
        let ids = xs.iter().map(|&v| self.id(v)).collect::<Result<Vec<_>>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[ids[0]].value.shape().to_vec();
            if axis >= first.len() {
                return Err(TensorError::Axis {
                    op: "concat",
                    axis,
                    shape: first,
                });
            }
            let mut total = 0;
            for &i in &ids {
                let s = nodes[i].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        left: first,
                        right: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_extents(&first, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &i in &ids {
                    let t = &nodes[i].value;
                    let block = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat { inputs: ids, axis }, rg))
    }

    /// The slice `start..start + len` of `x` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.id(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            if axis >= xv.rank() {
                return Err(TensorError::Axis {
                    op: "narrow",
                    axis,
                    shape: xv.shape().to_vec(),
                });
            }
            let (outer, size, inner) = axis_extents(xv.shape(), axis);
            if len == 0 || start + len > size {
                return Err(TensorError::Index {
                    op: "narrow",
                    index: start + len,
                    bound: size,
                });
            }
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * size * inner + start * inner;
                out.extend_from_slice(&xv.data()[base..base + len * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, out)?
        };
        Ok(self.push(
            value,
            Op::Narrow {
                input: ix,
                axis,
                start,
            },
            self.rg(&[ix]),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.id(x)?;
        let value = self.nodes.borrow()[ix]
            .value
            .clone()
            .reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(ix), self.rg(&[ix])))
    }

    /// Row-major flattening into a vector.
    pub fn flatten(&self, x: Var) -> Result<Var> {
        let n = self.shape(x)?.iter().product::<usize>();
        self.reshape(x, &[n])
    }

    /// Tiles the vector `x` into `times` identical rows.
    pub fn repeat_rows(&self, x: Var, times: usize) -> Result<Var> {
        let ix = self.id(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            if xv.rank() != 1 {
                return Err(TensorError::Rank {
                    op: "repeat_rows",
                    expected: "1",
                    shape: xv.shape().to_vec(),
                });
            }
            if times == 0 {
                return Err(TensorError::Empty("repeat_rows"));
            }
            let mut out = Vec::with_capacity(times * xv.len());
            for _ in 0..times {
                out.extend_from_slice(xv.data());
            }
            Tensor::new(vec![times, xv.len()], out)?
        };
        Ok(self.push(value, Op::RepeatRows(ix), self.rg(&[ix])))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::Empty("stack"));
        }
        let ids = xs.iter().map(|&v| self.id(v)).collect::<Result<Vec<_>>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[ids[0]].value;
            if first.rank() != 1 {
                return Err(TensorError::Rank {
                    op: "stack",
                    expected: "1",
                    shape: first.shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(ids.len() * first.len());
            for &i in &ids {
                let t = &nodes[i].value;
                same_shape(first, t, "stack")?;
                out.extend_from_slice(t.data());
            }
            Tensor::new(vec![ids.len(), first.len()], out)?
        };
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Stack(ids), rg))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn row(&self, x: Var, index: usize) -> Result<Var> {
        let ix = self.id(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            if xv.rank() != 2 {
                return Err(TensorError::Rank {
                    op: "row",
                    expected: "2",
                    shape: xv.shape().to_vec(),
                });
            }
            if index >= xv.shape()[0] {
                return Err(TensorError::Index {
                    op: "row",
                    index,
                    bound: xv.shape()[0],
                });
            }
            Tensor::vector(xv.row(index).to_vec())
        };
        Ok(self.push(value, Op::Row(ix, index), self.rg(&[ix])))
    }

    /// `Σ_t w[t] · h[t, :]` for `h: [T, d]`, `w: [T]`.
    pub fn weighted_sum(&self, h: Var, w: Var) -> Result<Var> {
        let (ih, iw) = (self.id(h)?, self.id(w)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (hv, wv) = (&nodes[ih].value, &nodes[iw].value);
            if hv.rank() != 2 || wv.rank() != 1 || hv.shape()[0] != wv.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_sum",
                    left: hv.shape().to_vec(),
                    right: wv.shape().to_vec(),
                });
            }
            let d = hv.shape()[1];
            let mut out = vec![0.0; d];
            for (t, &wt) in wv.data().iter().enumerate() {
                for (o, &x) in out.iter_mut().zip(hv.row(t)) {
                    *o += wt * x;
                }
            }
            Tensor::vector(out)
        };
        Ok(self.push(value, Op::WeightedSum(ih, iw), self.rg(&[ih, iw])))
    }

    /// Gathers rows of `table` (`[V, E]`) into `[ids.len(), E]`.
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.id(table)?;
        if ids.is_empty() {
            return Err(TensorError::Empty("gather"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let tv = &nodes[it].value;
            if tv.rank() != 2 {
                return Err(TensorError::Rank {
                    op: "gather",
                    expected: "2",
                    shape: tv.shape().to_vec(),
                });
            }
            let (v, e) = (tv.shape()[0], tv.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * e);
            for &id in ids {
                if id >= v {
                    return Err(TensorError::Index {
                        op: "gather",
                        index: id,
                        bound: v,
                    });
                }
                out.extend_from_slice(tv.row(id));
            }
            Tensor::new(vec![ids.len(), e], out)?
        };
        let op = Op::Gather {
            table: it,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, self.rg(&[it])))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let ix = self.id(x)?;
        let total = self.nodes.borrow()[ix].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(ix), self.rg(&[ix])))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.shape(x)?.iter().product::<usize>();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::Empty("add_n"));
        }
        let ids = xs.iter().map(|&v| self.id(v)).collect::<Result<Vec<_>>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[ids[0]].value;
            let mut out = vec![0.0; first.len()];
            for &i in &ids {
                let t = &nodes[i].value;
                same_shape(first, t, "add_n")?;
                for (o, &x) in out.iter_mut().zip(t.data()) {
                    *o += x;
                }
            }
            Tensor::new(first.shape().to_vec(), out)?
        };
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::AddN(ids), rg))
    }

    /// `-ln softmax(logits)[target]` for a logit vector, as a scalar.
    pub fn softmax_cross_entropy(&self, logits: Var, target: usize) -> Result<Var> {
        let il = self.id(logits)?;
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[il].value;
            if lv.rank() != 1 {
                return Err(TensorError::Rank {
                    op: "softmax_cross_entropy",
                    expected: "1",
                    shape: lv.shape().to_vec(),
                });
            }
            if target >= lv.len() {
                return Err(TensorError::Index {
                    op: "softmax_cross_entropy",
                    index: target,
                    bound: lv.len(),
                });
            }
            let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = lv.data().iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            let probs = softmax_slice(lv.data());
            (lse - lv.data()[target], probs)
        };
        let op = Op::SoftmaxXent {
            logits: il,
            target,
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, self.rg(&[il])))
    }

    /// Reverse sweep from a scalar `loss`. The tape is left intact, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.id(loss)?;
        let nodes = self.nodes.borrow();
        if !nodes[il].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(nodes[il].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        if nodes[il].requires_grad {
            grads[il] = Some(vec![1.0]);
        }
        for id in (0..=il).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (av.len() / bv.shape()[0], bv.shape()[0]);
                    let n = bv.shape()[1];
                    if nodes[*a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bv.data()[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                da[i * k + p] = dot(brow, grow);
                            }
                        }
                        accumulate(&mut grads, &nodes, *a, &da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av.data()[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += aip * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, &nodes, *b, &db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &nodes, *a, &g);
                    accumulate(&mut grads, &nodes, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, &nodes, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, &nodes, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let da: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, &nodes, *a, &da);
                    accumulate(&mut grads, &nodes, *b, &db);
                }
                Op::AddRow(x, b) => {
                    accumulate(&mut grads, &nodes, *x, &g);
                    let n = nodes[*b].value.len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, &nodes, *b, &db);
                }
                Op::Scale(x, f) => {
                    let dx: Vec<f64> = g.iter().map(|v| v * f).collect();
                    accumulate(&mut grads, &nodes, *x, &dx);
                }
                Op::Tanh(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, &nodes, *x, &dx);
                }
                Op::Sigmoid(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, &nodes, *x, &dx);
                }
                Op::Relu(x) => {
                    let xv = nodes[*x].value.data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, &nodes, *x, &dx);
                }
                Op::Softmax(x) => {
                    let n = out.last_dim();
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(n).zip(out.data().chunks(n)) {
                        let s = dot(grow, yrow);
                        dx.extend(grow.iter().zip(yrow).map(|(g, y)| y * (g - s)));
                    }
                    accumulate(&mut grads, &nodes, *x, &dx);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = axis_extents(out.shape(), *axis);
                    let mut offset = 0;
                    for &i in inputs {
                        let len = nodes[i].value.shape()[*axis];
                        if nodes[i].requires_grad {
                            let mut dx = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                dx.extend_from_slice(&g[base..base + len * inner]);
                            }
                            accumulate(&mut grads, &nodes, i, &dx);
                        }
                        offset += len;
                    }
                }
                Op::Narrow { input, axis, start } => {
                    let xv = &nodes[*input].value;
                    let (outer, size, inner) = axis_extents(xv.shape(), *axis);
                    let len = out.shape()[*axis];
                    let mut dx = vec![0.0; xv.len()];
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = o * size * inner + start * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(&mut grads, &nodes, *input, &dx);
                }
                Op::Reshape(x) => accumulate(&mut grads, &nodes, *x, &g),
                Op::RepeatRows(x) => {
                    let d = nodes[*x].value.len();
                    let mut dx = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (a, v) in dx.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads, &nodes, *x, &dx);
                }
                Op::Stack(inputs) => {
                    let d = out.last_dim();
                    for (r, &i) in inputs.iter().enumerate() {
                        accumulate(&mut grads, &nodes, i, &g[r * d..(r + 1) * d]);
                    }
                }
                Op::Row(x, index) => {
                    let xv = &nodes[*x].value;
                    let d = xv.last_dim();
                    let mut dx = vec![0.0; xv.len()];
                    dx[index * d..(index + 1) * d].copy_from_slice(&g);
                    accumulate(&mut grads, &nodes, *x, &dx);
                }
                Op::WeightedSum(h, w) => {
                    let (hv, wv) = (&nodes[*h].value, &nodes[*w].value);
                    let d = hv.last_dim();
                    if nodes[*h].requires_grad {
                        let mut dh = Vec::with_capacity(hv.len());
                        for &wt in wv.data() {
                            dh.extend(g.iter().map(|gv| wt * gv));
                        }
                        accumulate(&mut grads, &nodes, *h, &dh);
                    }
                    if nodes[*w].requires_grad {
                        let dw: Vec<f64> = (0..wv.len()).map(|t| dot(hv.row(t), &g)).collect();
                        accumulate(&mut grads, &nodes, *w, &dw);
                    }
                    debug_assert_eq!(g.len(), d);
                }
                Op::Gather { table, ids } => {
                    let tv = &nodes[*table].value;
                    let e = tv.last_dim();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, v) in dt[id * e..(id + 1) * e]
                            .iter_mut()
                            .zip(&g[r * e..(r + 1) * e])
                        {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads, &nodes, *table, &dt);
                }
                Op::Sum(x) => {
                    let dx = vec![g[0]; nodes[*x].value.len()];
                    accumulate(&mut grads, &nodes, *x, &dx);
                }
                Op::AddN(inputs) => {
                    for &i in inputs {
                        accumulate(&mut grads, &nodes, i, &g);
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    target,
                    probs,
                } => {
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    dx[*target] -= g[0];
                    accumulate(&mut grads, &nodes, *logits, &dx);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes
                .iter()
                .take(il + 1)
                .map(|n| n.value.shape().to_vec())
                .collect(),
            generation: self.generation.get(),
        })
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    generation: u64,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does
    /// not require gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.slice(v)
            .map(|g| Tensor::new(self.shapes[v.id].clone(), g.to_vec()).expect("gradient shape"))
    }

    pub fn slice(&self, v: Var) -> Option<&[f64]> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.id)?.as_deref()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [k] => Ok((1, *k)),
        [m, k] => Ok((*m, *k)),
        s => Err(TensorError::Rank {
            op,
            expected: "1 or 2",
            shape: s.to_vec(),
        }),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
