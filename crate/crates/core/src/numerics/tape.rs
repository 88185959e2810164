//! Reverse-mode differentiation on a linear tape.
//!
//! A [`Tape`] records every kernel application in execution order together
//! with the activations its vector–Jacobian product needs. [`Tape::backward`]
//! walks the record strictly in reverse and accumulates adjoints, so a value
//! consumed by several kernels receives the sum of all their contributions.
//! A tape belongs to one logical thread; independent tapes never share state.

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    /// Softmax within each row of a matrix.
    SoftmaxRows(Var),
    /// Softmax over every element jointly.
    SoftmaxAll(Var),
    Sum(Var),
    /// Sum a matrix over one axis (0 = down columns, 1 = across rows).
    SumAxis(Var, usize),
    /// Per-column max over rows of a matrix; saved argmax row per column.
    MaxAxis0(Var, Vec<usize>),
    /// Select one element by flat index.
    Pick(Var, usize),
    /// ln(max(x, floor)) elementwise; gradient is zero on the clamped branch.
    LogClamped(Var, f64),
    Reshape(Var),
    /// Stack equal-length vectors as matrix rows.
    StackRows(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    /// 2x2/stride-2 max pool; saved flat argmax per output cell.
    MaxPool2(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node of a tape after a backward pass. Leaves that the
/// loss never touched hold exact zeros.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite("kernel output")?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input value (parameter or data) as a leaf.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        self.push(y, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = kernels::transpose(self.value(a))?;
        self.push(y, Op::Transpose(a))
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::contract(format!(
                "{name} shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| c * x).collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(y, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let y = kernels::tanh_map(self.value(a))?;
        self.push(y, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(y, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::contract(format!(
                "softmax_rows expects a matrix, got {:?}",
                self.value(a).shape()
            )));
        }
        let y = kernels::softmax_axes(self.value(a), &[1])?;
        self.push(y, Op::SoftmaxRows(a))
    }

    pub fn softmax_all(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        let axes: Vec<usize> = (0..rank).collect();
        if axes.is_empty() {
            return Err(Error::contract("softmax_all on a scalar"));
        }
        let y = kernels::softmax_axes(self.value(a), &axes)?;
        self.push(y, Op::SoftmaxAll(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).data().iter().sum())?;
        self.push(y, Op::Sum(a))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || axis > 1 {
            return Err(Error::contract(format!(
                "sum_axis expects a matrix and axis 0|1, got {:?} axis {axis}",
                t.shape()
            )));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let y = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += t.at2(i, j);
                }
            }
            Tensor::new(vec![n], out)?
        } else {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = t.row(i).iter().sum();
            }
            Tensor::new(vec![m], out)?
        };
        self.push(y, Op::SumAxis(a, axis))
    }

    /// Column-wise max over rows; ties resolve to the lowest row index.
    pub fn max_axis0(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::contract(format!(
                "max_axis0 expects a matrix, got {:?}",
                t.shape()
            )));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut arg = vec![0usize; n];
        for i in 0..m {
            for j in 0..n {
                if t.at2(i, j) > out[j] {
                    out[j] = t.at2(i, j);
                    arg[j] = i;
                }
            }
        }
        let y = Tensor::new(vec![n], out)?;
        self.push(y, Op::MaxAxis0(a, arg))
    }

    pub fn pick(&mut self, a: Var, flat_index: usize) -> Result<Var> {
        let t = self.value(a);
        if flat_index >= t.numel() {
            return Err(Error::contract(format!(
                "pick index {flat_index} out of range for shape {:?}",
                t.shape()
            )));
        }
        let y = Tensor::scalar(t.data()[flat_index])?;
        self.push(y, Op::Pick(a, flat_index))
    }

    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        debug_assert!(floor > 0.0);
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.max(floor).ln())
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(y, Op::LogClamped(a, floor))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.value(a).reshaped(shape)?;
        self.push(y, Op::Reshape(a))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows of zero rows"));
        }
        let n = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.numel() != n {
                return Err(Error::contract(format!(
                    "stack_rows expects equal-length vectors, got {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let y = Tensor::new(vec![rows.len(), n], data)?;
        self.push(y, Op::StackRows(rows.to_vec()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), self.value(b), pad)?;
        self.push(y, Op::Conv2d { x, w, b, pad })
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2(self.value(x))?;
        self.push(y, Op::MaxPool2(x, argmax))
    }

    /// Accumulate adjoints for every node reachable from `loss`, visiting
    /// kernels in exact reverse execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if grads[id].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[id].clone();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let bt = kernels::transpose(self.value(*b))?;
                    let ga = kernels::matmul(&g, &bt)?;
                    accumulate(&mut grads[a.0], &ga);
                    let at = kernels::transpose(self.value(*a))?;
                    let gb = kernels::matmul(&at, &g)?;
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Transpose(a) => {
                    let ga = kernels::transpose(&g)?;
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    for (dst, src) in grads[b.0].data_mut().iter_mut().zip(g.data()) {
                        *dst -= src;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    for i in 0..g.numel() {
                        grads[a.0].data_mut()[i] += g.data()[i] * self.value(b).data()[i];
                    }
                    for i in 0..g.numel() {
                        grads[b.0].data_mut()[i] += g.data()[i] * self.value(a).data()[i];
                    }
                }
                Op::Scale(a, c) => {
                    for (dst, src) in grads[a.0].data_mut().iter_mut().zip(g.data()) {
                        *dst += c * src;
                    }
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    for i in 0..g.numel() {
                        grads[a.0].data_mut()[i] += g.data()[i] * (1.0 - y.data()[i] * y.data()[i]);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    for i in 0..g.numel() {
                        if x.data()[i] > 0.0 {
                            grads[a.0].data_mut()[i] += g.data()[i];
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    // d/dx softmax: y ⊙ (g − ⟨g, y⟩) within each row.
                    let y = &self.nodes[id].value;
                    let (m, n) = (y.shape()[0], y.shape()[1]);
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g.data()[i * n + j] * y.data()[i * n + j];
                        }
                        for j in 0..n {
                            let idx = i * n + j;
                            grads[a.0].data_mut()[idx] += y.data()[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                Op::SoftmaxAll(a) => {
                    let y = &self.nodes[id].value;
                    let mut dot = 0.0;
                    for i in 0..g.numel() {
                        dot += g.data()[i] * y.data()[i];
                    }
                    for i in 0..g.numel() {
                        grads[a.0].data_mut()[i] += y.data()[i] * (g.data()[i] - dot);
                    }
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    for dst in grads[a.0].data_mut() {
                        *dst += gv;
                    }
                }
                Op::SumAxis(a, axis) => {
                    let t = self.value(*a);
                    let (m, n) = (t.shape()[0], t.shape()[1]);
                    if *axis == 0 {
                        for i in 0..m {
                            for j in 0..n {
                                grads[a.0].data_mut()[i * n + j] += g.data()[j];
                            }
                        }
                    } else {
                        for i in 0..m {
                            for j in 0..n {
                                grads[a.0].data_mut()[i * n + j] += g.data()[i];
                            }
                        }
                    }
                }
                Op::MaxAxis0(a, arg) => {
                    let n = self.value(*a).shape()[1];
                    for j in 0..g.numel() {
                        grads[a.0].data_mut()[arg[j] * n + j] += g.data()[j];
                    }
                }
                Op::Pick(a, idx) => {
                    grads[a.0].data_mut()[*idx] += g.data()[0];
                }
                Op::LogClamped(a, floor) => {
                    let x = self.value(*a);
                    for i in 0..g.numel() {
                        if x.data()[i] > *floor {
                            grads[a.0].data_mut()[i] += g.data()[i] / x.data()[i];
                        }
                    }
                }
                Op::Reshape(a) => {
                    for (dst, src) in grads[a.0].data_mut().iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                Op::StackRows(rows) => {
                    let n = self.value(rows[0]).numel();
                    for (i, r) in rows.iter().enumerate() {
                        for j in 0..n {
                            grads[r.0].data_mut()[j] += g.data()[i * n + j];
                        }
                    }
                }
                Op::Conv2d { x, w, b, pad } => {
                    let (xs, ws) = (self.value(*x).clone(), self.value(*w).clone());
                    let (ci_n, h, wd) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                    let (co_n, kh, kw) = (ws.shape()[0], ws.shape()[2], ws.shape()[3]);
                    let (oh, ow) = (g.shape()[1], g.shape()[2]);
                    let pad = *pad;
                    for co in 0..co_n {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let gv = g.data()[(co * oh + oi) * ow + oj];
                                if gv == 0.0 {
                                    continue;
                                }
                                grads[b.0].data_mut()[co] += gv;
                                for ci in 0..ci_n {
                                    for u in 0..kh {
                                        let xi = oi + u;
                                        if xi < pad || xi - pad >= h {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let xj = oj + v;
                                            if xj < pad || xj - pad >= wd {
                                                continue;
                                            }
                                            let xidx = (ci * h + (xi - pad)) * wd + (xj - pad);
                                            let widx = ((co * ci_n + ci) * kh + u) * kw + v;
                                            grads[w.0].data_mut()[widx] += gv * xs.data()[xidx];
                                            grads[x.0].data_mut()[xidx] += gv * ws.data()[widx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool2(x, argmax) => {
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        grads[x.0].data_mut()[src_idx] += g.data()[o];
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}
