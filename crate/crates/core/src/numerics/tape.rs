//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. Node ids increase in creation order, so walking the tape
//! backwards visits each node after all of its consumers.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Probability clamp used by [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    SumAxis(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Diag(Var),
    MaskedLogSumExp(Var, Vec<bool>),
    Bce {
        prob: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded computation record. Independent tapes may live on
/// different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when no path from the loss reaches it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// `true` when the loss has a differentiable path to `var`.
    pub fn reaches(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::dim(op, t.shape(), &[axis]));
    }
    Ok(())
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = Tensor::axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len)
                .map(|k| src[at(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aik = ad[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
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

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `var` into a fresh constant leaf; nothing
    /// downstream of the copy flows back into `var`.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let shape = vec![av.rows(), bv.cols()];
        let value = Tensor::new(shape, matmul_forward(av, bv))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::dim("transpose", av.shape(), &[2]));
        }
        let (r, c) = (av.rows(), av.cols());
        let value = Tensor::new(vec![c, r], transpose_data(av.data(), r, c))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let width = xv.shape().last().copied().unwrap_or(1);
        if bv.rank() != 1 || bv.len() != width {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % width])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("softmax", av, axis)?;
        let value = softmax_forward(av, axis);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("sum_axis", av, axis)?;
        let (outer, len, inner) = Tensor::axis_split(av.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += av.data()[o * len * inner + k * inner + i];
                }
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.value(a).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", self.value(*first), axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = Tensor::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let pv = self.value(*p);
                let chunk = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Stacks equal-shaped tensors along a new `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut shape = self.value(p).shape().to_vec();
            if axis > shape.len() {
                return Err(Error::dim("stack", &shape, &[axis]));
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(p, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    /// `len` consecutive slices of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("narrow", av, axis)?;
        if start + len > av.shape()[axis] {
            return Err(Error::dim("narrow", av.shape(), &[start, len]));
        }
        let (outer, full, inner) = Tensor::axis_split(av.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            value,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || av.rows() != av.cols() {
            return Err(Error::dim("diag", av.shape(), &[]));
        }
        let n = av.rows();
        let value = Tensor::vector((0..n).map(|i| av.at(i, i)).collect());
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Diag(a), rg))
    }

    /// Row-wise `log Σ_j exp(x_ij)` restricted to entries where `mask` is
    /// true. Every row must keep at least one entry.
    pub fn masked_logsumexp_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || mask.len() != av.len() {
            return Err(Error::dim(
                "masked_logsumexp_rows",
                av.shape(),
                &[mask.len()],
            ));
        }
        let cols = av.cols();
        let mut out = Vec::with_capacity(av.rows());
        for (r, row) in av.data().chunks(cols).enumerate() {
            let keep = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("row {r} has no unmasked entries")));
            }
            let s: f64 = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| (x - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        let value = Tensor::vector(out);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::MaskedLogSumExp(a, mask), rg))
    }

    /// Mean binary cross-entropy of `prob` against a constant `target`,
    /// with `prob` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, prob: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(prob);
        same_shape("bce", target, pv)?;
        let n = pv.len().max(1) as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let value = Tensor::scalar(total / n);
        let rg = self.any_grad(&[prob]);
        Ok(self.push(
            value,
            Op::Bce {
                prob,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::Contract("backward on a non-finite loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // Only trainable-path nodes keep gradients.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        var: Var,
        contrib: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
        contrib(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G Bᵀ, dB = Aᵀ G
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv.data()[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let back = transpose_data(g, r, c);
                self.accumulate(grads, *a, |da| {
                    da.iter_mut().zip(&back).for_each(|(d, x)| *d += x)
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                });
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                });
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d -= x)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d += v)
                });
                let width = self.value(*bias).len();
                self.accumulate(grads, *bias, |d| {
                    for (i, v) in g.iter().enumerate() {
                        d[i % width] += v;
                    }
                });
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d += v * f)
                });
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * av[i] * g[i];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = Tensor::axis_split(out.shape(), *axis);
                let y = out.data();
                self.accumulate(grads, *a, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                d[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::SumAxis(a, axis) => {
                let shape = self.value(*a).shape().to_vec();
                let (outer, len, inner) = Tensor::axis_split(&shape, *axis);
                self.accumulate(grads, *a, |d| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                d[o * len * inner + k * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = Tensor::axis_split(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(*p).shape()[*axis] * inner;
                    self.accumulate(grads, *p, |d| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            d[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, v)| *d += v);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Narrow { input, axis, start } => {
                let full_shape = self.value(*input).shape().to_vec();
                let (outer, full, inner) = Tensor::axis_split(&full_shape, *axis);
                let len = out.shape()[*axis];
                self.accumulate(grads, *input, |d| {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        d[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d += v)
                });
            }
            Op::Diag(a) => {
                let n = out.len();
                self.accumulate(grads, *a, |d| {
                    for i in 0..n {
                        d[i * n + i] += g[i];
                    }
                });
            }
            Op::MaskedLogSumExp(a, mask) => {
                let av = self.value(*a);
                let cols = av.cols();
                self.accumulate(grads, *a, |d| {
                    for r in 0..av.rows() {
                        let lse = out.data()[r];
                        for j in 0..cols {
                            let idx = r * cols + j;
                            if mask[idx] {
                                d[idx] += g[r] * (av.data()[idx] - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::Bce { prob, target } => {
                let pv = self.value(*prob).data();
                let n = pv.len().max(1) as f64;
                self.accumulate(grads, *prob, |d| {
                    for i in 0..d.len() {
                        let p = pv[i];
                        if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                            let t = target.data()[i];
                            d[i] += g[0] * (p - t) / (p * (1.0 - p)) / n;
                        }
                    }
                });
            }
        }
    }
}
