//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates adjoints for every node that depends on a trainable leaf.
//! Branches that only touch constants are never differentiated.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Relu(Var),
    Reshape(Var),
    ChannelAffine { x: Var, scale: Vec<f64> },
    BatchedMatVec(Var, Var),
    Conv2d { x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize },
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the differentiated output w.r.t. `v`. Nodes the output does
    /// not depend on get an all-zero tensor.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = tensor::transpose(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = tensor::add_row_bias(self.value(x), self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = tensor::relu(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// `x * scale[c] + shift[c]` where `c` indexes axis 1 of a batched tensor
    /// (the sample's leading axis). Length-1 vectors broadcast everywhere.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let v = channel_affine_values(xv, scale, Some(shift))?;
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    pub fn batched_matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let v = tensor::batched_matvec(self.value(w), self.value(x))?;
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(v, Op::BatchedMatVec(w, x), rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let v = tensor::conv2d_batch(
            self.value(x),
            self.value(k),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Per-row softmax cross-entropy of `logits[B, n]` against `targets[B]`;
    /// returns a `[B]` vector of losses.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, n) = match lv.shape() {
            &[b, n] => (b, n),
            s => return Err(Error::shape(format!("cross-entropy logits must be [B,n], got {s:?}"))),
        };
        if targets.len() != b {
            return Err(Error::shape(format!(
                "{} targets for {b} rows",
                targets.len()
            )));
        }
        if n < 2 {
            return Err(Error::shape("cross-entropy needs at least 2 classes"));
        }
        let mut out = Vec::with_capacity(b);
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::invalid(format!("target {t} out of range for {n} classes")));
            }
            let row = lv.row(i);
            out.push(tensor::log_sum_exp(row) - row[t]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::vector(out),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// Reverse accumulation from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let bt = tensor::transpose(self.value(*b))?;
                    self.accumulate(grads, *a, tensor::matmul(g, &bt)?)?;
                }
                if self.rg(*b) {
                    let at = tensor::transpose(self.value(*a))?;
                    self.accumulate(grads, *b, tensor::matmul(&at, g)?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, tensor::transpose(g)?)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, tensor::column_sums(g)?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshape(&shape)?)?;
            }
            Op::ChannelAffine { x, scale } => {
                self.accumulate(grads, *x, channel_affine_values(g, scale, None)?)?;
            }
            Op::BatchedMatVec(w, x) => {
                let wv = self.value(*w);
                let xv = self.value(*x);
                let (bsz, m, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                if self.rg(*w) {
                    let mut dw = vec![0.0; wv.len()];
                    for b in 0..bsz {
                        let xr = &xv.data()[b * k..(b + 1) * k];
                        for i in 0..m {
                            let gi = g.data()[b * m + i];
                            let row = &mut dw[(b * m + i) * k..(b * m + i + 1) * k];
                            for (d, &xj) in row.iter_mut().zip(xr) {
                                *d = gi * xj;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?)?;
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for b in 0..bsz {
                        let row = &mut dx[b * k..(b + 1) * k];
                        for i in 0..m {
                            let gi = g.data()[b * m + i];
                            let wr = &wv.data()[(b * m + i) * k..(b * m + i + 1) * k];
                            for (d, &wj) in row.iter_mut().zip(wr) {
                                *d += gi * wj;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            } => {
                let (dx, dk, db) = tensor::conv2d_batch_backward(
                    self.value(*x),
                    self.value(*k),
                    g,
                    *stride,
                    *padding,
                    self.rg(*x),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *k, dk)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                let lv = self.value(*logits);
                let n = lv.shape()[1];
                let mut d = Vec::with_capacity(lv.len());
                for (i, &t) in targets.iter().enumerate() {
                    let p = tensor::softmax(lv.row(i));
                    let gi = g.data()[i];
                    d.extend(p.iter().enumerate().map(|(j, &pj)| {
                        gi * (pj - if j == t { 1.0 } else { 0.0 })
                    }));
                }
                debug_assert_eq!(d.len(), targets.len() * n);
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()?))?;
            }
        }
        Ok(())
    }
}

fn channel_affine_values(x: &Tensor, scale: &[f64], shift: Option<&[f64]>) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "channel affine expects a batched tensor, got {shape:?}"
        )));
    }
    let channels = shape[1];
    let inner: usize = shape[2..].iter().product();
    let pick = |v: &[f64], c: usize| -> Result<f64> {
        match v.len() {
            1 => Ok(v[0]),
            n if n == channels => Ok(v[c]),
            n => Err(Error::shape(format!(
                "affine vector of length {n} does not fit {channels} channels"
            ))),
        }
    };
    let mut out = x.clone();
    for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
        let c = chunk_idx % channels;
        let s = pick(scale, c)?;
        let t = match shift {
            Some(sh) => pick(sh, c)?,
            None => 0.0,
        };
        for v in chunk.iter_mut() {
            *v = *v * s + t;
        }
    }
    Ok(out)
}
