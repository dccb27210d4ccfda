//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass. Leaves are registered with a
//! `requires_grad` flag; every derived node inherits the flag from its
//! inputs so that backward only visits the part of the graph that leads
//! to a trainable leaf.

use super::kernels::{self, ConvGeom, Layout};
use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    SoftmaxT { x: Var, tau: f64 },
    SoftCrossEntropy { logits: Var, target: Tensor, probs: Vec<f64> },
    KlDivergence { p: Var, q: Var, p_probs: Vec<f64>, q_probs: Vec<f64>, log_ratio: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], one per `requires_grad` leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`. Leaves not on the path to the output get zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNt { a, b }, rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ops::conv_geom(self.value(input), self.value(kernel), stride, pad)?;
        let out = kernels::conv_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let value = Tensor::new(vec![geom.batch, geom.filters, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (nc, h, w) = ops::maxpool_dims(self.value(x))?;
        let (out, argmax) = kernels::maxpool2x2(self.value(x).data(), nc, h, w);
        let s = self.value(x).shape();
        let value = Tensor::new(vec![s[0], s[1], h / 2, w / 2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let value = ops::flatten(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = ops::add_bias(self.value(x), self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn softmax_t(&mut self, x: Var, tau: f64) -> Result<Var> {
        let value = ops::softmax_t(self.value(x), tau)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxT { x, tau }, rg))
    }

    /// Scalar mean soft-target cross-entropy; `target` is a constant.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let loss = ops::soft_cross_entropy(self.value(logits), target)?;
        let cols = target.shape()[1];
        let probs = kernels::softmax_rows(self.value(logits).data(), cols, 1.0);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                target: target.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Scalar mean `KL(softmax(q) ‖ softmax(p))`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let loss = ops::kl_divergence(self.value(p), self.value(q))?;
        let cols = self.value(p).shape()[1];
        let lp = kernels::log_softmax_rows(self.value(p).data(), cols);
        let lq = kernels::log_softmax_rows(self.value(q).data(), cols);
        let p_probs = lp.iter().map(|v| v.exp()).collect();
        let q_probs = lq.iter().map(|v| v.exp()).collect();
        let log_ratio = lq.iter().zip(&lp).map(|(a, b)| a - b).collect();
        let rg = self.rg(&[p, q]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDivergence {
                p,
                q,
                p_probs,
                q_probs,
                log_ratio,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        // Leaves that did not receive any gradient get explicit zeros.
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    // g·bᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), Layout::Plain, tb.data(), Layout::Transposed, 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    // aᵀ·g
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), Layout::Transposed, g.data(), Layout::Plain, 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::MatMulNt { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.requires_grad(*a) {
                    // g[m×n]·b[n×k]
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), Layout::Plain, tb.data(), Layout::Plain, 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    // gᵀ[n×m]·a[m×k]
                    let mut db = vec![0.0; n * k];
                    kernels::gemm(n, m, k, g.data(), Layout::Transposed, ta.data(), Layout::Plain, 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], db)?);
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                if self.requires_grad(*kernel) {
                    let dk = kernels::conv_grad_kernel(self.value(*input).data(), g.data(), geom);
                    self.accumulate(grads, *kernel, Tensor::new(self.value(*kernel).shape().to_vec(), dk)?);
                }
                if self.requires_grad(*input) {
                    let dx = kernels::conv_grad_input(self.value(*kernel).data(), g.data(), geom);
                    self.accumulate(grads, *input, Tensor::new(self.value(*input).shape().to_vec(), dx)?);
                }
            }
            Op::Relu { x } => {
                let tx = self.value(*x);
                let data = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, dx);
            }
            Op::AddBias { x, bias } => {
                if self.requires_grad(*bias) {
                    let tb = self.value(*bias);
                    let inner = ops::bias_inner(self.value(*x), tb)?;
                    let f = tb.len();
                    let mut db = vec![0.0; f];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        db[i % f] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![f], db)?);
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.map(|v| v * factor));
            }
            Op::Sum { x } => {
                let gv = g.item()?;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::SoftmaxT { x, tau } => {
                // y = softmax(z/τ); dz = y ⊙ (g − ⟨g, y⟩) / τ
                let y = &self.nodes[idx].value;
                let cols = y.shape()[1];
                let mut dz = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(cols).zip(g.data().chunks(cols)).zip(dz.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / tau;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dz)?);
            }
            Op::SoftCrossEntropy { logits, target, probs } => {
                let gv = g.item()?;
                let cols = target.shape()[1];
                let n = target.shape()[0].max(1) as f64;
                let mut dz = vec![0.0; probs.len()];
                for ((pr, tr), dr) in probs.chunks(cols).zip(target.data().chunks(cols)).zip(dz.chunks_mut(cols)) {
                    let mass: f64 = tr.iter().sum();
                    for ((d, p), t) in dr.iter_mut().zip(pr).zip(tr) {
                        *d = gv * (p * mass - t) / n;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(target.shape().to_vec(), dz)?);
            }
            Op::KlDivergence { p, q, p_probs, q_probs, log_ratio } => {
                let gv = g.item()?;
                let shape = self.value(*p).shape().to_vec();
                let cols = shape[1];
                let n = shape[0].max(1) as f64;
                if self.requires_grad(*p) {
                    let mut dp = vec![0.0; p_probs.len()];
                    for ((pr, qr), dr) in p_probs.chunks(cols).zip(q_probs.chunks(cols)).zip(dp.chunks_mut(cols)) {
                        let mass: f64 = qr.iter().sum();
                        for ((d, pv), qv) in dr.iter_mut().zip(pr).zip(qr) {
                            *d = gv * (pv * mass - qv) / n;
                        }
                    }
                    self.accumulate(grads, *p, Tensor::new(shape.clone(), dp)?);
                }
                if self.requires_grad(*q) {
                    let mut dq = vec![0.0; q_probs.len()];
                    for ((qr, ar), dr) in q_probs.chunks(cols).zip(log_ratio.chunks(cols)).zip(dq.chunks_mut(cols)) {
                        let mean: f64 = qr.iter().zip(ar).map(|(a, b)| a * b).sum();
                        for ((d, qv), av) in dr.iter_mut().zip(qr).zip(ar) {
                            *d = gv * qv * (av - mean) / n;
                        }
                    }
                    self.accumulate(grads, *q, Tensor::new(shape, dq)?);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let unused = tape.leaf(Tensor::full(&[2, 2], 1.0), true);
        let y = tape.scale(x, 2.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(g.get(x).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn non_scalar_output_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5), true);
        let c = tape.leaf(Tensor::scalar(4.0), false);
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn maxpool_routes_to_max_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1., 5., 3., 4.]).unwrap(), true);
        let p = tape.maxpool2d(x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 1., 0., 0.]);
    }
}
