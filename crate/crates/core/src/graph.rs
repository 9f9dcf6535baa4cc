//! Feed-forward computation graph with reverse-mode differentiation.
//!
//! A `Graph` is a chain of primitive nodes over named parameter leaves,
//! enough for small MLPs and LeNet-style CNNs. Everything runs in f64.
//! Graphs are immutable after construction; forward and gradient calls
//! borrow them, so evaluation from multiple workers is safe. Convolutions
//! are direct loops; inputs at desk scale (<= 32x32) keep that adequate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Primitive ops. Binary elementwise nodes take a parameter leaf as the
/// second operand, broadcast over the batch axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Node {
    /// y = x W^T + b, weight [out, in], bias [out].
    Dense { weight: String, bias: String },
    /// Valid (unpadded) 2-D convolution, weight [co, ci, kh, kw], bias [co].
    Conv2d { weight: String, bias: String, stride: usize },
    /// Window max, ties broken toward the first element in row-major scan.
    MaxPool2d { kernel: usize, stride: usize },
    Relu,
    Sigmoid,
    Flatten,
    /// Row softmax with max-subtraction stabilization.
    Softmax,
    /// x + p elementwise.
    AddParam { param: String },
    /// x ⊙ p elementwise.
    MulParam { param: String },
    /// Sum over all non-batch axes, output [n, 1].
    SumReduce,
}

/// Chain of nodes plus named parameter tensors. Shape-checked on build.
#[derive(Debug, Clone)]
pub struct Graph {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    params: BTreeMap<String, Tensor>,
    output_len: usize,
}

/// Activations captured during a forward pass: `values[0]` is the batched
/// input, `values[i+1]` the output of node `i`.
pub struct Trace {
    values: Vec<Tensor>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("trace has at least the input")
    }
}

pub type ParamGrads = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    CrossEntropy,
}

impl Graph {
    pub fn new(
        input_shape: Vec<usize>,
        nodes: Vec<Node>,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Graph> {
        // Propagate per-sample shapes through the chain so every node's
        // input is consistent with its op before any evaluation happens.
        let mut shape = input_shape.clone();
        for node in &nodes {
            shape = infer_shape(node, &shape, &params)?;
        }
        if shape.len() != 1 {
            return Err(Error::InvalidShape(format!(
                "graph output must be a vector of logits, got shape {shape:?}"
            )));
        }
        Ok(Graph { input_shape, nodes, params, output_len: shape[0] })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Length k of the logit vector.
    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Single-writer parameter access for the training loop.
    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    fn batchify(&self, x: &Tensor) -> Result<(Tensor, bool)> {
        if x.shape() == self.input_shape.as_slice() {
            Ok((x.clone().unsqueeze_batch(), true))
        } else if x.shape().len() == self.input_shape.len() + 1
            && x.shape()[1..] == self.input_shape[..]
        {
            Ok((x.clone(), false))
        } else {
            Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            })
        }
    }

    /// Evaluates the logit vector Z(x). Accepts a single sample (returns
    /// shape [k]) or a batch with a leading axis (returns [n, k]).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batched, single) = self.batchify(x)?;
        let trace = self.forward_trace(&batched)?;
        let out = trace.output().clone();
        if single {
            out.squeeze_batch()
        } else {
            Ok(out)
        }
    }

    /// Forward pass over a batched input, keeping every activation for the
    /// backward pass. Each node's output is checked finite.
    pub fn forward_trace(&self, batched: &Tensor) -> Result<Trace> {
        if batched.shape().len() != self.input_shape.len() + 1
            || batched.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                got: batched.shape().to_vec(),
            });
        }
        let mut values = Vec::with_capacity(self.nodes.len() + 1);
        values.push(batched.clone());
        for (i, node) in self.nodes.iter().enumerate() {
            let out = self.node_forward(node, &values[i])?;
            out.ensure_finite(&format!("node {i} ({})", node_name(node)))?;
            values.push(out);
        }
        Ok(Trace { values })
    }

    /// Reverse pass. `cotangent` has the output's batched shape [n, k];
    /// returns the input cotangent and the parameter gradients. Parameters
    /// reused by several nodes accumulate additively.
    pub fn vjp(&self, trace: &Trace, cotangent: &Tensor) -> Result<(Tensor, ParamGrads)> {
        let out_shape = trace.output().shape();
        if cotangent.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                expected: out_shape.to_vec(),
                got: cotangent.shape().to_vec(),
            });
        }
        let mut grads: ParamGrads = BTreeMap::new();
        let mut upstream = cotangent.clone();
        for (i, node) in self.nodes.iter().enumerate().rev() {
            upstream = self.node_backward(node, &trace.values[i], &upstream, &mut grads)?;
        }
        upstream.ensure_finite("vjp input gradient")?;
        Ok((upstream, grads))
    }

    /// Gradient of logit `target` with respect to a single input.
    pub fn input_gradient(&self, x: &Tensor, target: usize) -> Result<Tensor> {
        if target >= self.output_len {
            return Err(Error::IndexOutOfRange { index: target, limit: self.output_len });
        }
        let (batched, _) = self.batchify(x)?;
        let trace = self.forward_trace(&batched)?;
        let mut cot = Tensor::zeros(&[1, self.output_len]);
        cot.data_mut()[target] = 1.0;
        let (dx, _) = self.vjp(&trace, &cot)?;
        dx.squeeze_batch()
    }

    /// Per-sample gradients of logit `targets[i]` for a batch; row i of the
    /// result is bitwise identical to `input_gradient(xs.row(i), targets[i])`.
    pub fn input_gradient_batch(&self, xs: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (batched, _) = self.batchify(xs)?;
        let n = batched.shape()[0];
        if targets.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} targets for a batch of {n}",
                targets.len()
            )));
        }
        for &t in targets {
            if t >= self.output_len {
                return Err(Error::IndexOutOfRange { index: t, limit: self.output_len });
            }
        }
        let trace = self.forward_trace(&batched)?;
        let mut cot = Tensor::zeros(&[n, self.output_len]);
        for (i, &t) in targets.iter().enumerate() {
            cot.data_mut()[i * self.output_len + t] = 1.0;
        }
        let (dx, _) = self.vjp(&trace, &cot)?;
        Ok(dx)
    }

    /// Input cotangent for an arbitrary output cotangent, no parameter grads.
    pub fn input_vjp(&self, xs: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        let (batched, _) = self.batchify(xs)?;
        let trace = self.forward_trace(&batched)?;
        let (dx, _) = self.vjp(&trace, cotangent)?;
        Ok(dx)
    }

    /// Mean loss over the batch and gradients for every parameter leaf.
    pub fn loss_gradients(
        &self,
        batch: &Tensor,
        labels: &[usize],
        loss: Loss,
    ) -> Result<(f64, ParamGrads)> {
        let Loss::CrossEntropy = loss;
        let (batched, _) = self.batchify(batch)?;
        let n = batched.shape()[0];
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        let trace = self.forward_trace(&batched)?;
        let (losses, mut cot) = ce_losses_and_cotangent(trace.output(), labels, self.output_len)?;
        let scale = 1.0 / n as f64;
        for v in cot.data_mut() {
            *v *= scale;
        }
        let mean_loss = losses.iter().sum::<f64>() * scale;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let (_, grads) = self.vjp(&trace, &cot)?;
        Ok((mean_loss, grads))
    }

    /// Per-sample cross-entropy losses and the input gradient of each
    /// sample's own (unscaled) loss. This is the ∇x J the attacks consume.
    pub fn input_loss_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let (batched, _) = self.batchify(batch)?;
        let n = batched.shape()[0];
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        let trace = self.forward_trace(&batched)?;
        let (losses, cot) = ce_losses_and_cotangent(trace.output(), labels, self.output_len)?;
        let (dx, _) = self.vjp(&trace, &cot)?;
        Ok((losses, dx))
    }

    fn node_forward(&self, node: &Node, x: &Tensor) -> Result<Tensor> {
        match node {
            Node::Dense { weight, bias } => {
                let w = self.param(weight)?;
                let b = self.param(bias)?;
                dense_forward(x, w, b)
            }
            Node::Conv2d { weight, bias, stride } => {
                let w = self.param(weight)?;
                let b = self.param(bias)?;
                conv2d_forward(x, w, b, *stride)
            }
            Node::MaxPool2d { kernel, stride } => maxpool_forward(x, *kernel, *stride),
            Node::Relu => Ok(x.map(|v| if v > 0.0 { v } else { 0.0 })),
            Node::Sigmoid => Ok(x.map(sigmoid)),
            Node::Flatten => {
                let n = x.shape()[0];
                let rest = x.numel() / n;
                x.clone().reshape(vec![n, rest])
            }
            Node::Softmax => softmax_rows(x),
            Node::AddParam { param } => broadcast_zip(x, self.param(param)?, |a, p| a + p),
            Node::MulParam { param } => broadcast_zip(x, self.param(param)?, |a, p| a * p),
            Node::SumReduce => {
                let n = x.shape()[0];
                let stride = x.numel() / n;
                let mut out = vec![0.0; n];
                for i in 0..n {
                    out[i] = x.data()[i * stride..(i + 1) * stride].iter().sum();
                }
                Ok(Tensor::from_parts(vec![n, 1], out))
            }
        }
    }

    fn node_backward(
        &self,
        node: &Node,
        x: &Tensor,
        dy: &Tensor,
        grads: &mut ParamGrads,
    ) -> Result<Tensor> {
        match node {
            Node::Dense { weight, bias } => {
                let w = self.param(weight)?;
                let (dx, dw, db) = dense_backward(x, w, dy);
                accumulate(grads, weight, dw);
                accumulate(grads, bias, db);
                Ok(dx)
            }
            Node::Conv2d { weight, bias, stride } => {
                let w = self.param(weight)?;
                let (dx, dw, db) = conv2d_backward(x, w, dy, *stride);
                accumulate(grads, weight, dw);
                accumulate(grads, bias, db);
                Ok(dx)
            }
            Node::MaxPool2d { kernel, stride } => maxpool_backward(x, dy, *kernel, *stride),
            Node::Relu => x.zip(dy, |xi, di| if xi > 0.0 { di } else { 0.0 }),
            Node::Sigmoid => x.zip(dy, |xi, di| {
                let s = sigmoid(xi);
                di * s * (1.0 - s)
            }),
            Node::Flatten => dy.clone().reshape(x.shape().to_vec()),
            Node::Softmax => {
                let s = softmax_rows(x)?;
                softmax_backward(&s, dy)
            }
            Node::AddParam { param } => {
                accumulate(grads, param, sum_over_batch(dy));
                Ok(dy.clone())
            }
            Node::MulParam { param } => {
                let p = self.param(param)?;
                let dp = {
                    let prod = x.zip(dy, |a, b| a * b)?;
                    sum_over_batch(&prod)
                };
                accumulate(grads, param, dp);
                broadcast_zip(dy, p, |d, pv| d * pv)
            }
            Node::SumReduce => {
                let n = x.shape()[0];
                let stride = x.numel() / n;
                let mut dx = vec![0.0; x.numel()];
                for i in 0..n {
                    let d = dy.data()[i];
                    for v in &mut dx[i * stride..(i + 1) * stride] {
                        *v = d;
                    }
                }
                Ok(Tensor::from_parts(x.shape().to_vec(), dx))
            }
        }
    }

    fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }
}

fn node_name(node: &Node) -> &'static str {
    match node {
        Node::Dense { .. } => "dense",
        Node::Conv2d { .. } => "conv2d",
        Node::MaxPool2d { .. } => "maxpool2d",
        Node::Relu => "relu",
        Node::Sigmoid => "sigmoid",
        Node::Flatten => "flatten",
        Node::Softmax => "softmax",
        Node::AddParam { .. } => "add",
        Node::MulParam { .. } => "mul",
        Node::SumReduce => "sum",
    }
}

fn infer_shape(node: &Node, input: &[usize], params: &BTreeMap<String, Tensor>) -> Result<Vec<usize>> {
    let fetch = |name: &str| -> Result<&Tensor> {
        params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    };
    let bad = |msg: String| Err(Error::InvalidShape(msg));
    match node {
        Node::Dense { weight, bias } => {
            let w = fetch(weight)?;
            let b = fetch(bias)?;
            if input.len() != 1 {
                return bad(format!("dense expects a flat input, got {input:?}"));
            }
            if w.shape().len() != 2 || w.shape()[1] != input[0] {
                return bad(format!("dense weight {:?} vs input {input:?}", w.shape()));
            }
            if b.shape() != [w.shape()[0]] {
                return bad(format!("dense bias {:?} vs weight {:?}", b.shape(), w.shape()));
            }
            Ok(vec![w.shape()[0]])
        }
        Node::Conv2d { weight, bias, stride } => {
            let w = fetch(weight)?;
            let b = fetch(bias)?;
            if input.len() != 3 {
                return bad(format!("conv2d expects [c,h,w] input, got {input:?}"));
            }
            let (ci, h, wd) = (input[0], input[1], input[2]);
            let ws = w.shape();
            if ws.len() != 4 || ws[1] != ci {
                return bad(format!("conv2d weight {ws:?} vs input {input:?}"));
            }
            let (co, kh, kw) = (ws[0], ws[2], ws[3]);
            if b.shape() != [co] {
                return bad(format!("conv2d bias {:?} vs weight {ws:?}", b.shape()));
            }
            if *stride == 0 || kh > h || kw > wd {
                return bad(format!("conv2d kernel {kh}x{kw} stride {stride} on {h}x{wd}"));
            }
            Ok(vec![co, (h - kh) / stride + 1, (wd - kw) / stride + 1])
        }
        Node::MaxPool2d { kernel, stride } => {
            if input.len() != 3 {
                return bad(format!("maxpool expects [c,h,w] input, got {input:?}"));
            }
            if *kernel == 0 || *stride == 0 || *kernel > input[1] || *kernel > input[2] {
                return bad(format!("maxpool kernel {kernel} stride {stride} on {input:?}"));
            }
            Ok(vec![
                input[0],
                (input[1] - kernel) / stride + 1,
                (input[2] - kernel) / stride + 1,
            ])
        }
        Node::Relu | Node::Sigmoid => Ok(input.to_vec()),
        Node::Flatten => Ok(vec![input.iter().product()]),
        Node::Softmax => {
            if input.len() != 1 {
                return bad(format!("softmax expects a flat input, got {input:?}"));
            }
            Ok(input.to_vec())
        }
        Node::AddParam { param } | Node::MulParam { param } => {
            let p = fetch(param)?;
            if p.shape() != input {
                return bad(format!("elementwise param {:?} vs input {input:?}", p.shape()));
            }
            Ok(input.to_vec())
        }
        Node::SumReduce => Ok(vec![1]),
    }
}

fn accumulate(grads: &mut ParamGrads, name: &str, g: Tensor) {
    match grads.get_mut(name) {
        Some(acc) => {
            let sum = acc.add(&g).expect("accumulated gradient shapes agree");
            *acc = sum;
        }
        None => {
            grads.insert(name.to_string(), g);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stabilized softmax of a 1-D logit vector.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 1 {
        return Err(Error::InvalidShape(format!(
            "softmax expects a 1-D tensor, got {:?}",
            logits.shape()
        )));
    }
    let m = logits.max();
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Tensor::new(logits.shape().to_vec(), exps.iter().map(|e| e / z).collect())
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let k = x.numel() / n;
    let mut out = vec![0.0; x.numel()];
    for i in 0..n {
        let row = &x.data()[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let dst = &mut out[i * k..(i + 1) * k];
        let mut z = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn softmax_backward(s: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let n = s.shape()[0];
    let k = s.numel() / n;
    let mut dx = vec![0.0; s.numel()];
    for i in 0..n {
        let srow = &s.data()[i * k..(i + 1) * k];
        let drow = &dy.data()[i * k..(i + 1) * k];
        let inner: f64 = srow.iter().zip(drow).map(|(a, b)| a * b).sum();
        for j in 0..k {
            dx[i * k + j] = srow[j] * (drow[j] - inner);
        }
    }
    Ok(Tensor::from_parts(s.shape().to_vec(), dx))
}

/// Per-sample cross-entropy losses and the unscaled cotangent softmax(z) - y.
fn ce_losses_and_cotangent(
    logits: &Tensor,
    labels: &[usize],
    k: usize,
) -> Result<(Vec<f64>, Tensor)> {
    let n = logits.shape()[0];
    let mut losses = vec![0.0; n];
    let mut cot = vec![0.0; logits.numel()];
    for i in 0..n {
        let y = labels[i];
        if y >= k {
            return Err(Error::IndexOutOfRange { index: y, limit: k });
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = z.ln() + m;
        losses[i] = log_z - row[y];
        for j in 0..k {
            cot[i * k + j] = (row[j] - log_z).exp();
        }
        cot[i * k + y] -= 1.0;
    }
    Ok((losses, Tensor::from_parts(logits.shape().to_vec(), cot)))
}

fn broadcast_zip(x: &Tensor, p: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let n = x.shape()[0];
    let stride = p.numel();
    let mut out = vec![0.0; x.numel()];
    for i in 0..n {
        for j in 0..stride {
            out[i * stride + j] = f(x.data()[i * stride + j], p.data()[j]);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn sum_over_batch(x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let stride = x.numel() / n;
    let mut out = vec![0.0; stride];
    for i in 0..n {
        for j in 0..stride {
            out[j] += x.data()[i * stride + j];
        }
    }
    Tensor::from_parts(x.shape()[1..].to_vec(), out)
}

/// Dot product with eight independent accumulator chains so the loop can
/// vectorize despite float non-associativity.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut acc = [0.0f64; 8];
    let mut i = 0;
    while i + 8 <= n {
        for j in 0..8 {
            acc[j] += a[i + j] * b[i + j];
        }
        i += 8;
    }
    let mut tail = 0.0;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let d_in = x.shape()[1];
    let d_out = w.shape()[0];
    let mut out = vec![0.0; n * d_out];
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    out.par_chunks_mut(d_out).enumerate().for_each(|(i, row)| {
        let xrow = &xd[i * d_in..(i + 1) * d_in];
        for (o, r) in row.iter_mut().enumerate() {
            let wrow = &wd[o * d_in..(o + 1) * d_in];
            *r = bd[o] + dot(xrow, wrow);
        }
    });
    Ok(Tensor::from_parts(vec![n, d_out], out))
}

fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = x.shape()[0];
    let d_in = x.shape()[1];
    let d_out = w.shape()[0];
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    let mut dx = vec![0.0; n * d_in];
    dx.par_chunks_mut(d_in).enumerate().for_each(|(i, row)| {
        let dyrow = &dyd[i * d_out..(i + 1) * d_out];
        for (o, &d) in dyrow.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let wrow = &wd[o * d_in..(o + 1) * d_in];
            for j in 0..d_in {
                row[j] += d * wrow[j];
            }
        }
    });

    let mut dw = vec![0.0; d_out * d_in];
    dw.par_chunks_mut(d_in).enumerate().for_each(|(o, row)| {
        for i in 0..n {
            let d = dyd[i * d_out + o];
            if d == 0.0 {
                continue;
            }
            let xrow = &xd[i * d_in..(i + 1) * d_in];
            for j in 0..d_in {
                row[j] += d * xrow[j];
            }
        }
    });

    let mut db = vec![0.0; d_out];
    for i in 0..n {
        for o in 0..d_out {
            db[o] += dyd[i * d_out + o];
        }
    }

    (
        Tensor::from_parts(vec![n, d_in], dx),
        Tensor::from_parts(vec![d_out, d_in], dw),
        Tensor::from_parts(vec![d_out], db),
    )
}

/// Patch matrix for one sample: row p = the receptive field of output
/// position p, flattened [ci*kh*kw]. Turns convolution into contiguous
/// dot products.
fn im2col(
    xs: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let k = ci * kh * kw;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            let mut dst = 0;
            for cc in 0..ci {
                for ky in 0..kh {
                    let src = cc * h * wd + (oy * stride + ky) * wd + ox * stride;
                    row[dst..dst + kw].copy_from_slice(&xs[src..src + kw]);
                    dst += kw;
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ho = (h - kh) / stride + 1;
    let wo = (wd - kw) / stride + 1;
    let k = ci * kh * kw;
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    let mut out = vec![0.0; n * co * ho * wo];
    out.par_chunks_mut(co * ho * wo).enumerate().for_each(|(i, sample)| {
        let xs = &xd[i * ci * h * wd..(i + 1) * ci * h * wd];
        if stride == 1 {
            // Shift-and-accumulate: each kernel tap contributes one
            // contiguous axpy per output row, no patch materialization.
            for c in 0..co {
                let dst = &mut sample[c * ho * wo..(c + 1) * ho * wo];
                dst.fill(bd[c]);
                for cc in 0..ci {
                    let plane = &xs[cc * h * wd..(cc + 1) * h * wd];
                    let wbase = (c * ci + cc) * kh * kw;
                    for oy in 0..ho {
                        let row = &mut dst[oy * wo..(oy + 1) * wo];
                        for ky in 0..kh {
                            let xrow = &plane[(oy + ky) * wd..(oy + ky) * wd + wd];
                            for kx in 0..kw {
                                let wv = wdat[wbase + ky * kw + kx];
                                let src = &xrow[kx..kx + wo];
                                for (r, &s) in row.iter_mut().zip(src) {
                                    *r += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        } else {
            let mut cols = vec![0.0; ho * wo * k];
            im2col(xs, ci, h, wd, kh, kw, stride, ho, wo, &mut cols);
            for c in 0..co {
                let wrow = &wdat[c * k..(c + 1) * k];
                let dst = &mut sample[c * ho * wo..(c + 1) * ho * wo];
                for (p, d) in dst.iter_mut().enumerate() {
                    *d = bd[c] + dot(wrow, &cols[p * k..(p + 1) * k]);
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, co, ho, wo], out))
}

fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, stride: usize) -> (Tensor, Tensor, Tensor) {
    let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let [ho, wo] = [dy.shape()[2], dy.shape()[3]];
    let k = ci * kh * kw;
    let xd = x.data();
    let wdat = w.data();
    let dyd = dy.data();

    // Per-sample partials, reduced in sample order afterwards.
    let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xs = &xd[i * ci * h * wd..(i + 1) * ci * h * wd];
            let dys = &dyd[i * co * ho * wo..(i + 1) * co * ho * wo];
            let mut dw = vec![0.0; co * k];
            let mut db = vec![0.0; co];
            let mut dxs = vec![0.0; ci * h * wd];

            if stride == 1 {
                for c in 0..co {
                    let dplane = &dys[c * ho * wo..(c + 1) * ho * wo];
                    for v in dplane {
                        db[c] += v;
                    }
                    for cc in 0..ci {
                        let xplane = &xs[cc * h * wd..(cc + 1) * h * wd];
                        let dxplane = &mut dxs[cc * h * wd..(cc + 1) * h * wd];
                        let wbase = (c * ci + cc) * kh * kw;
                        for oy in 0..ho {
                            let drow = &dplane[oy * wo..(oy + 1) * wo];
                            for ky in 0..kh {
                                let xrow = &xplane[(oy + ky) * wd..(oy + ky) * wd + wd];
                                for kx in 0..kw {
                                    dw[wbase + ky * kw + kx] += dot(drow, &xrow[kx..kx + wo]);
                                    let wv = wdat[wbase + ky * kw + kx];
                                    let dst = &mut dxplane
                                        [(oy + ky) * wd + kx..(oy + ky) * wd + kx + wo];
                                    for (a, &d) in dst.iter_mut().zip(drow) {
                                        *a += wv * d;
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                let mut cols = vec![0.0; ho * wo * k];
                im2col(xs, ci, h, wd, kh, kw, stride, ho, wo, &mut cols);
                let mut dcols = vec![0.0; ho * wo * k];
                for c in 0..co {
                    let wrow = &wdat[c * k..(c + 1) * k];
                    let dwrow = &mut dw[c * k..(c + 1) * k];
                    for p in 0..ho * wo {
                        let d = dys[c * ho * wo + p];
                        db[c] += d;
                        if d == 0.0 {
                            continue;
                        }
                        let col = &cols[p * k..(p + 1) * k];
                        let dcol = &mut dcols[p * k..(p + 1) * k];
                        for j in 0..k {
                            dwrow[j] += d * col[j];
                            dcol[j] += d * wrow[j];
                        }
                    }
                }
                // col2im scatter-add back into the input layout.
                for oy in 0..ho {
                    for ox in 0..wo {
                        let row = &dcols[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
                        let mut src = 0;
                        for cc in 0..ci {
                            for ky in 0..kh {
                                let dst = cc * h * wd + (oy * stride + ky) * wd + ox * stride;
                                for j in 0..kw {
                                    dxs[dst + j] += row[src + j];
                                }
                                src += kw;
                            }
                        }
                    }
                }
            }
            (dxs, dw, db)
        })
        .collect();

    let mut dx = vec![0.0; n * ci * h * wd];
    let mut dw = vec![0.0; co * k];
    let mut db = vec![0.0; co];
    for (i, (dxs, dws, dbs)) in partials.into_iter().enumerate() {
        dx[i * ci * h * wd..(i + 1) * ci * h * wd].copy_from_slice(&dxs);
        for (a, v) in dw.iter_mut().zip(dws) {
            *a += v;
        }
        for (a, v) in db.iter_mut().zip(dbs) {
            *a += v;
        }
    }

    (
        Tensor::from_parts(vec![n, ci, h, wd], dx),
        Tensor::from_parts(vec![co, ci, kh, kw], dw),
        Tensor::from_parts(vec![co], db),
    )
}

fn maxpool_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    out.par_chunks_mut(c * ho * wo).enumerate().for_each(|(i, sample)| {
        let xs = &xd[i * c * h * w..(i + 1) * c * h * w];
        for cc in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let v = xs[cc * h * w + (oy * stride + ky) * w + ox * stride + kx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    sample[(cc * ho + oy) * wo + ox] = best;
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

fn maxpool_backward(x: &Tensor, dy: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let [_n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [ho, wo] = [dy.shape()[2], dy.shape()[3]];
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; x.numel()];
    dx.par_chunks_mut(c * h * w).enumerate().for_each(|(i, dxs)| {
        let xs = &xd[i * c * h * w..(i + 1) * c * h * w];
        let dys = &dyd[i * c * ho * wo..(i + 1) * c * ho * wo];
        for cc in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    // First maximum in row-major scan receives the gradient.
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = cc * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    dxs[best_idx] += dys[(cc * ho + oy) * wo + ox];
                }
            }
        }
    });
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_affine(w: Vec<Vec<f64>>, b: Vec<f64>) -> Graph {
        let d_out = w.len();
        let d_in = w[0].len();
        let flat: Vec<f64> = w.into_iter().flatten().collect();
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::new(vec![d_out, d_in], flat).unwrap());
        params.insert("b".to_string(), Tensor::new(vec![d_out], b).unwrap());
        Graph::new(
            vec![d_in],
            vec![Node::Dense { weight: "w".into(), bias: "b".into() }],
            params,
        )
        .unwrap()
    }

    /// Identity graph: flatten over an already flat input.
    #[test]
    fn forward_identity() {
        let g = Graph::new(vec![3], vec![Node::Flatten], BTreeMap::new()).unwrap();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.forward(&x).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn forward_single_affine() {
        let g = single_affine(vec![vec![1.0, 2.0]], vec![0.0]);
        let x = Tensor::from_vec(vec![1.0, 1.0]).unwrap();
        assert_eq!(g.forward(&x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let g = single_affine(vec![vec![0.3, -1.7], vec![2.2, 0.9]], vec![0.1, -0.4]);
        let x = Tensor::from_vec(vec![0.7, -0.2]).unwrap();
        let a = g.forward(&x).unwrap();
        let b = g.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let g = single_affine(vec![vec![1.0, 2.0]], vec![0.0]);
        let x = Tensor::from_vec(vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(g.forward(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn input_gradient_of_affine_is_weight_row() {
        let g = single_affine(vec![vec![1.0, 2.0]], vec![5.0]);
        let x = Tensor::from_vec(vec![-0.3, 0.9]).unwrap();
        let dx = g.input_gradient(&x, 0).unwrap();
        assert_eq!(dx.data(), &[1.0, 2.0]);
        assert!(matches!(
            g.input_gradient(&x, 1),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn relu_subgradient_zero_at_negative() {
        // relu then sum: gradient is the 0/1 mask.
        let g = Graph::new(vec![2], vec![Node::Relu, Node::SumReduce], BTreeMap::new()).unwrap();
        let x = Tensor::from_vec(vec![-1.0, 2.0]).unwrap();
        let dx = g.input_gradient(&x, 0).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let s = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let s = softmax(&Tensor::from_vec(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::from_vec(vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_hand_arithmetic() {
        // Two classes, z = [w.x, 0], one sample with label 0.
        let g = single_affine(vec![vec![1.0, -1.0], vec![0.0, 0.0]], vec![0.0, 0.0]);
        let x = Tensor::new(vec![1, 2], vec![0.4, 0.1]).unwrap();
        let (loss, _) = g.loss_gradients(&x, &[0], Loss::CrossEntropy).unwrap();
        let z0 = 0.3;
        let expect = -(z0_softmax(z0).ln());
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    fn z0_softmax(z0: f64) -> f64 {
        z0.exp() / (z0.exp() + 1.0)
    }

    #[test]
    fn degenerate_one_class_softmax_has_zero_loss() {
        let g = single_affine(vec![vec![0.7, -0.1]], vec![0.2]);
        let x = Tensor::new(vec![1, 2], vec![0.4, 0.1]).unwrap();
        let (loss, grads) = g.loss_gradients(&x, &[0], Loss::CrossEntropy).unwrap();
        assert!(loss.abs() < 1e-15);
        for g in grads.values() {
            assert!(g.data().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let g = single_affine(vec![vec![1.0], vec![2.0]], vec![0.0, 0.0]);
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        assert!(g.loss_gradients(&x, &[2], Loss::CrossEntropy).is_err());
    }

    #[test]
    fn batched_input_gradient_rows_match_single_calls() {
        let g = single_affine(vec![vec![1.0, 2.0], vec![-0.5, 0.25]], vec![0.0, 1.0]);
        let xs = Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.9, -0.9]).unwrap();
        let batch = g.input_gradient_batch(&xs, &[0, 1, 0]).unwrap();
        for (i, t) in [0usize, 1, 0].iter().enumerate() {
            let single = g.input_gradient(&xs.row(i).unwrap(), *t).unwrap();
            assert_eq!(batch.row(i).unwrap().data(), single.data());
        }
    }
}
