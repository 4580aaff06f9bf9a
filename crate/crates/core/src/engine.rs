//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] owns every tensor produced during one forward pass and records
//! the operations in execution order. [`Graph::backward`] walks that record in
//! reverse and accumulates gradients into the tensors that require them. The
//! graph is meant to be discarded after each backward pass.
//!
//! Kernels are direct loops. Zero weights are skipped in the forward and
//! input-gradient passes, so heavily pruned layers run proportionally faster.
//! A tensor may carry a gradient mask; masked entries never receive gradient.

use std::sync::Arc;

use crate::activations::{OperatorConstants, ParametricActivation, UnaryOperatorId};
use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    grad_mask: Option<Arc<[bool]>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            grad_mask: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
            grad_mask: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
            grad_mask: None,
        }
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Restricts gradients to entries where `mask` is true.
    pub fn with_grad_mask(mut self, mask: Arc<[bool]>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient mask of length {} for tensor of {} values",
                mask.len(),
                self.data.len()
            )));
        }
        self.grad_mask = Some(mask);
        Ok(self)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mask(&self) -> Option<&[bool]> {
        self.grad_mask.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }
}

/// Handle to a tensor owned by a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Dense {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: TensorId,
        argmax: Vec<usize>,
    },
    Reshape {
        input: TensorId,
    },
    Activation {
        input: TensorId,
        alpha: TensorId,
        beta: TensorId,
        /// f(beta * x) and f'(beta * x), elementwise.
        fval: Vec<f64>,
        fprime: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Square(TensorId),
    Sum(TensorId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    output: TensorId,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    tensors: Vec<Tensor>,
    nodes: Vec<Node>,
    consts: OperatorConstants,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_constants(consts: OperatorConstants) -> Self {
        Graph {
            consts,
            ..Graph::default()
        }
    }

    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.tensors.push(tensor);
        TensorId(self.tensors.len() - 1)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn take(&mut self, id: TensorId) -> Tensor {
        std::mem::replace(&mut self.tensors[id.0], Tensor::zeros(vec![0]))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn rg(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorId {
        let output = self.leaf(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            grad_mask: None,
        });
        self.nodes.push(Node { op, output });
        output
    }

    /// `out[b, o] = sum_i input[b, i] * weight[i, o] + bias[o]`.
    pub fn dense(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::Dimension(format!(
                "dense expects input [batch, in], weight [in, out], bias [out]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        if xs[1] != ws[0] {
            return Err(Error::Dimension(format!(
                "dense input axis 1 ({}) does not match weight axis 0 ({})",
                xs[1], ws[0]
            )));
        }
        if ws[1] != bs[0] {
            return Err(Error::Dimension(format!(
                "dense weight axis 1 ({}) does not match bias axis 0 ({})",
                ws[1], bs[0]
            )));
        }
        let (batch, n_in, n_out) = (xs[0], ws[0], ws[1]);
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let mut out = vec![0.0; batch * n_out];
        let sparse = SparseRows::build_if_sparse(w, n_in, n_out);
        for (bi, row) in out.chunks_exact_mut(n_out).enumerate() {
            row.copy_from_slice(b);
            let xr = &x[bi * n_in..(bi + 1) * n_in];
            match &sparse {
                Some(sp) => {
                    for (i, &xv) in xr.iter().enumerate() {
                        if xv != 0.0 {
                            for &(o, wv) in sp.row(i) {
                                row[o] += xv * wv;
                            }
                        }
                    }
                }
                None => {
                    for (i, &xv) in xr.iter().enumerate() {
                        if xv != 0.0 {
                            axpy(xv, &w[i * n_out..(i + 1) * n_out], row);
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            vec![batch, n_out],
            out,
            rg,
        ))
    }

    /// Cross-correlation with zero padding.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let geo = ConvGeometry::new(
            self.shape(input),
            self.shape(kernel),
            self.shape(bias),
            stride,
            padding,
        )?;
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let mut out = vec![0.0; geo.batch * geo.c_out * geo.oh * geo.ow];
        let plane_out = geo.oh * geo.ow;
        let plane_in = geo.h * geo.w;
        for bi in 0..geo.batch {
            for co in 0..geo.c_out {
                let o_off = (bi * geo.c_out + co) * plane_out;
                let oplane = &mut out[o_off..o_off + plane_out];
                oplane.fill(b[co]);
                for ci in 0..geo.c_in {
                    let i_off = (bi * geo.c_in + ci) * plane_in;
                    let iplane = &x[i_off..i_off + plane_in];
                    for ki in 0..geo.kh {
                        for kj in 0..geo.kw {
                            let wv = k[geo.kernel_index(co, ci, ki, kj)];
                            if wv == 0.0 {
                                continue;
                            }
                            geo.for_each_row(ki, kj, |orow, irow, len| {
                                let dst = &mut oplane[orow..orow + len];
                                if geo.stride == 1 {
                                    axpy(wv, &iplane[irow..irow + len], dst);
                                } else {
                                    for (j, d) in dst.iter_mut().enumerate() {
                                        *d += wv * iplane[irow + j * geo.stride];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            vec![geo.batch, geo.c_out, geo.oh, geo.ow],
            out,
            rg,
        ))
    }

    /// Non-overlapping max pooling with a square window of `size`.
    pub fn max_pool2d(&mut self, input: TensorId, size: usize) -> Result<TensorId> {
        let s = self.shape(input);
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::Dimension(format!(
                "max_pool2d window {size} does not fit input of shape {s:?}"
            )));
        }
        let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let x = self.value(input);
        let mut out = Vec::with_capacity(batch * ch * oh * ow);
        let mut argmax = Vec::with_capacity(batch * ch * oh * ow);
        for plane in 0..batch * ch {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * size * w + j * size;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (i * size + di) * w + j * size + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Op::MaxPool2d { input, argmax },
            vec![batch, ch, oh, ow],
            out,
            rg,
        ))
    }

    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.tensors[input.0].numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(input)
            )));
        }
        let data = self.value(input).to_vec();
        let rg = self.rg(input);
        Ok(self.push(Op::Reshape { input }, shape, data, rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.shape(input);
        let batch = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(input, vec![batch, rest])
    }

    /// `alpha * f(beta * x)` elementwise; `alpha` and `beta` are single-element tensors.
    pub fn activation(
        &mut self,
        input: TensorId,
        op: UnaryOperatorId,
        alpha: TensorId,
        beta: TensorId,
    ) -> Result<TensorId> {
        let a = self.tensors[alpha.0].item()?;
        let bt = self.tensors[beta.0].item()?;
        let consts = self.consts;
        let x = self.value(input);
        let mut fval = Vec::with_capacity(x.len());
        let mut fprime = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for &xv in x {
            let (f, df) = consts.value_and_derivative(op, bt * xv);
            out.push(a * f);
            fval.push(f);
            fprime.push(df);
        }
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input) || self.rg(alpha) || self.rg(beta);
        Ok(self.push(
            Op::Activation {
                input,
                alpha,
                beta,
                fval,
                fprime,
            },
            shape,
            out,
            rg,
        ))
    }

    /// Convenience: pushes `act`'s scales as leaves (differentiable when
    /// `act.trainable`) and applies it. Returns `(output, alpha, beta)`.
    pub fn parametric_activation(
        &mut self,
        input: TensorId,
        act: &ParametricActivation,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let mut alpha = Tensor::scalar(act.alpha);
        let mut beta = Tensor::scalar(act.beta);
        if act.trainable {
            alpha = alpha.with_grad();
            beta = beta.with_grad();
        }
        let alpha = self.leaf(alpha);
        let beta = self.leaf(beta);
        let out = self.activation(input, act.op, alpha, beta)?;
        Ok((out, alpha, beta))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "logits {s:?} do not match {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {bad} outside {classes} classes")));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &z[bi * classes..(bi + 1) * classes];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            loss += lse - row[label];
            for (p, v) in probs[bi * classes..(bi + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        loss /= batch as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), shape, data, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), shape, data, rg))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.value(a).iter().map(|x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), shape, data, rg)
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).iter().map(|x| x * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Square(a), shape, data, rg)
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![1], vec![total], rg)
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what} operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Populates `grad` of every tensor that requires it with d(loss)/d(tensor).
    /// Gradients accumulate into any existing buffers.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        if self.tensors[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        // Gradients of intermediate tensors live here; leaves receive theirs at the end.
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.tensors.len()];
        grads[loss.0] = Some(vec![1.0]);
        for node in self.nodes.iter().rev() {
            let Some(gout) = grads[node.output.0].take() else {
                continue;
            };
            self.node_backward(node, &gout, &mut grads);
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            let Some(mut g) = g else { continue };
            if !t.requires_grad {
                continue;
            }
            if let Some(mask) = &t.grad_mask {
                for (v, &keep) in g.iter_mut().zip(mask.iter()) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
            match &mut t.grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Dense {
                input,
                weight,
                bias,
            } => self.dense_backward(*input, *weight, *bias, gout, grads),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => self.conv_backward(*input, *kernel, *bias, *stride, *padding, gout, grads),
            Op::MaxPool2d { input, argmax } => {
                if self.rg(*input) {
                    let g = grad_buf(grads, *input, self.tensors[input.0].numel());
                    for (&idx, &go) in argmax.iter().zip(gout) {
                        g[idx] += go;
                    }
                }
            }
            Op::Reshape { input } => {
                if self.rg(*input) {
                    let g = grad_buf(grads, *input, gout.len());
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
                }
            }
            Op::Activation {
                input,
                alpha,
                beta,
                fval,
                fprime,
            } => {
                let a = self.value(*alpha)[0];
                let bt = self.value(*beta)[0];
                if self.rg(*input) {
                    let g = grad_buf(grads, *input, gout.len());
                    let ab = a * bt;
                    for ((gi, go), df) in g.iter_mut().zip(gout).zip(fprime) {
                        *gi += go * ab * df;
                    }
                }
                if self.rg(*alpha) {
                    let s: f64 = gout.iter().zip(fval).map(|(go, f)| go * f).sum();
                    grad_buf(grads, *alpha, 1)[0] += s;
                }
                if self.rg(*beta) {
                    let x = self.value(*input);
                    let s: f64 = gout
                        .iter()
                        .zip(x)
                        .zip(fprime)
                        .map(|((go, xv), df)| go * xv * df)
                        .sum();
                    grad_buf(grads, *beta, 1)[0] += a * s;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.rg(*logits) {
                    let classes = probs.len() / labels.len();
                    let scale = gout[0] / labels.len() as f64;
                    let g = grad_buf(grads, *logits, probs.len());
                    for (bi, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let idx = bi * classes + c;
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            g[idx] += scale * (probs[idx] - onehot);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.rg(id) {
                        let g = grad_buf(grads, id, gout.len());
                        g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (id, other) in [(*a, *b), (*b, *a)] {
                    if self.rg(id) {
                        let ov = self.value(other).to_vec();
                        let g = grad_buf(grads, id, gout.len());
                        for ((x, y), o) in g.iter_mut().zip(gout).zip(&ov) {
                            *x += y * o;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let g = grad_buf(grads, *a, gout.len());
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Square(a) => {
                if self.rg(*a) {
                    let v = self.value(*a).to_vec();
                    let g = grad_buf(grads, *a, gout.len());
                    for ((x, y), vv) in g.iter_mut().zip(gout).zip(&v) {
                        *x += 2.0 * vv * y;
                    }
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let n = self.tensors[a.0].numel();
                    let g = grad_buf(grads, *a, n);
                    g.iter_mut().for_each(|x| *x += gout[0]);
                }
            }
        }
    }

    fn dense_backward(
        &self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ws = self.shape(weight);
        let (n_in, n_out) = (ws[0], ws[1]);
        let batch = gout.len() / n_out;
        let x = self.value(input);
        let w = self.value(weight);
        if self.rg(input) {
            let sparse = SparseRows::build_if_sparse(w, n_in, n_out);
            let g = grad_buf(grads, input, batch * n_in);
            for bi in 0..batch {
                let go = &gout[bi * n_out..(bi + 1) * n_out];
                let gi = &mut g[bi * n_in..(bi + 1) * n_in];
                match &sparse {
                    Some(sp) => {
                        for (i, gv) in gi.iter_mut().enumerate() {
                            *gv += sp.row(i).iter().map(|&(o, wv)| go[o] * wv).sum::<f64>();
                        }
                    }
                    None => {
                        for (i, gv) in gi.iter_mut().enumerate() {
                            *gv += dot(go, &w[i * n_out..(i + 1) * n_out]);
                        }
                    }
                }
            }
        }
        if self.rg(weight) {
            let mask = self.tensors[weight.0].grad_mask.as_deref();
            let allowed = mask.map(|m| m.iter().filter(|&&k| k).count());
            let g = grad_buf(grads, weight, n_in * n_out);
            match (mask, allowed) {
                (Some(mask), Some(count)) if count * 4 < mask.len() => {
                    for (idx, _) in mask.iter().enumerate().filter(|(_, &k)| k) {
                        let (i, o) = (idx / n_out, idx % n_out);
                        let mut s = 0.0;
                        for bi in 0..batch {
                            s += x[bi * n_in + i] * gout[bi * n_out + o];
                        }
                        g[idx] += s;
                    }
                }
                _ => {
                    for bi in 0..batch {
                        let go = &gout[bi * n_out..(bi + 1) * n_out];
                        for i in 0..n_in {
                            let xv = x[bi * n_in + i];
                            if xv != 0.0 {
                                axpy(xv, go, &mut g[i * n_out..(i + 1) * n_out]);
                            }
                        }
                    }
                }
            }
        }
        if self.rg(bias) {
            let g = grad_buf(grads, bias, n_out);
            for go in gout.chunks_exact(n_out) {
                g.iter_mut().zip(go).for_each(|(a, b)| *a += b);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let geo = ConvGeometry::new(
            self.shape(input),
            self.shape(kernel),
            self.shape(bias),
            stride,
            padding,
        )
        .expect("geometry validated in forward");
        let x = self.value(input);
        let k = self.value(kernel);
        let plane_out = geo.oh * geo.ow;
        let plane_in = geo.h * geo.w;
        if self.rg(input) {
            let g = grad_buf(grads, input, x.len());
            for bi in 0..geo.batch {
                for co in 0..geo.c_out {
                    let o_off = (bi * geo.c_out + co) * plane_out;
                    let gplane = &gout[o_off..o_off + plane_out];
                    for ci in 0..geo.c_in {
                        let i_off = (bi * geo.c_in + ci) * plane_in;
                        let giplane = &mut g[i_off..i_off + plane_in];
                        for ki in 0..geo.kh {
                            for kj in 0..geo.kw {
                                let wv = k[geo.kernel_index(co, ci, ki, kj)];
                                if wv == 0.0 {
                                    continue;
                                }
                                geo.for_each_row(ki, kj, |orow, irow, len| {
                                    let src = &gplane[orow..orow + len];
                                    if geo.stride == 1 {
                                        axpy(wv, src, &mut giplane[irow..irow + len]);
                                    } else {
                                        for (j, s) in src.iter().enumerate() {
                                            giplane[irow + j * geo.stride] += wv * s;
                                        }
                                    }
                                });
                            }
                        }
                    }
                }
            }
        }
        if self.rg(kernel) {
            let mask = self.tensors[kernel.0].grad_mask.clone();
            let g = grad_buf(grads, kernel, k.len());
            for co in 0..geo.c_out {
                for ci in 0..geo.c_in {
                    for ki in 0..geo.kh {
                        for kj in 0..geo.kw {
                            let widx = geo.kernel_index(co, ci, ki, kj);
                            if mask.as_ref().is_some_and(|m| !m[widx]) {
                                continue;
                            }
                            let mut s = 0.0;
                            for bi in 0..geo.batch {
                                let o_off = (bi * geo.c_out + co) * plane_out;
                                let i_off = (bi * geo.c_in + ci) * plane_in;
                                let gplane = &gout[o_off..o_off + plane_out];
                                let iplane = &x[i_off..i_off + plane_in];
                                geo.for_each_row(ki, kj, |orow, irow, len| {
                                    if geo.stride == 1 {
                                        s += dot(&gplane[orow..orow + len], &iplane[irow..irow + len]);
                                    } else {
                                        for j in 0..len {
                                            s += gplane[orow + j] * iplane[irow + j * geo.stride];
                                        }
                                    }
                                });
                            }
                            g[widx] += s;
                        }
                    }
                }
            }
        }
        if self.rg(bias) {
            let g = grad_buf(grads, bias, geo.c_out);
            for bi in 0..geo.batch {
                for (co, gb) in g.iter_mut().enumerate() {
                    let o_off = (bi * geo.c_out + co) * plane_out;
                    *gb += gout[o_off..o_off + plane_out].iter().sum::<f64>();
                }
            }
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], id: TensorId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-compressed nonzeros of an `[n_in, n_out]` weight, built only when
/// fewer than a quarter of the entries are nonzero.
struct SparseRows {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparseRows {
    fn build_if_sparse(w: &[f64], n_in: usize, n_out: usize) -> Option<Self> {
        let nnz = w.iter().filter(|v| **v != 0.0).count();
        if nnz * 4 >= w.len() {
            return None;
        }
        let mut offsets = Vec::with_capacity(n_in + 1);
        let mut entries = Vec::with_capacity(nnz);
        offsets.push(0);
        for row in w.chunks_exact(n_out) {
            entries.extend(row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(o, &v)| (o, v)));
            offsets.push(entries.len());
        }
        Some(SparseRows { offsets, entries })
    }

    fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ks: &[usize], bs: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::Dimension(format!(
                "conv2d expects input [b,c,h,w], kernel [o,c,kh,kw], bias [o]; got {xs:?}, {ks:?}, {bs:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if xs[1] != ks[1] {
            return Err(Error::Dimension(format!(
                "conv2d input channels (axis 1 = {}) do not match kernel axis 1 ({})",
                xs[1], ks[1]
            )));
        }
        if ks[0] != bs[0] {
            return Err(Error::Dimension(format!(
                "conv2d kernel axis 0 ({}) does not match bias axis 0 ({})",
                ks[0], bs[0]
            )));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ks[2], ks[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{} (axes 2, 3)",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            batch: xs[0],
            c_in: xs[1],
            h,
            w,
            c_out: ks[0],
            kh,
            kw,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    #[inline]
    fn kernel_index(&self, co: usize, ci: usize, ki: usize, kj: usize) -> usize {
        ((co * self.c_in + ci) * self.kh + ki) * self.kw + kj
    }

    /// Output positions `o` whose input coordinate `o*stride + k - padding`
    /// falls inside `[0, len)`.
    fn valid(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.padding > k {
            (self.padding - k).div_ceil(s)
        } else {
            0
        };
        let hi = ((in_len + self.padding).saturating_sub(k)).div_ceil(s).min(out_len);
        (lo, hi.max(lo))
    }

    /// Calls `f(out_offset, in_offset, run_length)` for each output row touched
    /// by kernel tap `(ki, kj)`, within one channel plane.
    #[inline]
    fn for_each_row(&self, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (r0, r1) = self.valid(ki, self.h, self.oh);
        let (c0, c1) = self.valid(kj, self.w, self.ow);
        if c1 <= c0 {
            return;
        }
        let len = c1 - c0;
        for r in r0..r1 {
            let ir = r * self.stride + ki - self.padding;
            let ic = c0 * self.stride + kj - self.padding;
            f(r * self.ow + c0, ir * self.w + ic, len);
        }
    }
}

/// Max over coordinates of `|analytic - central| / max(1, |central|)` for a
/// scalar-valued `function` at `point`.
pub fn grad_check<F>(function: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(point.shape().to_vec(), data)?);
        let out = function(&mut g, x)?;
        let v = g.tensor(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v} is not finite")));
        }
        Ok(v)
    };
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(point.shape().to_vec(), point.data().to_vec())?.with_grad());
    let out = function(&mut g, x)?;
    let v = g.tensor(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        plus[i] += step;
        let mut minus = point.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let x = t(vec![2, 3], vec![0.0; 6]);
        assert_eq!(x.numel(), 6);
        assert!(x.grad().is_none());
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2], vec![1.0, 2.0]));
        let w = g.leaf(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(t(vec![2], vec![0.0, 0.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);

        let x = g.leaf(t(vec![1, 2], vec![1.0, 1.0]));
        let w = g.leaf(t(vec![2, 1], vec![2.0, 3.0]));
        let b = g.leaf(t(vec![1], vec![1.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y), &[6.0]);
    }

    #[test]
    fn dense_shape_errors_name_axes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 3]));
        let w = g.leaf(Tensor::zeros(vec![2, 2]));
        let b = g.leaf(Tensor::zeros(vec![2]));
        let err = g.dense(x, w, b).unwrap_err().to_string();
        assert!(err.contains("axis 1") && err.contains("axis 0"), "{err}");
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 1, 3, 3], vec![1.0; 9]));
        let k = g.leaf(t(vec![1, 1, 3, 3], vec![1.0; 9]));
        let b = g.leaf(t(vec![1], vec![0.0]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[9.0]);
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(g.value(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 1, 3, 3]));
        let k = g.leaf(Tensor::zeros(vec![1, 1, 5, 5]));
        let b = g.leaf(Tensor::zeros(vec![1]));
        assert!(matches!(g.conv2d(x, k, b, 1, 0), Err(Error::Dimension(_))));
        assert!(g.conv2d(x, k, b, 1, 1).is_ok());
    }

    #[test]
    fn backward_square_and_fan_out() {
        let mut g = Graph::new();
        let w = g.leaf(t(vec![1], vec![3.0]).with_grad());
        let sq = g.square(w);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let w = g.leaf(t(vec![3], vec![1.0, -2.0, 0.5]).with_grad());
        let twice = g.add(w, w).unwrap();
        let loss = g.sum(twice);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let w = g.leaf(t(vec![2], vec![1.0, 2.0]).with_grad());
        g.backward(w).unwrap(); // empty graph: no-op
        assert!(g.grad(w).is_none());
        let sq = g.square(w);
        assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_get_grad_buffers() {
        let mut g = Graph::new();
        let c = g.leaf(t(vec![2], vec![1.0, 2.0]));
        let w = g.leaf(t(vec![2], vec![3.0, 4.0]).with_grad());
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn grad_mask_blocks_entries() {
        let mut g = Graph::new();
        let mask: Arc<[bool]> = Arc::from(vec![true, false]);
        let w = g.leaf(t(vec![2], vec![3.0, 4.0]).with_grad().with_grad_mask(mask).unwrap());
        let sq = g.square(w);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0, 0.0]);
    }

    #[test]
    fn grad_check_quadratic() {
        let err = grad_check(
            |g, x| {
                let s = g.square(x);
                Ok(g.sum(s))
            },
            &t(vec![1], vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let r = grad_check(|g, x| Ok(g.scale(x, f64::INFINITY)), &t(vec![1], vec![1.0]), 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn max_pool_picks_maxima() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, -1.0]).with_grad());
        let y = g.max_pool2d(x, 2).unwrap();
        assert_eq!(g.value(y), &[5.0, 7.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
