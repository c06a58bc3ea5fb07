//! Primitive operations: forward evaluation, recording, and vector-Jacobian products.

use std::sync::Arc;

use super::kernels::{self as k, Conv2dGeometry, LayerNormStats};
use super::{Node, NodeId, Tape, Var};
use crate::ssm::{self, BDiscretization, ScanDims, ScanTrace};
use crate::tensor::{numel, Element, Result, Tensor, TensorError};

/// How the right operand of an elementwise binary op lines up with the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Right shape is a trailing suffix of the left; repeated over leading axes.
    Suffix,
    /// Right operand has one element.
    Scalar,
}

pub(crate) enum Op<T> {
    Leaf,
    Constant,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: T },
    Neg { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Softplus { x: NodeId },
    Silu { x: NodeId },
    Sigmoid { x: NodeId },
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, rows: usize, cols: usize },
    Reshape { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, stats: LayerNormStats<T> },
    Mean { x: NodeId, axis: usize },
    Sum { x: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: Conv2dGeometry, cols: Vec<T> },
    CausalConv1d { x: NodeId, w: NodeId, b: NodeId, len: usize, channels: usize, width: usize },
    Concat { xs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, end: usize },
    GatherRows { x: NodeId, index: Arc<[usize]> },
    SelectiveScan { inputs: [NodeId; 6], dims: ScanDims, policy: BDiscretization, trace: ScanTrace<T> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if numel(b) == 1 {
        Ok(Broadcast::Scalar)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Broadcast::Suffix)
    } else {
        Err(mismatch(op, a, b))
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// Records `value`. The op is kept only if some input needs a gradient.
    fn record(&self, value: Tensor<T>, inputs: &[NodeId], op: impl FnOnce() -> Op<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op() } else { Op::Constant };
        self.push(value, op, requires_grad)
    }

    fn same_tape(&self, vars: &[Var<'_, T>]) -> Result<()> {
        if vars.iter().all(|v| std::ptr::eq(v.tape, self)) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        self.same_tape(xs)?;
        let first = xs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?
            .value();
        check_axis("concat", first.shape(), axis)?;
        let values: Vec<Tensor<T>> = xs.iter().map(|v| v.value()).collect();
        for v in &values[1..] {
            let (a, b) = (first.shape(), v.shape());
            let compatible = a.len() == b.len()
                && a.iter().zip(b).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", a, b));
            }
        }
        let (outer, _, inner) = k::axis_split(first.shape(), axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let ids: Vec<NodeId> = xs.iter().map(|v| v.id).collect();
        Ok(self.record(Tensor::from_parts(shape, out), &ids.clone(), || Op::Concat {
            xs: ids,
            axis,
        }))
    }

    /// Selective scan over `u[L×D]` with step sizes `delta[L×D]`, state matrix
    /// `a[D×N]`, per-step `b`, `c` (`[L×N]`) and skip `d_skip[D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan<'t>(
        &'t self,
        u: Var<'t, T>,
        delta: Var<'t, T>,
        a: Var<'t, T>,
        b: Var<'t, T>,
        c: Var<'t, T>,
        d_skip: Var<'t, T>,
        policy: BDiscretization,
    ) -> Result<Var<'t, T>> {
        let vars = [u, delta, a, b, c, d_skip];
        self.same_tape(&vars)?;
        let vals: Vec<Tensor<T>> = vars.iter().map(|v| v.value()).collect();
        let dims = ssm::scan_dims(
            vals[0].shape(),
            vals[1].shape(),
            vals[2].shape(),
            vals[3].shape(),
            vals[4].shape(),
            vals[5].shape(),
        )?;
        ssm::check_positive_steps(vals[1].data())?;
        let ids = vars.map(|v| v.id);
        let keep = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let (y, trace) = ssm::scan_forward(
            vals[0].data(),
            vals[1].data(),
            vals[2].data(),
            vals[3].data(),
            vals[4].data(),
            vals[5].data(),
            dims,
            policy,
            keep,
        );
        let out = Tensor::from_parts(vec![dims.len, dims.channels], y);
        Ok(self.record(out, &ids, move || Op::SelectiveScan {
            inputs: ids,
            dims,
            policy,
            trace: trace.expect("trace kept when a gradient is required"),
        }))
    }
}

impl<'t, T: Element> Var<'t, T> {
    fn check_same(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(NodeId, NodeId) -> Op<T>,
    ) -> Result<Self> {
        self.check_same(&other)?;
        let a = self.value();
        let b = other.value();
        broadcast_kind(name, a.shape(), b.shape())?;
        let bn = b.numel();
        let bd = b.data();
        let out: Vec<T> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bn]))
            .collect();
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(
            Tensor::from_parts(a.shape().to_vec(), out),
            &[ia, ib],
            || op(ia, ib),
        ))
    }

    /// Elementwise sum; `other` may broadcast over leading axes or be a scalar.
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    fn unary(self, f: impl Fn(T) -> T, op: impl FnOnce(NodeId) -> Op<T>) -> Self {
        let x = self.value();
        let id = self.id;
        self.tape.record(x.map(f), &[id], || op(id))
    }

    pub fn scale(self, factor: f64) -> Self {
        let factor = T::of(factor);
        self.unary(|v| v * factor, |x| Op::Scale { x, factor })
    }

    pub fn neg(self) -> Self {
        self.unary(|v| -v, |x| Op::Neg { x })
    }

    pub fn exp(self) -> Self {
        self.unary(|v| v.exp(), |x| Op::Exp { x })
    }

    pub fn ln(self) -> Self {
        self.unary(|v| v.ln(), |x| Op::Log { x })
    }

    pub fn softplus(self) -> Self {
        self.unary(k::softplus, |x| Op::Softplus { x })
    }

    pub fn silu(self) -> Self {
        self.unary(k::silu, |x| Op::Silu { x })
    }

    pub fn sigmoid(self) -> Self {
        self.unary(k::sigmoid, |x| Op::Sigmoid { x })
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        self.check_same(&other)?;
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let out = k::matmul(a.data(), b.data(), m, kk, n);
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(Tensor::from_parts(vec![m, n], out), &[ia, ib], || {
            Op::Matmul {
                a: ia,
                b: ib,
                m,
                k: kk,
                n,
            }
        }))
    }

    pub fn transpose(self) -> Result<Self> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(TensorError::invalid(
                "transpose",
                format!("expected a matrix, got shape {:?}", x.shape()),
            ));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let id = self.id;
        Ok(self.tape.record(
            Tensor::from_parts(vec![cols, rows], k::transpose(x.data(), rows, cols)),
            &[id],
            || Op::Transpose { x: id, rows, cols },
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        let id = self.id;
        Ok(self.tape.record(out, &[id], || Op::Reshape { x: id }))
    }

    pub fn softmax(self, axis: usize) -> Result<Self> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (o, e, i) = k::axis_split(x.shape(), axis);
        let id = self.id;
        Ok(self.tape.record(
            Tensor::from_parts(x.shape().to_vec(), k::softmax(x.data(), o, e, i)),
            &[id],
            || Op::Softmax { x: id, axis },
        ))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta` (each `[cols]`).
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Self> {
        self.check_same(&gamma)?;
        self.check_same(&beta)?;
        let x = self.value();
        let cols = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        let (g, b) = (gamma.value(), beta.value());
        if g.shape() != [cols] {
            return Err(mismatch("layer_norm", x.shape(), g.shape()));
        }
        if b.shape() != [cols] {
            return Err(mismatch("layer_norm", x.shape(), b.shape()));
        }
        let (y, stats) = k::layer_norm(x.data(), g.data(), b.data(), cols, T::of(eps));
        let ids = [self.id, gamma.id, beta.id];
        Ok(self.tape.record(Tensor::from_parts(x.shape().to_vec(), y), &ids, || {
            Op::LayerNorm {
                x: ids[0],
                gamma: ids[1],
                beta: ids[2],
                stats,
            }
        }))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(self, axis: usize) -> Result<Self> {
        let x = self.value();
        check_axis("mean", x.shape(), axis)?;
        let (o, e, i) = k::axis_split(x.shape(), axis);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let id = self.id;
        Ok(self.tape.record(
            Tensor::from_parts(shape, k::mean_axis(x.data(), o, e, i)),
            &[id],
            || Op::Mean { x: id, axis },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Self {
        let x = self.value();
        let mut total = T::zero();
        for &v in x.data() {
            total = total + v;
        }
        let id = self.id;
        self.tape
            .record(Tensor::scalar(total), &[id], || Op::Sum { x: id })
    }

    /// Valid-mode strided convolution of an `H×W×C` input with weights
    /// `[k, k, C, D]` and bias `[D]`, giving `[H', W', D]`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>, stride: usize) -> Result<Self> {
        self.check_same(&weight)?;
        self.check_same(&bias)?;
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[2] {
            return Err(mismatch("conv2d", sx, sw));
        }
        let geom = Conv2dGeometry {
            height: sx[0],
            width: sx[1],
            channels: sx[2],
            kernel: sw[0],
            stride,
        };
        if stride == 0 || geom.kernel > geom.height || geom.kernel > geom.width {
            return Err(TensorError::invalid(
                "conv2d",
                format!(
                    "kernel {} with stride {stride} does not fit a {}×{} input",
                    geom.kernel, geom.height, geom.width
                ),
            ));
        }
        let out_ch = sw[3];
        if b.shape() != [out_ch] {
            return Err(mismatch("conv2d", sw, b.shape()));
        }
        let cols = k::im2col(x.data(), &geom);
        let mut y = k::matmul(&cols, w.data(), geom.positions(), geom.patch_len(), out_ch);
        for row in y.chunks_mut(out_ch) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v = *v + bb;
            }
        }
        let shape = vec![geom.out_height(), geom.out_width(), out_ch];
        let ids = [self.id, weight.id, bias.id];
        Ok(self.tape.record(Tensor::from_parts(shape, y), &ids, || Op::Conv2d {
            x: ids[0],
            w: ids[1],
            b: ids[2],
            geom,
            cols,
        }))
    }

    /// Depthwise causal convolution of `[L×C]` with weights `[C×width]` and bias `[C]`.
    pub fn causal_conv1d(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Self> {
        self.check_same(&weight)?;
        self.check_same(&bias)?;
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 2 || sw.len() != 2 || sw[0] != sx[1] {
            return Err(mismatch("causal_conv1d", sx, sw));
        }
        if b.shape() != [sx[1]] {
            return Err(mismatch("causal_conv1d", sx, b.shape()));
        }
        let (len, channels, width) = (sx[0], sx[1], sw[1]);
        let y = k::causal_conv1d(x.data(), w.data(), b.data(), len, channels, width);
        let ids = [self.id, weight.id, bias.id];
        Ok(self.tape.record(Tensor::from_parts(sx.to_vec(), y), &ids, || {
            Op::CausalConv1d {
                x: ids[0],
                w: ids[1],
                b: ids[2],
                len,
                channels,
                width,
            }
        }))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let x = self.value();
        check_axis("slice", x.shape(), axis)?;
        if start >= end || end > x.shape()[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} invalid for axis {axis} of {:?}", x.shape()),
            ));
        }
        let (outer, extent, inner) = k::axis_split(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = end - start;
        let id = self.id;
        Ok(self.tape.record(Tensor::from_parts(shape, out), &[id], || Op::Slice {
            x: id,
            axis,
            start,
            end,
        }))
    }

    /// Output row `i` is input row `index[i]` (rows are the leading axis).
    pub fn gather_rows(self, index: &[usize]) -> Result<Self> {
        let x = self.value();
        let rows = *x
            .shape()
            .first()
            .ok_or_else(|| TensorError::invalid("gather_rows", "scalar input"))?;
        if index.is_empty() {
            return Err(TensorError::invalid("gather_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let width = x.numel() / rows;
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in index {
            out.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        let id = self.id;
        let index: Arc<[usize]> = index.into();
        Ok(self.tape.record(Tensor::from_parts(shape, out), &[id], || Op::GatherRows {
            x: id,
            index,
        }))
    }

    /// Mean softmax cross-entropy of `[B×C]` logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("logits {s:?} do not match {} labels", labels.len()),
            ));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let probs = k::softmax(x.data(), batch, classes, 1);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x.data()[r * classes..(r + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for &v in row {
                z = z + (v - max).exp();
            }
            total = total + (z.ln() + max - row[label]);
        }
        let loss = total / T::of(batch as f64);
        let id = self.id;
        let labels = labels.to_vec();
        Ok(self.tape.record(Tensor::scalar(loss), &[id], || Op::CrossEntropy {
            logits: id,
            labels,
            probs,
        }))
    }
}

fn accumulate<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: NodeId,
    contribution: Vec<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Gradient of a broadcast right operand: reduces `g` (shaped like the left) onto `bn` elements.
fn reduce_broadcast<T: Element>(g: impl Iterator<Item = T>, bn: usize) -> Vec<T> {
    let mut out = vec![T::zero(); bn];
    for (i, v) in g.enumerate() {
        out[i % bn] = out[i % bn] + v;
    }
    out
}

pub(crate) fn backward_node<T: Element>(
    nodes: &[Node<T>],
    id: NodeId,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |i: NodeId| &nodes[i].value;
    let needs = |i: NodeId| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, g.to_vec());
            if needs(*b) {
                let bn = val(*b).numel();
                accumulate(nodes, grads, *b, reduce_broadcast(g.iter().copied(), bn));
            }
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, g.to_vec());
            if needs(*b) {
                let bn = val(*b).numel();
                accumulate(nodes, grads, *b, reduce_broadcast(g.iter().map(|&v| -v), bn));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let bn = bv.len();
            if needs(*a) {
                let ga = g.iter().enumerate().map(|(i, &gi)| gi * bv[i % bn]).collect();
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let gb = reduce_broadcast(g.iter().zip(av).map(|(&gi, &x)| gi * x), bn);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, grads, *x, g.iter().map(|&v| v * *factor).collect());
        }
        Op::Neg { x } => {
            accumulate(nodes, grads, *x, g.iter().map(|&v| -v).collect());
        }
        Op::Exp { x } => {
            let y = nodes[id].value.data();
            accumulate(nodes, grads, *x, g.iter().zip(y).map(|(&a, &b)| a * b).collect());
        }
        Op::Log { x } => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, g.iter().zip(xv).map(|(&a, &b)| a / b).collect());
        }
        Op::Softplus { x } => {
            let xv = val(*x).data();
            let gx = g.iter().zip(xv).map(|(&a, &b)| a * k::sigmoid(b)).collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Silu { x } => {
            let xv = val(*x).data();
            let gx = g.iter().zip(xv).map(|(&a, &b)| a * k::silu_grad(b)).collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sigmoid { x } => {
            let y = nodes[id].value.data();
            let gx = g
                .iter()
                .zip(y)
                .map(|(&a, &s)| a * s * (T::one() - s))
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Matmul { a, b, m, k: kk, n } => {
            if needs(*a) {
                let ga = k::matmul_bt(g, val(*b).data(), *m, *kk, *n);
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let gb = k::matmul_at(val(*a).data(), g, *m, *kk, *n);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Transpose { x, rows, cols } => {
            accumulate(nodes, grads, *x, k::transpose(g, *cols, *rows));
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Softmax { x, axis } => {
            let y = &nodes[id].value;
            let (o, e, i) = k::axis_split(y.shape(), *axis);
            accumulate(nodes, grads, *x, k::softmax_backward(y.data(), g, o, e, i));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            stats,
        } => {
            let cols = val(*gamma).numel();
            let (gx, gg, gb) = k::layer_norm_backward(g, val(*gamma).data(), stats, cols);
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *gamma, gg);
            accumulate(nodes, grads, *beta, gb);
        }
        Op::Mean { x, axis } => {
            let shape = val(*x).shape();
            let (outer, extent, inner) = k::axis_split(shape, *axis);
            let scale = T::one() / T::of(extent as f64);
            let mut gx = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                for j in 0..extent {
                    for i in 0..inner {
                        gx[o * extent * inner + j * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sum { x } => {
            accumulate(nodes, grads, *x, vec![g[0]; val(*x).numel()]);
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols,
        } => {
            let (p, kl) = (geom.positions(), geom.patch_len());
            let out_ch = val(*b).numel();
            if needs(*x) {
                let gcols = k::matmul_bt(g, val(*w).data(), p, kl, out_ch);
                accumulate(nodes, grads, *x, k::col2im(&gcols, geom));
            }
            if needs(*w) {
                accumulate(nodes, grads, *w, k::matmul_at(cols, g, p, kl, out_ch));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, reduce_broadcast(g.iter().copied(), out_ch));
            }
        }
        Op::CausalConv1d {
            x,
            w,
            b,
            len,
            channels,
            width,
        } => {
            let (gx, gw, gb) = k::causal_conv1d_backward(
                val(*x).data(),
                val(*w).data(),
                g,
                *len,
                *channels,
                *width,
            );
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *w, gw);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Concat { xs, axis } => {
            let out_shape = nodes[id].value.shape();
            let (outer, total, inner) = k::axis_split(out_shape, *axis);
            let mut offset = 0;
            for &xi in xs {
                let extent = val(xi).shape()[*axis];
                if needs(xi) {
                    let mut gx = Vec::with_capacity(outer * extent * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        gx.extend_from_slice(&g[base..base + extent * inner]);
                    }
                    accumulate(nodes, grads, xi, gx);
                }
                offset += extent;
            }
        }
        Op::Slice {
            x,
            axis,
            start,
            end,
        } => {
            let shape = val(*x).shape();
            let (outer, extent, inner) = k::axis_split(shape, *axis);
            let width = (end - start) * inner;
            let mut gx = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                let dst = o * extent * inner + start * inner;
                gx[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::GatherRows { x, index } => {
            let xv = val(*x);
            let width = xv.numel() / xv.shape()[0];
            let mut gx = vec![T::zero(); xv.numel()];
            for (i, &r) in index.iter().enumerate() {
                for c in 0..width {
                    gx[r * width + c] = gx[r * width + c] + g[i * width + c];
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::SelectiveScan {
            inputs,
            dims,
            policy,
            trace,
        } => {
            let [u, delta, a, b, c, d] = *inputs;
            let sg = ssm::scan_backward(
                val(u).data(),
                val(delta).data(),
                val(a).data(),
                val(b).data(),
                val(c).data(),
                val(d).data(),
                *dims,
                *policy,
                trace,
                g,
            );
            accumulate(nodes, grads, u, sg.u);
            accumulate(nodes, grads, delta, sg.delta);
            accumulate(nodes, grads, a, sg.a);
            accumulate(nodes, grads, b, sg.b);
            accumulate(nodes, grads, c, sg.c);
            accumulate(nodes, grads, d, sg.d_skip);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let batch = labels.len();
            let classes = probs.len() / batch;
            let scale = g[0] / T::of(batch as f64);
            let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                gx[r * classes + l] = gx[r * classes + l] - scale;
            }
            accumulate(nodes, grads, *logits, gx);
        }
    }
}
