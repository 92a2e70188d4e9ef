//! Reverse-mode autodiff over dense tensors.
//!
//! A [`Graph`] records every operation on a flat tape. Parameters are leaf
//! nodes created before [`Graph::freeze`]; everything recorded afterwards is
//! transient and dropped by [`Graph::reset`] between training steps.
//! [`Graph::backward`] walks the tape in exact reverse recording order and
//! sums partials into nodes that are consumed more than once.

use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_shapes, broadcast_strides, contiguous_strides, Mask, Result, Tensor, TensorError,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const MASK_NEG: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<E: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Var, Var, usize),
    Expand(Var),
    SumAxis(Var, usize, bool),
    MeanAxis(Var, usize, bool),
    MaskedMax(Var, Rc<Mask>, usize, bool),
    MaskedSoftmax(Var, Rc<Mask>),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gather(Var, Rc<Vec<usize>>),
    MeanAll(Var),
    BceWithLogits(Var, Rc<Vec<E>>),
    CrossEntropy(Var, Rc<Vec<usize>>),
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
    watermark: usize,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            watermark: 0,
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        debug_assert!(
            value.is_all_finite(),
            "non-finite value produced by {:?}",
            op
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor. Gradients are retained for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Mark everything recorded so far as persistent (model parameters).
    pub fn freeze(&mut self) {
        self.watermark = self.nodes.len();
    }

    /// Drop all transient nodes recorded since `freeze`.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.watermark);
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn value_mut(&mut self, v: Var) -> &mut Tensor<E> {
        &mut self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Overwrite the stored gradient of a leaf.
    pub fn set_grad(&mut self, v: Var, g: Vec<E>) {
        assert_eq!(g.len(), self.nodes[v.0].value.numel());
        self.nodes[v.0].grad = Some(g);
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    // ---------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ew_binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ew_binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ew_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.maximum(E::ZERO));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| E::ONE / (E::ONE + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    /// Batched matrix product with broadcasting over leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_forward(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if axes.len() != t.rank() {
            return Err(TensorError::InvalidInput(format!(
                "permute axes {:?} do not match rank {}",
                axes,
                t.rank()
            )));
        }
        let value = permute_tensor(t, axes);
        Ok(self.push(value, Op::Permute(a, axes.to_vec())))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(TensorError::InvalidInput(
                "transpose requires rank >= 2".into(),
            ));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), t.data.clone());
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != tb.rank()
            || axis >= ta.rank()
            || ta.shape
                .iter()
                .zip(&tb.shape)
                .enumerate()
                .any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let value = concat_forward(ta, tb, axis);
        Ok(self.push(value, Op::Concat(a, b, axis)))
    }

    /// Materialize `a` broadcast to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let strides =
            broadcast_strides(&t.shape, shape).ok_or_else(|| TensorError::ShapeMismatch {
                op: "expand",
                lhs: t.shape.clone(),
                rhs: shape.to_vec(),
            })?;
        let mut out = Tensor::zeros(shape);
        let sh = shape.to_vec();
        for_each_offsets(&sh, &[&strides], |i, offs| {
            out.data[i] = t.data[offs[0]];
        });
        Ok(self.push(out, Op::Expand(a)))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let value = reduce_axis_forward(self.value(a), axis, keepdim, false)?;
        Ok(self.push(value, Op::SumAxis(a, axis, keepdim)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let value = reduce_axis_forward(self.value(a), axis, keepdim, true)?;
        Ok(self.push(value, Op::MeanAxis(a, axis, keepdim)))
    }

    pub fn max_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mask = Rc::new(Mask::all_true(&shape));
        self.masked_max_inner(a, mask, axis, keepdim)
    }

    /// Max over `axis` ignoring masked-out entries. Every reduced slice must
    /// contain at least one live entry.
    pub fn masked_max(
        &mut self,
        a: Var,
        mask: &Mask,
        axis: usize,
        keepdim: bool,
    ) -> Result<Var> {
        let mask = Rc::new(mask.broadcast_to(self.shape(a))?);
        self.masked_max_inner(a, mask, axis, keepdim)
    }

    fn masked_max_inner(
        &mut self,
        a: Var,
        mask: Rc<Mask>,
        axis: usize,
        keepdim: bool,
    ) -> Result<Var> {
        let value = masked_max_forward(self.value(a), &mask, axis, keepdim)?;
        Ok(self.push(value, Op::MaskedMax(a, mask, axis, keepdim)))
    }

    /// Row softmax over the last axis. Masked entries receive a large negative
    /// additive constant pre-softmax and are zeroed exactly post-softmax.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Mask) -> Result<Var> {
        // the mask is kept in its pre-broadcast shape and indexed by stride
        let value = masked_softmax_forward(self.value(logits), mask)?;
        Ok(self.push(value, Op::MaskedSoftmax(logits, Rc::new(mask.clone()))))
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let value = layer_norm_forward(self.value(x), self.value(gain), self.value(bias));
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }))
    }

    /// Select rows along the first axis.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(TensorError::InvalidInput("gather on scalar".into()));
        }
        let rows = t.shape[0];
        if indices.iter().any(|&i| i >= rows) {
            return Err(TensorError::InvalidInput(format!(
                "gather index out of range (rows={rows})"
            )));
        }
        let row_len: usize = t.shape[1..].iter().product();
        let mut shape = t.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            data.extend_from_slice(&t.data[i * row_len..(i + 1) * row_len]);
        }
        let value = Tensor::new(shape, data);
        Ok(self.push(value, Op::Gather(a, Rc::new(indices.to_vec()))))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = E::from_f64(t.numel() as f64);
        let mut s = E::ZERO;
        for &v in &t.data {
            s += v;
        }
        let value = Tensor::scalar(s / n);
        self.push(value, Op::MeanAll(a))
    }

    /// Mean binary cross-entropy of logits against fixed 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[E]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: t.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let n = E::from_f64(t.numel() as f64);
        let mut s = E::ZERO;
        for (&x, &y) in t.data.iter().zip(targets) {
            // max(x,0) - x*y + ln(1 + exp(-|x|))
            s += x.maximum(E::ZERO) - x * y + (E::ONE + (-x.abs()).exp()).ln();
        }
        let value = Tensor::scalar(s / n);
        Ok(self.push(value, Op::BceWithLogits(logits, Rc::new(targets.to_vec()))))
    }

    /// Mean cross-entropy of `[n, c]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape[0] != classes.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape.clone(),
                rhs: vec![classes.len()],
            });
        }
        let c = t.shape[1];
        if classes.iter().any(|&k| k >= c) {
            return Err(TensorError::InvalidInput("class index out of range".into()));
        }
        let mut s = E::ZERO;
        for (row, &k) in t.data.chunks_exact(c).zip(classes) {
            let mx = row.iter().copied().fold(row[0], |a, b| a.maximum(b));
            let mut z = E::ZERO;
            for &v in row {
                z += (v - mx).exp();
            }
            s += z.ln() + mx - row[k];
        }
        let n = E::from_f64(classes.len() as f64);
        let value = Tensor::scalar(s / n);
        Ok(self.push(value, Op::CrossEntropy(logits, Rc::new(classes.to_vec()))))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar root. Leaf nodes with `requires_grad`
    /// accumulate gradients into their `grad` buffers.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::InvalidInput(
                "backward root must be scalar".into(),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![E::ONE]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if self.nodes[i].requires_grad {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(buf) => {
                        for (b, &gi) in buf.iter_mut().zip(&g) {
                            *b += gi;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        let out_shape = &node.value.shape;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_reduced(*a, g, out_shape, grads);
                self.acc_reduced(*b, g, out_shape, grads);
            }
            Op::Sub(a, b) => {
                self.acc_reduced(*a, g, out_shape, grads);
                let neg: Vec<E> = g.iter().map(|&x| -x).collect();
                self.acc_reduced(*b, &neg, out_shape, grads);
            }
            Op::Mul(a, b) => {
                // dA = g (.) broadcast(B), dB = g (.) broadcast(A)
                let bv = self.broadcast_values(*b, out_shape);
                let ga: Vec<E> = g.iter().zip(&bv).map(|(&x, &y)| x * y).collect();
                self.acc_reduced(*a, &ga, out_shape, grads);
                let av = self.broadcast_values(*a, out_shape);
                let gb: Vec<E> = g.iter().zip(&av).map(|(&x, &y)| x * y).collect();
                self.acc_reduced(*b, &gb, out_shape, grads);
            }
            Op::Scale(a, c) => {
                let ga: Vec<E> = g.iter().map(|&x| x * *c).collect();
                add_grad(grads, *a, &ga, self.nodes[a.0].value.numel());
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value.data;
                let ga: Vec<E> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > E::ZERO { gi } else { E::ZERO })
                    .collect();
                add_grad(grads, *a, &ga, x.len());
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                let ga: Vec<E> = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * yi * (E::ONE - yi))
                    .collect();
                add_grad(grads, *a, &ga, y.len());
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(
                    &self.nodes[a.0].value,
                    &self.nodes[b.0].value,
                    g,
                    out_shape,
                );
                add_grad(grads, *a, &ga, ga.len());
                add_grad(grads, *b, &gb, gb.len());
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let gt = Tensor::new(out_shape.clone(), g.to_vec());
                let ga = permute_tensor(&gt, &inv);
                add_grad(grads, *a, &ga.data, ga.data.len());
            }
            Op::Expand(a) => {
                let ga = reduce_to_shape(g, out_shape, &self.nodes[a.0].value.shape);
                add_grad(grads, *a, &ga, ga.len());
            }
            Op::Reshape(a) => {
                add_grad(grads, *a, g, self.nodes[a.0].value.numel());
            }
            Op::Concat(a, b, axis) => {
                let sa = &self.nodes[a.0].value.shape;
                let sb = &self.nodes[b.0].value.shape;
                let (ga, gb) = concat_backward(g, out_shape, sa, sb, *axis);
                add_grad(grads, *a, &ga, ga.len());
                add_grad(grads, *b, &gb, gb.len());
            }
            Op::SumAxis(a, axis, keepdim) => {
                let ga = spread_axis(g, &self.nodes[a.0].value.shape, *axis, *keepdim, E::ONE);
                add_grad(grads, *a, &ga, ga.len());
            }
            Op::MeanAxis(a, axis, keepdim) => {
                let extent = self.nodes[a.0].value.shape[*axis];
                let scale = E::ONE / E::from_f64(extent as f64);
                let ga = spread_axis(g, &self.nodes[a.0].value.shape, *axis, *keepdim, scale);
                add_grad(grads, *a, &ga, ga.len());
            }
            Op::MaskedMax(a, mask, axis, keepdim) => {
                let ga = masked_max_backward(
                    &self.nodes[a.0].value,
                    mask,
                    *axis,
                    *keepdim,
                    g,
                );
                add_grad(grads, *a, &ga, ga.len());
            }
            Op::MaskedSoftmax(a, mask) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut ga = vec![E::ZERO; y.numel()];
                for (r, (yrow, grow)) in y.data.chunks_exact(d).zip(g.chunks_exact(d)).enumerate()
                {
                    let mut dot = E::ZERO;
                    for (yi, gi) in yrow.iter().zip(grow) {
                        dot += *yi * *gi;
                    }
                    for j in 0..d {
                        ga[r * d + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                let _ = mask;
                add_grad(grads, *a, &ga, ga.len());
            }
            Op::LayerNorm { x, gain, bias } => {
                let (gx, gg, gb) = layer_norm_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[gain.0].value,
                    g,
                );
                add_grad(grads, *x, &gx, gx.len());
                add_grad(grads, *gain, &gg, gg.len());
                add_grad(grads, *bias, &gb, gb.len());
            }
            Op::Gather(a, indices) => {
                let t = &self.nodes[a.0].value;
                let row_len: usize = t.shape[1..].iter().product();
                let mut ga = vec![E::ZERO; t.numel()];
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..row_len {
                        ga[src * row_len + j] += g[r * row_len + j];
                    }
                }
                add_grad(grads, *a, &ga, ga.len());
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                let s = g[0] / E::from_f64(n as f64);
                let ga = vec![s; n];
                add_grad(grads, *a, &ga, ga.len());
            }
            Op::BceWithLogits(a, targets) => {
                let x = &self.nodes[a.0].value.data;
                let n = E::from_f64(x.len() as f64);
                let ga: Vec<E> = x
                    .iter()
                    .zip(targets.iter())
                    .map(|(&xi, &ti)| {
                        let p = E::ONE / (E::ONE + (-xi).exp());
                        g[0] * (p - ti) / n
                    })
                    .collect();
                add_grad(grads, *a, &ga, ga.len());
            }
            Op::CrossEntropy(a, classes) => {
                let t = &self.nodes[a.0].value;
                let c = t.shape[1];
                let n = E::from_f64(classes.len() as f64);
                let mut ga = vec![E::ZERO; t.numel()];
                for (r, (row, &k)) in t.data.chunks_exact(c).zip(classes.iter()).enumerate() {
                    let mx = row.iter().copied().fold(row[0], |a, b| a.maximum(b));
                    let mut z = E::ZERO;
                    for &v in row {
                        z += (v - mx).exp();
                    }
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / z;
                        let delta = if j == k { E::ONE } else { E::ZERO };
                        ga[r * c + j] = g[0] * (p - delta) / n;
                    }
                }
                add_grad(grads, *a, &ga, ga.len());
            }
        }
    }

    /// Values of `v` materialized at `shape` (for broadcast binary backward).
    fn broadcast_values(&self, v: Var, shape: &[usize]) -> Vec<E> {
        let t = &self.nodes[v.0].value;
        if t.shape == shape {
            return t.data.clone();
        }
        let strides = broadcast_strides(&t.shape, shape).expect("validated at op creation");
        let mut out = vec![E::ZERO; shape.iter().product()];
        for_each_offsets(shape, &[&strides], |i, offs| {
            out[i] = t.data[offs[0]];
        });
        out
    }

    fn acc_reduced(
        &self,
        v: Var,
        g: &[E],
        g_shape: &[usize],
        grads: &mut [Option<Vec<E>>],
    ) {
        let target = &self.nodes[v.0].value.shape;
        if target == g_shape {
            add_grad(grads, v, g, g.len());
        } else {
            let ga = reduce_to_shape(g, g_shape, target);
            add_grad(grads, v, &ga, ga.len());
        }
    }
}

fn add_grad<E: Scalar>(grads: &mut [Option<Vec<E>>], v: Var, g: &[E], numel: usize) {
    debug_assert_eq!(g.len(), numel);
    match &mut grads[v.0] {
        Some(buf) => {
            for (b, &gi) in buf.iter_mut().zip(g) {
                *b += gi;
            }
        }
        None => grads[v.0] = Some(g.to_vec()),
    }
}

// ------------------------------------------------------------------ kernels

/// Odometer loop handing out the linear output index plus one offset per
/// supplied stride vector.
fn for_each_offsets(shape: &[usize], strides: &[&[usize]], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = shape.iter().product();
    let rank = shape.len();
    let k = strides.len();
    let mut coords = vec![0usize; rank];
    let mut offs = vec![0usize; k];
    for i in 0..total {
        f(i, &offs);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            for j in 0..k {
                offs[j] += strides[j][ax];
            }
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
            for j in 0..k {
                offs[j] -= strides[j][ax] * shape[ax];
            }
        }
    }
}

fn ew_binary<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    op: &'static str,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::new(a.shape.clone(), data));
    }
    let shape = broadcast_shapes(&a.shape, &b.shape).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let sa = broadcast_strides(&a.shape, &shape).unwrap();
    let sb = broadcast_strides(&b.shape, &shape).unwrap();
    let mut out = Tensor::zeros(&shape);
    for_each_offsets(&shape, &[&sa, &sb], |i, offs| {
        out.data[i] = f(a.data[offs[0]], b.data[offs[1]]);
    });
    Ok(out)
}

/// Sum `g` (of `g_shape`) down to `target` shape (inverse of broadcasting).
fn reduce_to_shape<E: Scalar>(g: &[E], g_shape: &[usize], target: &[usize]) -> Vec<E> {
    let strides = broadcast_strides(target, g_shape).expect("reduce_to_shape");
    let mut out = vec![E::ZERO; target.iter().product()];
    for_each_offsets(g_shape, &[&strides], |i, offs| {
        out[offs[0]] += g[i];
    });
    out
}

fn matmul_forward<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let err = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(err());
    }
    let (n, ka) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (kb, m) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if ka != kb {
        return Err(err());
    }
    let batch_a = &a.shape[..a.rank() - 2];
    let batch_b = &b.shape[..b.rank() - 2];
    let batch = broadcast_shapes(batch_a, batch_b).ok_or_else(err)?;
    let sa = mat_strides(batch_a, &batch);
    let sb = mat_strides(batch_b, &batch);
    let mut out_shape = batch.clone();
    out_shape.push(n);
    out_shape.push(m);
    let mut out: Tensor<E> = Tensor::zeros(&out_shape);
    let nmat: usize = batch.iter().product::<usize>().max(1);
    let (asz, bsz, osz) = (n * ka, kb * m, n * m);
    let mut coords = vec![0usize; batch.len()];
    for bi in 0..nmat {
        crate::tensor::linear_to_coords(bi, &batch, &mut coords);
        let oa: usize = coords.iter().zip(&sa).map(|(&c, &s)| c * s).sum();
        let ob: usize = coords.iter().zip(&sb).map(|(&c, &s)| c * s).sum();
        unsafe {
            E::gemm(
                n,
                ka,
                m,
                E::ONE,
                a.data.as_ptr().add(oa * asz),
                ka as isize,
                1,
                b.data.as_ptr().add(ob * bsz),
                m as isize,
                1,
                E::ZERO,
                out.data.as_mut_ptr().add(bi * osz),
                m as isize,
                1,
            );
        }
    }
    Ok(out)
}

/// Strides counted in whole matrices for a batch shape broadcast to `target`.
fn mat_strides(batch: &[usize], target: &[usize]) -> Vec<usize> {
    broadcast_strides(batch, target).expect("batch broadcast validated")
}

fn matmul_backward<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    g: &[E],
    out_shape: &[usize],
) -> (Vec<E>, Vec<E>) {
    let ra = a.rank();
    let rb = b.rank();
    let (n, k) = (a.shape[ra - 2], a.shape[ra - 1]);
    let m = b.shape[rb - 1];
    let batch = &out_shape[..out_shape.len() - 2];
    let sa = mat_strides(&a.shape[..ra - 2], batch);
    let sb = mat_strides(&b.shape[..rb - 2], batch);
    let mut ga = vec![E::ZERO; a.numel()];
    let mut gb = vec![E::ZERO; b.numel()];
    let nmat: usize = batch.iter().product::<usize>().max(1);
    let (asz, bsz, osz) = (n * k, k * m, n * m);
    let mut coords = vec![0usize; batch.len()];
    for bi in 0..nmat {
        crate::tensor::linear_to_coords(bi, batch, &mut coords);
        let oa: usize = coords.iter().zip(&sa).map(|(&c, &s)| c * s).sum();
        let ob: usize = coords.iter().zip(&sb).map(|(&c, &s)| c * s).sum();
        unsafe {
            // dA += dC @ B^T
            E::gemm(
                n,
                m,
                k,
                E::ONE,
                g.as_ptr().add(bi * osz),
                m as isize,
                1,
                b.data.as_ptr().add(ob * bsz),
                1,
                m as isize,
                E::ONE,
                ga.as_mut_ptr().add(oa * asz),
                k as isize,
                1,
            );
            // dB += A^T @ dC
            E::gemm(
                k,
                n,
                m,
                E::ONE,
                a.data.as_ptr().add(oa * asz),
                1,
                k as isize,
                g.as_ptr().add(bi * osz),
                m as isize,
                1,
                E::ONE,
                gb.as_mut_ptr().add(ob * bsz),
                m as isize,
                1,
            );
        }
    }
    (ga, gb)
}

fn permute_tensor<E: Scalar>(t: &Tensor<E>, axes: &[usize]) -> Tensor<E> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let in_strides = contiguous_strides(&t.shape);
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Tensor::zeros(&out_shape);
    for_each_offsets(&out_shape, &[&perm_strides], |i, offs| {
        out.data[i] = t.data[offs[0]];
    });
    out
}

fn concat_forward<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, axis: usize) -> Tensor<E> {
    let mut shape = a.shape.clone();
    shape[axis] = a.shape[axis] + b.shape[axis];
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let (ba, bb) = (a.shape[axis] * inner, b.shape[axis] * inner);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        data.extend_from_slice(&a.data[o * ba..(o + 1) * ba]);
        data.extend_from_slice(&b.data[o * bb..(o + 1) * bb]);
    }
    Tensor::new(shape, data)
}

fn concat_backward<E: Scalar>(
    g: &[E],
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    axis: usize,
) -> (Vec<E>, Vec<E>) {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let (ba, bb) = (sa[axis] * inner, sb[axis] * inner);
    let mut ga = Vec::with_capacity(outer * ba);
    let mut gb = Vec::with_capacity(outer * bb);
    let stride = ba + bb;
    for o in 0..outer {
        ga.extend_from_slice(&g[o * stride..o * stride + ba]);
        gb.extend_from_slice(&g[o * stride + ba..(o + 1) * stride]);
    }
    (ga, gb)
}

fn reduce_axis_forward<E: Scalar>(
    t: &Tensor<E>,
    axis: usize,
    keepdim: bool,
    mean: bool,
) -> Result<Tensor<E>> {
    if axis >= t.rank() {
        return Err(TensorError::InvalidInput(format!(
            "axis {axis} out of range for shape {:?}",
            t.shape
        )));
    }
    let extent = t.shape[axis];
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut shape = t.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    let mut data = vec![E::ZERO; outer * inner];
    for o in 0..outer {
        for j in 0..extent {
            let base = (o * extent + j) * inner;
            for i in 0..inner {
                data[o * inner + i] += t.data[base + i];
            }
        }
    }
    if mean {
        let s = E::ONE / E::from_f64(extent as f64);
        for v in &mut data {
            *v *= s;
        }
    }
    Ok(Tensor::new(shape, data))
}

fn spread_axis<E: Scalar>(
    g: &[E],
    in_shape: &[usize],
    axis: usize,
    _keepdim: bool,
    scale: E,
) -> Vec<E> {
    let extent = in_shape[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut out = vec![E::ZERO; outer * extent * inner];
    for o in 0..outer {
        for j in 0..extent {
            let base = (o * extent + j) * inner;
            for i in 0..inner {
                out[base + i] = g[o * inner + i] * scale;
            }
        }
    }
    out
}

fn masked_max_forward<E: Scalar>(
    t: &Tensor<E>,
    mask: &Mask,
    axis: usize,
    keepdim: bool,
) -> Result<Tensor<E>> {
    if axis >= t.rank() {
        return Err(TensorError::InvalidInput(format!(
            "axis {axis} out of range for shape {:?}",
            t.shape
        )));
    }
    let extent = t.shape[axis];
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut shape = t.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    let mut data = vec![E::ZERO; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut best: Option<E> = None;
            for j in 0..extent {
                let idx = (o * extent + j) * inner + i;
                if mask.data[idx] {
                    best = Some(match best {
                        Some(b) => b.maximum(t.data[idx]),
                        None => t.data[idx],
                    });
                }
            }
            data[o * inner + i] = best.ok_or_else(|| {
                TensorError::InvalidMask("max reduction over fully-masked slice".into())
            })?;
        }
    }
    Ok(Tensor::new(shape, data))
}

fn masked_max_backward<E: Scalar>(
    t: &Tensor<E>,
    mask: &Mask,
    axis: usize,
    _keepdim: bool,
    g: &[E],
) -> Vec<E> {
    let extent = t.shape[axis];
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut out = vec![E::ZERO; t.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let mut best: Option<(usize, E)> = None;
            for j in 0..extent {
                let idx = (o * extent + j) * inner + i;
                if mask.data[idx] {
                    match best {
                        Some((_, b)) if t.data[idx] <= b => {}
                        _ => best = Some((idx, t.data[idx])),
                    }
                }
            }
            if let Some((idx, _)) = best {
                out[idx] += g[o * inner + i];
            }
        }
    }
    out
}

fn masked_softmax_forward<E: Scalar>(t: &Tensor<E>, mask: &Mask) -> Result<Tensor<E>> {
    let d = t.last_dim();
    if d == 0 {
        return Err(TensorError::InvalidInput("softmax over empty axis".into()));
    }
    let strides = broadcast_strides(&mask.shape, &t.shape).ok_or_else(|| {
        TensorError::ShapeMismatch {
            op: "masked_softmax",
            lhs: mask.shape.clone(),
            rhs: t.shape.clone(),
        }
    })?;
    let rank = t.shape.len();
    let sd = strides[rank - 1];
    let lead = &t.shape[..rank - 1];
    let lead_strides = &strides[..rank - 1];
    let mut coords = vec![0usize; lead.len()];
    let mut base = 0usize;
    let neg = E::from_f64(MASK_NEG);
    let mut out: Vec<E> = Vec::with_capacity(t.numel());
    let mut mbuf = vec![false; d];
    for (r, row) in t.data.chunks_exact(d).enumerate() {
        let mrow: &[bool] = if sd == 1 {
            &mask.data[base..base + d]
        } else {
            for (j, m) in mbuf.iter_mut().enumerate() {
                *m = mask.data[base + j * sd];
            }
            &mbuf
        };
        // advance the row odometer for the next iteration
        for ax in (0..lead.len()).rev() {
            coords[ax] += 1;
            base += lead_strides[ax];
            if coords[ax] < lead[ax] {
                break;
            }
            coords[ax] = 0;
            base -= lead_strides[ax] * lead[ax];
        }
        if mrow.iter().all(|m| *m) {
            // unmasked fast path: no per-element branches
            let mut mx = row[0];
            for &v in &row[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let mut z = E::ZERO;
            for &v in row {
                let e = (v - mx).exp();
                out.push(e);
                z += e;
            }
            let inv = E::ONE / z;
            let start = out.len() - d;
            for o in &mut out[start..] {
                *o *= inv;
            }
            continue;
        }
        if !mrow.iter().any(|&m| m) {
            return Err(TensorError::InvalidMask(format!(
                "softmax row {r} fully masked"
            )));
        }
        let mut mx = neg;
        for j in 0..d {
            if mrow[j] && row[j] > mx {
                mx = row[j];
            }
        }
        let mut z = E::ZERO;
        for j in 0..d {
            // exact zero for masked entries post-softmax
            let e = if mrow[j] {
                (row[j] - mx).exp()
            } else {
                E::ZERO
            };
            out.push(e);
            z += e;
        }
        let inv = E::ONE / z;
        let start = out.len() - d;
        for o in &mut out[start..] {
            *o *= inv;
        }
    }
    Ok(Tensor::new(t.shape.clone(), out))
}

fn layer_norm_forward<E: Scalar>(x: &Tensor<E>, gain: &Tensor<E>, bias: &Tensor<E>) -> Tensor<E> {
    let d = x.last_dim();
    let eps = E::from_f64(LN_EPS);
    let inv_d = E::ONE / E::from_f64(d as f64);
    let mut out = vec![E::ZERO; x.numel()];
    for (r, row) in x.data.chunks_exact(d).enumerate() {
        let mut mu = E::ZERO;
        for &v in row {
            mu += v;
        }
        mu *= inv_d;
        let mut var = E::ZERO;
        for &v in row {
            var += (v - mu) * (v - mu);
        }
        var *= inv_d;
        let inv_std = E::ONE / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mu) * inv_std * gain.data[j] + bias.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

fn layer_norm_backward<E: Scalar>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    g: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let d = x.last_dim();
    let eps = E::from_f64(LN_EPS);
    let inv_d = E::ONE / E::from_f64(d as f64);
    let mut gx = vec![E::ZERO; x.numel()];
    let mut gg = vec![E::ZERO; d];
    let mut gb = vec![E::ZERO; d];
    for (r, row) in x.data.chunks_exact(d).enumerate() {
        let grow = &g[r * d..(r + 1) * d];
        let mut mu = E::ZERO;
        for &v in row {
            mu += v;
        }
        mu *= inv_d;
        let mut var = E::ZERO;
        for &v in row {
            var += (v - mu) * (v - mu);
        }
        var *= inv_d;
        let inv_std = E::ONE / (var + eps).sqrt();
        let mut mean_dxhat = E::ZERO;
        let mut mean_dxhat_xhat = E::ZERO;
        for j in 0..d {
            let xhat = (row[j] - mu) * inv_std;
            let dxhat = grow[j] * gain.data[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
            gg[j] += grow[j] * xhat;
            gb[j] += grow[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for j in 0..d {
            let xhat = (row[j] - mu) * inv_std;
            let dxhat = grow[j] * gain.data[j];
            gx[r * d + j] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std;
        }
    }
    (gx, gg, gb)
}
