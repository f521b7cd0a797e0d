//! Reverse-mode differentiation over a recorded op tape.
//!
//! The tape owns every intermediate value. Ops append nodes in topological
//! order; `backward` walks the nodes in reverse and accumulates gradients
//! into the leaves. The op set is exactly what the transformer and the CTC
//! loss need, no general broadcasting beyond trailing dimensions.

use super::tensor::{log_softmax_last, matmul, softmax_last, Tensor};
use super::Scalar;
use crate::error::{NarError, Result};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Relu(usize),
    Matmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: T,
    },
    Embedding {
        weight: usize,
        ids: Vec<usize>,
    },
    GatherRows {
        input: usize,
        rows: Vec<usize>,
    },
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
        mask_shape: Vec<usize>,
    },
    SumAll(usize),
    /// Scalar-valued op with a precomputed gradient w.r.t. one input.
    /// Hosts the CTC loss and the label-smoothed NLL.
    CustomScalar {
        input: usize,
        local_grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad_needed: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, grad_needed: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad_needed,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].grad_needed
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Elementwise add; `b` may be a trailing-dimension broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_broadcast(self.value(b), |x, y| x + y);
        let g = self.needs(a.0) || self.needs(b.0);
        self.push(v, g, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_broadcast(self.value(b), |x, y| x * y);
        let g = self.needs(a.0) || self.needs(b.0);
        self.push(v, g, Op::Mul(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        let g = self.needs(a.0);
        self.push(v, g, Op::Neg(a.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let g = self.needs(a.0);
        self.push(v, g, Op::Scale(a.0, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let g = self.needs(a.0);
        self.push(v, g, Op::Relu(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        let g = self.needs(a.0) || self.needs(b.0);
        self.push(v, g, Op::Matmul(a.0, b.0))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.value(a).permute(axes);
        let g = self.needs(a.0);
        self.push(v, g, Op::Permute(a.0, axes.to_vec()))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Var {
        let rank = self.value(a).rank();
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).reshaped(shape);
        let g = self.needs(a.0);
        self.push(v, g, Op::Reshape(a.0))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_last(self.value(a));
        let g = self.needs(a.0);
        self.push(v, g, Op::Softmax(a.0))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_last(self.value(a));
        let g = self.needs(a.0);
        self.push(v, g, Op::LogSoftmax(a.0))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), d);
        assert_eq!(bv.len(), d);
        let mut out = Vec::with_capacity(xv.numel());
        let inv_d = T::one() / T::from_usize(d).unwrap();
        for row in xv.data().chunks_exact(d) {
            let mean: T = row.iter().cloned().sum::<T>() * inv_d;
            let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let inv_sigma = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * inv_sigma * gv[j] + bv[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out);
        let g = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        self.push(
            value,
            g,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Row lookup into an embedding table `[vocab, d]`; output is
    /// `[ids.len(), d]`.
    pub fn embedding(&mut self, weight: Var, ids: &[usize]) -> Var {
        let wv = self.value(weight);
        assert_eq!(wv.rank(), 2);
        let (v, d) = (wv.shape()[0], wv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "token id {id} out of vocab range {v}");
            out.extend_from_slice(&wv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out);
        let g = self.needs(weight.0);
        self.push(
            value,
            g,
            Op::Embedding {
                weight: weight.0,
                ids: ids.to_vec(),
            },
        )
    }

    /// Gather rows of a rank-2 tensor `[r, d]` by index; output `[rows.len(), d]`.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Var {
        let iv = self.value(input);
        assert_eq!(iv.rank(), 2, "gather_rows expects rank-2 input");
        let d = iv.shape()[1];
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&iv.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], out);
        let g = self.needs(input.0);
        self.push(
            value,
            g,
            Op::GatherRows {
                input: input.0,
                rows: rows.to_vec(),
            },
        )
    }

    /// Where `mask` is true, replace the entry with `value`. The mask either
    /// matches the input shape or, when the input has one extra axis at
    /// position 1 (attention heads), broadcasts across it.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], mask_shape: &[usize], value: T) -> Var {
        let xv = self.value(x);
        let filled = apply_mask(xv, mask, mask_shape, |_| value);
        let g = self.needs(x.0);
        self.push(
            filled,
            g,
            Op::MaskedFill {
                x: x.0,
                mask: mask.to_vec(),
                mask_shape: mask_shape.to_vec(),
            },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().cloned().sum());
        let g = self.needs(a.0);
        self.push(v, g, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Scalar-valued op whose gradient w.r.t. `input` was computed by the
    /// caller. Used by losses with hand-derived backward passes.
    pub fn custom_scalar(&mut self, input: Var, value: T, local_grad: Tensor<T>) -> Var {
        assert_eq!(local_grad.shape(), self.value(input).shape());
        let g = self.needs(input.0);
        self.push(Tensor::scalar(value), g, Op::CustomScalar {
            input: input.0,
            local_grad,
        })
    }

    /// Mean of the smoothed negative log-likelihood over non-ignored
    /// positions. `log_probs` is `[positions, vocab]`, rows are
    /// log-distributions.
    pub fn label_smoothed_nll(
        &mut self,
        log_probs: Var,
        targets: &[usize],
        smoothing: T,
        ignore_id: usize,
    ) -> Result<Var> {
        let lp = self.value(log_probs);
        assert_eq!(lp.rank(), 2, "label_smoothed_nll expects [positions, vocab]");
        let (n, v) = (lp.shape()[0], lp.shape()[1]);
        assert_eq!(targets.len(), n);
        let active = targets.iter().filter(|&&t| t != ignore_id).count();
        let mut grad = Tensor::zeros(vec![n, v]);
        if active == 0 {
            return Ok(self.custom_scalar(log_probs, T::zero(), grad));
        }
        let inv_n = T::one() / T::from_usize(active).unwrap();
        let inv_v = T::one() / T::from_usize(v).unwrap();
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                continue;
            }
            if t >= v {
                return Err(NarError::Contract(format!(
                    "target id {t} out of vocab range {v}"
                )));
            }
            let row = &lp.data()[i * v..(i + 1) * v];
            let mean_nll: T = -row.iter().cloned().sum::<T>() * inv_v;
            loss = loss + (T::one() - smoothing) * (-row[t]) + smoothing * mean_nll;
            let grow = &mut grad.data_mut()[i * v..(i + 1) * v];
            for (j, gslot) in grow.iter_mut().enumerate() {
                let mut c = smoothing * inv_v;
                if j == t {
                    c = c + (T::one() - smoothing);
                }
                *gslot = -c * inv_n;
            }
        }
        Ok(self.custom_scalar(log_probs, loss * inv_n, grad))
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per tape
    /// var; leaves with `requires_grad` that are unreachable from the loss
    /// get zeros, everything else is `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(NarError::Contract("backward loss must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].grad_needed {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
            }
        }
        // leaves off every path to the loss still get a zero gradient
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf = node.op {
                if node.grad_needed && grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.sum_to_shape(self.nodes[*b].value.shape()));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.zip_broadcast(&self.nodes[*b].value, |x, y| x * y));
                }
                if self.needs(*b) {
                    // g ⊙ a, summed down to b's shape
                    let prod = elementwise_mul(g, &self.nodes[*a].value);
                    accumulate(grads, *b, prod.sum_to_shape(self.nodes[*b].value.shape()));
                }
            }
            Op::Neg(a) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.map(|x| -x));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let c = *c;
                    accumulate(grads, *a, g.map(|x| x * c));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let xv = &self.nodes[*a].value;
                    let mut out = g.clone();
                    for (o, &x) in out.data_mut().iter_mut().zip(xv.data()) {
                        if x <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    accumulate(grads, *a, out);
                }
            }
            Op::Matmul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.needs(*a) {
                    let bt = transpose_last(bv);
                    accumulate(grads, *a, matmul(g, &bt));
                }
                if self.needs(*b) {
                    let gb = if bv.rank() == 2 && av.rank() > 2 {
                        // shared rhs: fold the batch into rows
                        let k = *av.shape().last().unwrap();
                        let n = *g.shape().last().unwrap();
                        let rows = av.numel() / k;
                        let a2 = av.reshaped(vec![rows, k]);
                        let g2 = g.reshaped(vec![rows, n]);
                        matmul(&transpose_last(&a2), &g2)
                    } else {
                        matmul(&transpose_last(av), g)
                    };
                    accumulate(grads, *b, gb);
                }
            }
            Op::Permute(a, axes) => {
                if self.needs(*a) {
                    let mut inv = vec![0usize; axes.len()];
                    for (j, &p) in axes.iter().enumerate() {
                        inv[p] = j;
                    }
                    accumulate(grads, *a, g.permute(&inv));
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.reshaped(self.nodes[*a].value.shape().to_vec()));
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[i].value;
                    let d = *y.shape().last().unwrap();
                    let mut out = Vec::with_capacity(y.numel());
                    for (yrow, grow) in y.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
                        let dot: T = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        out.extend(yrow.iter().zip(grow).map(|(&yv, &gv)| yv * (gv - dot)));
                    }
                    accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out));
                }
            }
            Op::LogSoftmax(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[i].value;
                    let d = *y.shape().last().unwrap();
                    let mut out = Vec::with_capacity(y.numel());
                    for (yrow, grow) in y.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
                        let gsum: T = grow.iter().cloned().sum();
                        out.extend(
                            yrow.iter()
                                .zip(grow)
                                .map(|(&yv, &gv)| gv - yv.exp() * gsum),
                        );
                    }
                    accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out));
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gamma].value.data();
                let d = *xv.shape().last().unwrap();
                let inv_d = T::one() / T::from_usize(d).unwrap();
                let rows = xv.numel() / d;
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let xrow = &xv.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let mean: T = xrow.iter().cloned().sum::<T>() * inv_d;
                    let var: T =
                        xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                    let inv_sigma = T::one() / (var + *eps).sqrt();
                    let xhat: Vec<T> = xrow.iter().map(|&v| (v - mean) * inv_sigma).collect();
                    let dxhat: Vec<T> = grow.iter().zip(gv).map(|(&gq, &gm)| gq * gm).collect();
                    let m1: T = dxhat.iter().cloned().sum::<T>() * inv_d;
                    let m2: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    let gxrow = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        gxrow[j] = inv_sigma * (dxhat[j] - m1 - xhat[j] * m2);
                        ggamma[j] = ggamma[j] + grow[j] * xhat[j];
                        gbeta[j] = gbeta[j] + grow[j];
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, gx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![d], ggamma));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(vec![d], gbeta));
                }
            }
            Op::Embedding { weight, ids } => {
                if self.needs(*weight) {
                    let wv = &self.nodes[*weight].value;
                    let d = wv.shape()[1];
                    let mut gw = Tensor::zeros(wv.shape().to_vec());
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &g.data()[pos * d..(pos + 1) * d];
                        let dst = &mut gw.data_mut()[id * d..(id + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                    accumulate(grads, *weight, gw);
                }
            }
            Op::GatherRows { input, rows } => {
                if self.needs(*input) {
                    let iv = &self.nodes[*input].value;
                    let d = iv.shape()[1];
                    let mut gi = Tensor::zeros(iv.shape().to_vec());
                    for (pos, &r) in rows.iter().enumerate() {
                        let src = &g.data()[pos * d..(pos + 1) * d];
                        let dst = &mut gi.data_mut()[r * d..(r + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                    accumulate(grads, *input, gi);
                }
            }
            Op::MaskedFill { x, mask, mask_shape } => {
                if self.needs(*x) {
                    let zeroed = apply_mask_grad(g, mask, mask_shape);
                    accumulate(grads, *x, zeroed);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    accumulate(grads, *a, Tensor::full(shape, g.item()));
                }
            }
            Op::CustomScalar { input, local_grad } => {
                if self.needs(*input) {
                    let gi = g.item();
                    accumulate(grads, *input, local_grad.map(|x| x * gi));
                }
            }
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a leaf that had `requires_grad` set.
    pub fn grad(&self, v: Var) -> &Tensor<T> {
        self.grads[v.0].as_ref().expect("no gradient for var")
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], idx: usize, delta: Tensor<T>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (o, &v) in existing.data_mut().iter_mut().zip(delta.data()) {
                *o = *o + v;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn elementwise_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect(),
    )
}

fn transpose_last<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let rank = t.rank();
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 2, rank - 1);
    t.permute(&axes)
}

/// Mask application shared by forward fill and backward zeroing. The mask
/// matches the tensor shape, or the tensor has one extra axis at position 1
/// that the mask broadcasts across.
fn mask_offsets(shape: &[usize], mask_shape: &[usize]) -> Box<dyn Fn(usize) -> usize> {
    if shape == mask_shape {
        return Box::new(|i| i);
    }
    assert_eq!(shape.len(), mask_shape.len() + 1, "mask shape mismatch");
    assert_eq!(shape[0], mask_shape[0]);
    assert_eq!(&shape[2..], &mask_shape[1..]);
    let heads = shape[1];
    let inner: usize = shape[2..].iter().product();
    Box::new(move |i| {
        let b = i / (heads * inner);
        let r = i % inner;
        b * inner + r
    })
}

fn apply_mask<T: Scalar>(
    x: &Tensor<T>,
    mask: &[bool],
    mask_shape: &[usize],
    fill: impl Fn(T) -> T,
) -> Tensor<T> {
    let map = mask_offsets(x.shape(), mask_shape);
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask[map(i)] {
            *v = fill(*v);
        }
    }
    out
}

fn apply_mask_grad<T: Scalar>(g: &Tensor<T>, mask: &[bool], mask_shape: &[usize]) -> Tensor<T> {
    let map = mask_offsets(g.shape(), mask_shape);
    let mut out = g.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask[map(i)] {
            *v = T::zero();
        }
    }
    out
}
