//! Dense row-major tensors over f32/f64.

use crate::error::{NarError, Result};
use rayon::prelude::*;

/// Scalar element type. 32-bit for training/inference, 64-bit for the
/// gradient-check oracles where central differences need the extra precision.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an f64 constant into the scalar type.
pub fn s<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant representable")
}

/// Dense n-dimensional array, flat row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel])
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data, new shape. Element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        Tensor::new(shape, self.data.clone())
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NarError::NumericDomain(format!(
                "non-finite value in {ctx}"
            )))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combine with `other`, which must either match the shape
    /// exactly or be a trailing-dimension broadcast (its shape is a suffix of
    /// ours).
    pub fn zip_broadcast(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Self {
        assert!(
            is_suffix(&other.shape, &self.shape),
            "shape {:?} is not broadcastable onto {:?}",
            other.shape,
            self.shape
        );
        let chunk = other.numel();
        let mut out = Vec::with_capacity(self.numel());
        for block in self.data.chunks_exact(chunk) {
            out.extend(block.iter().zip(&other.data).map(|(&a, &b)| f(a, b)));
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Sum the leading dimensions away so the result has `other_shape`.
    /// Inverse of `zip_broadcast` for gradient accumulation.
    pub fn sum_to_shape(&self, target: &[usize]) -> Self {
        assert!(is_suffix(target, &self.shape));
        let chunk: usize = target.iter().product();
        let mut out = vec![T::zero(); chunk];
        for block in self.data.chunks_exact(chunk) {
            for (o, &b) in out.iter_mut().zip(block) {
                *o = *o + b;
            }
        }
        Tensor::new(target.to_vec(), out)
    }

    /// Reorder axes. `axes` is a permutation of 0..rank.
    pub fn permute(&self, axes: &[usize]) -> Self {
        let rank = self.rank();
        assert_eq!(axes.len(), rank);
        let old_strides = strides(&self.shape);
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let new_strides_in_old: Vec<usize> = axes.iter().map(|&a| old_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        loop {
            let off: usize = idx
                .iter()
                .zip(&new_strides_in_old)
                .map(|(&i, &s)| i * s)
                .sum();
            out.push(self.data[off]);
            // odometer increment over new_shape
            let mut d = rank;
            loop {
                if d == 0 {
                    return Tensor::new(new_shape, out);
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < new_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

pub fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

const PAR_FLOPS_THRESHOLD: usize = 1 << 15;

/// Batched matmul: `a` is `[.., m, k]`, `b` is either `[k, n]` (shared across
/// the batch) or `[.., k, n]` with the same leading dims as `a`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let ar = a.rank();
    assert!(ar >= 2, "matmul lhs must be at least rank 2");
    let m = a.shape()[ar - 2];
    let k = a.shape()[ar - 1];
    let batch: usize = a.shape()[..ar - 2].iter().product();
    let shared = b.rank() == 2;
    if !shared {
        assert_eq!(
            b.shape()[..b.rank() - 2],
            a.shape()[..ar - 2],
            "matmul batch dims mismatch"
        );
    }
    assert_eq!(b.shape()[b.rank() - 2], k, "matmul inner dim mismatch");
    let n = b.shape()[b.rank() - 1];

    let mut out_shape = a.shape()[..ar - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![T::zero(); batch * m * n];

    let run = |(row, chunk): (usize, &mut [T])| {
        let bi = row / m;
        let i = row % m;
        let a_row = &a.data()[(bi * m + i) * k..(bi * m + i) * k + k];
        let b_base = if shared { 0 } else { bi * k * n };
        for (l, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b.data()[b_base + l * n..b_base + l * n + n];
            for (o, &bv) in chunk.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };

    if batch * m * k * n >= PAR_FLOPS_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(run);
    } else {
        out.chunks_mut(n).enumerate().for_each(run);
    }
    Tensor::new(out_shape, out)
}

/// Stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(NarError::Contract(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    x.check_finite("softmax input")?;
    if axis == x.rank() - 1 {
        return Ok(softmax_last(x));
    }
    // move axis last, apply, move back
    let mut perm: Vec<usize> = (0..x.rank()).filter(|&a| a != axis).collect();
    perm.push(axis);
    let moved = x.permute(&perm);
    let soft = softmax_last(&moved);
    let mut inv = vec![0usize; x.rank()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(soft.permute(&inv))
}

pub(crate) fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(n) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().cloned().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn log_softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(n) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse: T = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// log(Σ exp(v_i)) in a shift-by-max form. All -inf inputs give -inf.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    assert!(!values.is_empty(), "log_sum_exp of empty list");
    let max = values.iter().cloned().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return T::neg_infinity();
    }
    let sum: T = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let t = Tensor::new(vec![2], vec![0.0f64, 0.0]);
        let s = softmax(&t, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_no_overflow() {
        let t = Tensor::new(vec![3], vec![1000.0f32, 1000.0, 1000.0]);
        let s = softmax(&t, 0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // exp-normalize of [1,2,3] computed at f64 precision
        let t = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]);
        let s = softmax(&t, 0).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &v) in s.data().iter().enumerate() {
            let expect = ((i + 1) as f64).exp() / denom;
            assert!((v - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::new(vec![2], vec![f32::NAN, 0.0]);
        assert!(softmax(&t, 0).is_err());
    }

    #[test]
    fn softmax_middle_axis() {
        let t = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect());
        let s = softmax(&t, 1).unwrap();
        // each (i, ., k) pair sums to 1
        for i in 0..2 {
            for k in 0..2 {
                let sum = s.data()[i * 4 + k] + s.data()[i * 4 + 2 + k];
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lse_all_neg_inf() {
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn lse_complementary_probs() {
        let v = [0.5f64.ln(), 0.5f64.ln()];
        assert!(log_sum_exp(&v).abs() < 1e-12);
    }

    #[test]
    fn lse_extreme_shift() {
        // -1000 + log(1 + e^-1), high-precision scalar oracle
        let got = log_sum_exp(&[-1000.0f64, -1001.0]);
        let expect = -1000.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    #[should_panic]
    fn lse_empty_is_contract_violation() {
        log_sum_exp::<f64>(&[]);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_batched_vs_loop() {
        let a = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect());
        let b = Tensor::new(vec![2, 2, 2], (0..8).map(|v| (v * 2) as f64).collect());
        let c = matmul(&a, &b);
        for bi in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for l in 0..2 {
                        acc += a.data()[bi * 4 + i * 2 + l] * b.data()[bi * 4 + l * 2 + j];
                    }
                    assert_eq!(c.data()[bi * 4 + i * 2 + j], acc);
                }
            }
        }
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f32).collect());
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back, t);
    }

    #[test]
    fn broadcast_add_and_sum_back() {
        let a = Tensor::new(vec![2, 3], vec![1.0f64; 6]);
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        let c = a.zip_broadcast(&b, |x, y| x + y);
        assert_eq!(c.data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let back = c.sum_to_shape(&[3]);
        assert_eq!(back.data(), &[4.0, 6.0, 8.0]);
    }
}
