//! Dense tensor arithmetic with reverse-mode differentiation — exactly the
//! op set the transformer and the CTC loss need.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{is_suffix, log_sum_exp, matmul, s, softmax, strides, Scalar, Tensor};

use crate::error::{NarError, Result};

/// Central-difference gradient check. Returns the max over coordinates of
/// `|analytic − (f(p+h·e_i) − f(p−h·e_i))/2h| / max(1, |analytic|)`.
///
/// `f` is evaluated twice at the unperturbed point first; a mismatch means
/// the oracle cannot be trusted (non-deterministic function).
pub fn finite_diff_check<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    params: &Tensor<T>,
    analytic: &Tensor<T>,
    h: T,
) -> Result<T> {
    assert!(h > T::zero(), "finite difference step must be positive");
    assert_eq!(params.shape(), analytic.shape());
    let base1 = f(params);
    let base2 = f(params);
    if base1 != base2 {
        return Err(NarError::OracleInvalid(
            "function is not deterministic under repeated evaluation".into(),
        ));
    }
    let two = T::one() + T::one();
    let mut max_err = T::zero();
    let mut p = params.clone();
    for i in 0..p.numel() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + h;
        let plus = f(&p);
        p.data_mut()[i] = orig - h;
        let minus = f(&p);
        p.data_mut()[i] = orig;
        let numeric = (plus - minus) / (two * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / T::max(T::one(), a.abs());
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
