//! Central-difference gradient oracle.

use crate::autograd::{Tape, Var};
use crate::error::{C2eError, Result};
use crate::tensor::Tensor;

/// Max over elements of `|autodiff − central difference| / (|central difference| + 1e-8)`.
///
/// `f` builds a scalar (or summed) output from the leaf it is given; it must
/// be a pure function of that leaf.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(C2eError::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let f0 = tape.value(out).sum();
    if !f0.is_finite() {
        return Err(C2eError::Evaluation(format!("f(x) = {f0}")));
    }
    let analytic = tape.backward(out).get_or_zeros(leaf);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t);
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out).sum();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(C2eError::Evaluation(format!("non-finite perturbed value {v}")))
        }
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
