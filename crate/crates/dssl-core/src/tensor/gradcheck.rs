//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

fn eval_once<F>(f: &F, ats: &[Tensor], grad: bool) -> Result<(Tape, Vec<TensorId>, TensorId, f64)>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = ats
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(grad);
            tape.leaf(&t)
        })
        .collect();
    let out = f(&mut tape, &ids)?;
    let y = tape.scalar_value(out).map_err(|_| {
        Error::invalid(format!(
            "grad_check function must be scalar-valued, got shape {:?}",
            tape.shape(out)
        ))
    })?;
    Ok((tape, ids, out, y))
}

/// Compare the tape gradient of a scalar function against central finite
/// differences, jointly over several input tensors. Returns the maximum
/// over all coordinates of `|analytic - numeric| / max(1, |analytic|)`.
///
/// The function must be deterministic: it is evaluated twice at the base
/// point and rejected if the two values differ.
pub fn grad_check_multi<F>(f: F, ats: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!(
            "grad_check eps must be in (0, 1e-2], got {eps}"
        )));
    }
    let (mut tape, ids, out, y0) = eval_once(&f, ats, true)?;
    let (_, _, _, y1) = eval_once(&f, ats, false)?;
    if y0.to_bits() != y1.to_bits() {
        return Err(Error::invalid(
            "grad_check function is not deterministic under repeated evaluation".to_string(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let mut max_err: f64 = 0.0;
    let mut points = ats.to_vec();
    for (ti, at) in ats.iter().enumerate() {
        let ga = &analytic[ti];
        for i in 0..at.numel() {
            let base = at.data()[i];
            points[ti].data_mut()[i] = base + eps;
            let (_, _, _, yp) = eval_once(&f, &points, false)?;
            points[ti].data_mut()[i] = base - eps;
            let (_, _, _, ym) = eval_once(&f, &points, false)?;
            points[ti].data_mut()[i] = base;
            let numeric = (yp - ym) / (2.0 * eps);
            let a = if ga.is_empty() { 0.0 } else { ga[i] };
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Single-tensor form of [`grad_check_multi`].
pub fn grad_check<F>(f: F, at: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    grad_check_multi(
        |tape, ids| f(tape, ids[0]),
        std::slice::from_ref(at),
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_for_central_differences() {
        let at = Tensor::full(vec![4], 1.0);
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum_all(sq)
            },
            &at,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "quadratic should be exact, err = {err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let at = Tensor::full(vec![2], 1.0);
        assert!(grad_check(|tape, x| tape.sum_all(x), &at, 0.0).is_err());
        assert!(grad_check(|tape, x| tape.sum_all(x), &at, 0.5).is_err());
    }

    #[test]
    fn rejects_non_scalar() {
        let at = Tensor::full(vec![2], 1.0);
        assert!(grad_check(|tape, x| tape.mul(x, x), &at, 1e-5).is_err());
    }
}
