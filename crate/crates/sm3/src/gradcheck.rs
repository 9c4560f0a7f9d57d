//! Finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// finite differences, coordinate by coordinate.
///
/// `build` receives a fresh tape plus one var per input tensor and must
/// return the scalar output node. Returns the maximum relative error with
/// denominator `max(|analytic|, |numeric|, 1e-6)`; the floor keeps
/// near-zero gradient coordinates from amplifying f64 roundoff in the
/// central differences (noise ~1e-16 / (2 * eps)).
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> ValueId,
{
    let eval = |inputs: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = build(&mut tape, &ids);
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check probe".into()));
        }
        tape.backward(out);
        Ok((v, ids.iter().map(|&id| tape.grad(id)).collect()))
    };

    let (_, analytic) = eval(params)?;
    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ci] += eps;
            let (fp, _) = eval(&plus)?;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ci] -= eps;
            let (fm, _) = eval(&minus)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial() {
        // f(x) = x² at x = 3: analytic gradient 6
        let err = grad_check(
            |tape, ids| tape.mul(ids[0], ids[0]),
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function() {
        let err = grad_check(
            |tape, ids| {
                let c = tape.constant(Tensor::scalar(4.0));
                let zero = tape.scale(ids[0], 0.0);
                tape.add(c, zero)
            },
            &[Tensor::scalar(1.5)],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn bilinear() {
        let err = grad_check(
            |tape, ids| tape.mul(ids[0], ids[1]),
            &[Tensor::scalar(2.0), Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn composite_ops() {
        // layer norm + tanh + matmul chain against finite differences
        let w = Tensor::matrix(3, 3, vec![0.2, -0.5, 0.1, 0.7, 0.3, -0.2, 0.05, 0.4, -0.6]).unwrap();
        let g = Tensor::vector(vec![1.0, 0.9, 1.1]);
        let b = Tensor::vector(vec![0.0, 0.1, -0.1]);
        let err = grad_check(
            |tape, ids| {
                let x = tape.constant(
                    Tensor::matrix(2, 3, vec![0.3, -1.0, 0.5, 1.2, 0.0, -0.7]).unwrap(),
                );
                let h = tape.matmul(x, ids[0]);
                let h = tape.layer_norm_rows(h, ids[1], ids[2]);
                let h = tape.tanh(h);
                tape.mean_all(h)
            },
            &[w, g, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }
}
