//! Differentiable primitives, seeded randomness and a finite-difference
//! gradient checker.

mod checks;
mod graph;
mod rng;
mod tensor;

pub use checks::{primitive_suite, PrimitiveCheck, PRIMITIVES};
pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use rng::RngState;
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

use crate::error::{shape_err, Error, Result};

/// Softmax of `v` along `axis`. Stable for large magnitudes.
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= v.ndim().max(1) {
        return Err(Error::Parameter(format!(
            "softmax axis {axis} out of range for shape {:?}",
            v.shape()
        )));
    }
    v.ensure_finite("softmax")?;
    let shape = if v.ndim() == 0 { vec![1] } else { v.shape().to_vec() };
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = v.data().to_vec();
    let mut lane = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * extent + e) * inner + i;
            for (e, slot) in lane.iter_mut().enumerate() {
                *slot = out[idx(e)];
            }
            softmax_in_place(&mut lane);
            for (e, &val) in lane.iter().enumerate() {
                out[idx(e)] = val;
            }
        }
    }
    Tensor::new(v.shape(), out)
}

/// One Gumbel-softmax sample from a logit vector (forward value only).
///
/// With `hard` the result is an exact one-hot vector. Use
/// [`Graph::gumbel_softmax`] when the straight-through gradient is needed.
pub fn gumbel_softmax(logits: &Tensor, tau: f64, hard: bool, rng: &mut RngState) -> Result<Tensor> {
    if logits.ndim() != 1 {
        return Err(shape_err("gumbel_softmax", format!("expected a vector, got {:?}", logits.shape())));
    }
    logits.ensure_finite("gumbel_softmax")?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let s = g.gumbel_softmax(l, tau, hard, rng)?;
    Ok(g.value(s).clone())
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences. The error per coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`; the maximum is reported.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, Var) -> Var,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv);
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.value(out).shape()
        )));
    }
    let grads = g.backward(out)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let mut eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let o = f(&mut g, v);
        g.check()?;
        g.value(o).item()
    };
    let mut numeric = vec![0.0; x.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * eps);
    }
    let numeric = Tensor::new(x.shape(), numeric)?;
    let max_rel_err = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_err,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(&[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&Tensor::vector(&[2f64.ln(), 0.0]), 0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let s = softmax(&Tensor::vector(&[1000.0, 0.0]), 0).unwrap();
        assert!(s.is_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_along_first_axis() {
        let t = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(softmax(&t, 2).is_err());
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::vector(&[f64::NAN, 0.0]);
        assert!(matches!(softmax(&t, 0), Err(Error::NumericInput { .. })));
        let t = Tensor::vector(&[f64::INFINITY, 0.0]);
        assert!(softmax(&t, 0).is_err());
    }

    #[test]
    fn gumbel_hard_symmetric_is_one_hot() {
        let mut rng = RngState::new(0);
        let s = gumbel_softmax(&Tensor::vector(&[0.0, 0.0, 0.0]), 1.0, true, &mut rng).unwrap();
        assert_eq!(s.sum(), 1.0);
        assert_eq!(s.data().iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn gumbel_rejects_bad_temperature() {
        let mut rng = RngState::new(0);
        let l = Tensor::vector(&[1.0, 2.0]);
        assert!(matches!(gumbel_softmax(&l, 0.0, true, &mut rng), Err(Error::Parameter(_))));
        let m = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert!(gumbel_softmax(&m, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn grad_check_polynomial() {
        let r = grad_check(
            |g, x| {
                let sq = g.mul(x, x);
                g.sum(sq)
            },
            &Tensor::vector(&[1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.analytic.data(), &[2.0, 4.0]);
        assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
    }

    #[test]
    fn grad_check_contract_errors() {
        let x = Tensor::vector(&[1.0, 2.0]);
        assert!(matches!(grad_check(|_, x| x, &x, 1e-5), Err(Error::Contract(_))));
        assert!(matches!(grad_check(|g, x| g.sum(x), &x, 1e-2), Err(Error::Parameter(_))));
    }
}
