//! Central-difference verification of reverse-mode gradients.

use crate::error::{GlamError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Builds the graph from leaves and returns the scalar root.
pub type BuildFn<'a> = &'a dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

fn eval(build: BuildFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let v = tape.value(root);
    if v.numel() != 1 {
        return Err(GlamError::shape(format!(
            "grad_check: root must be scalar, has {} elements",
            v.numel()
        )));
    }
    let f = v.item();
    if !f.is_finite() {
        return Err(GlamError::NonFinite("grad_check: non-finite function value".into()));
    }
    Ok(f)
}

/// Worst relative error between reverse-mode gradients and central finite
/// differences, over every coordinate of every input.
pub fn grad_check(build: BuildFn, inputs: &[Tensor], eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(GlamError::config("grad_check: eps must be positive"));
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    eval(build, inputs)?; // validates scalar + finiteness
    tape.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id)).collect();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(build, &plus)? - eval(build, &minus)?) / (2.0 * eps);
            let a = analytic[i].data()[j];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(GlamError::NonFinite(format!(
                    "grad_check: non-finite gradient at input {i} coord {j}"
                )));
            }
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-8 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / denom
            };
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let build: BuildFn = &|tape, ids| tape.mul(ids[0], ids[0]);
        let err = grad_check(build, &[Tensor::scalar(3.0)], 1e-4).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let build: BuildFn = &|tape, ids| tape.sigmoid(ids[0]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        tape.backward(s).unwrap();
        assert!((tape.grad(x).item() - 0.25).abs() < 1e-12);
        let err = grad_check(build, &[Tensor::scalar(0.0)], 1e-4).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn rejects_non_scalar_root() {
        let build: BuildFn = &|tape, ids| tape.relu(ids[0]);
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(build, &[t], 1e-4).is_err());
    }
}
