//! Training losses. All build scalar nodes on an existing tape so gradients
//! flow back into the network parameters.
//!
//! - global:  sum over scales of BCE(y, y_tilde_n) + lambda * sum_n L1(S_n)
//! - local:   BCE(y, y_hat_l) + lambda * sum_k L1(A_k)
//! - fused:   BCE(y, y_hat_f)
//! - joint:   global + local + fused

use crate::error::Result;
use crate::tape::{NodeId, Tape};

/// Per-scale BCE terms plus L1 sparsity on each saliency map.
pub fn global_loss(
    tape: &mut Tape,
    y_tilde: &[NodeId],
    saliency: &[NodeId],
    label: &[f64; 2],
    lambda: f64,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(y_tilde.len() + saliency.len());
    for &y in y_tilde {
        terms.push(tape.bce_sum(y, label)?);
    }
    for &s in saliency {
        let l1 = tape.l1_sum(s)?;
        terms.push(tape.scale(l1, lambda)?);
    }
    tape.add_n(&terms)
}

/// BCE on the aggregated patch prediction plus L1 on each patch map.
pub fn local_loss(
    tape: &mut Tape,
    y_hat_l: NodeId,
    patch_maps: &[NodeId],
    label: &[f64; 2],
    lambda: f64,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(1 + patch_maps.len());
    terms.push(tape.bce_sum(y_hat_l, label)?);
    for &a in patch_maps {
        let l1 = tape.l1_sum(a)?;
        terms.push(tape.scale(l1, lambda)?);
    }
    tape.add_n(&terms)
}

/// BCE on the fused prediction.
pub fn fused_loss(tape: &mut Tape, y_hat_f: NodeId, label: &[f64; 2]) -> Result<NodeId> {
    tape.bce_sum(y_hat_f, label)
}

/// Sum of the three stage losses for joint fine-tuning.
pub fn joint_loss(tape: &mut Tape, global: NodeId, local: NodeId, fused: NodeId) -> Result<NodeId> {
    tape.add_n(&[global, local, fused])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn bce(y: f64, q: f64) -> f64 {
        -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
    }

    #[test]
    fn global_loss_matches_hand_sum() {
        let mut tape = Tape::new();
        let label = [1.0, 0.0];
        let y1 = tape.leaf(Tensor::new(vec![2], vec![0.8, 0.3]).unwrap());
        let y2 = tape.leaf(Tensor::new(vec![2], vec![0.6, 0.1]).unwrap());
        let s1 = tape.leaf(Tensor::new(vec![1, 2, 2], vec![0.5, -0.25, 0.0, 1.0]).unwrap());
        let lambda = 0.01;
        let loss = global_loss(&mut tape, &[y1, y2], &[s1], &label, lambda).unwrap();
        let want = bce(1.0, 0.8) + bce(0.0, 0.3) + bce(1.0, 0.6) + bce(0.0, 0.1)
            + lambda * (0.5 + 0.25 + 0.0 + 1.0);
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn local_loss_matches_hand_sum() {
        let mut tape = Tape::new();
        let label = [0.0, 1.0];
        let y = tape.leaf(Tensor::new(vec![2], vec![0.2, 0.9]).unwrap());
        let a1 = tape.leaf(Tensor::full(vec![1, 2, 2], 0.25));
        let a2 = tape.leaf(Tensor::full(vec![1, 2, 2], -0.5));
        let lambda = 0.1;
        let loss = local_loss(&mut tape, y, &[a1, a2], &label, lambda).unwrap();
        let want = bce(0.0, 0.2) + bce(1.0, 0.9) + lambda * (4.0 * 0.25) + lambda * (4.0 * 0.5);
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn fused_and_joint_compose() {
        let mut tape = Tape::new();
        let label = [1.0, 1.0];
        let y = tape.leaf(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let f = fused_loss(&mut tape, y, &label).unwrap();
        let fv = tape.value(f).item();
        assert!((fv - 2.0 * bce(1.0, 0.5)).abs() < 1e-12);
        let g = tape.leaf(Tensor::scalar(3.0));
        let l = tape.leaf(Tensor::scalar(4.0));
        let t = joint_loss(&mut tape, g, l, f).unwrap();
        assert!((tape.value(t).item() - (7.0 + fv)).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_drops_sparsity_term() {
        let mut tape = Tape::new();
        let label = [1.0, 0.0];
        let y = tape.leaf(Tensor::new(vec![2], vec![0.7, 0.2]).unwrap());
        let s = tape.leaf(Tensor::full(vec![1, 3, 3], 123.0));
        let loss = global_loss(&mut tape, &[y], &[s], &label, 0.0).unwrap();
        let want = bce(1.0, 0.7) + bce(0.0, 0.2);
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn losses_backprop_to_inputs() {
        let mut tape = Tape::new();
        let label = [1.0, 0.0];
        let logits = tape.leaf(Tensor::new(vec![2], vec![0.3, -0.4]).unwrap());
        let probs = tape.sigmoid(logits).unwrap();
        let s = tape.leaf(Tensor::new(vec![1, 1, 2], vec![0.5, -0.5]).unwrap());
        let loss = global_loss(&mut tape, &[probs], &[s], &label, 0.5).unwrap();
        tape.backward(loss).unwrap();
        // d BCE/d logit = q - y for sigmoid+BCE
        let q0 = 1.0 / (1.0 + (-0.3f64).exp());
        let q1 = 1.0 / (1.0 + 0.4f64.exp());
        let g = tape.grad(logits);
        assert!((g.data()[0] - (q0 - 1.0)).abs() < 1e-12);
        assert!((g.data()[1] - q1).abs() < 1e-12);
        let gs = tape.grad(s);
        assert_eq!(gs.data(), &[0.5, -0.5]);
    }
}
