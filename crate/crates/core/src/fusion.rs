//! Fusion: a single linear layer over [z_g, z_l] producing the fused
//! prediction, and the weighted combination of global and local saliency
//! into the final map S_c.

use rand_chacha::ChaCha8Rng;

use crate::error::{GlamError, Result};
use crate::layers::Fwd;
use crate::params::{init_uniform, ParamId, ParamRegistry};
use crate::saliency::{SaliencyMap, N_CLASSES};
use crate::tape::{nearest_index, NodeId};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct FusionHead {
    pub weight: ParamId, // [2, z_g_dim + z_l_dim]
    pub bias: ParamId,   // [2], zero-initialized so the bias-free form is the start state
}

impl FusionHead {
    pub fn init(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        z_g_dim: usize,
        z_l_dim: usize,
    ) -> Result<Self> {
        let d = z_g_dim + z_l_dim;
        Ok(FusionHead {
            weight: reg.add("fusion/weight", init_uniform(rng, vec![N_CLASSES, d], d))?,
            bias: reg.add("fusion/bias", Tensor::zeros(vec![N_CLASSES]))?,
        })
    }

    /// y_hat_f = sigmoid(W [z_g, z_l] + b) -> [2].
    pub fn fuse(&self, f: &mut Fwd, reg: &ParamRegistry, z_g: NodeId, z_l: NodeId) -> Result<NodeId> {
        let w = f.leaf(reg, self.weight);
        let b = f.leaf(reg, self.bias);
        let expect = f.tape.value(w).shape()[1];
        let got = f.tape.value(z_g).numel() + f.tape.value(z_l).numel();
        if got != expect {
            return Err(GlamError::shape(format!(
                "fuse: z_g + z_l length {got} does not match weight width {expect}"
            )));
        }
        let cat = f.tape.concat_vec(&[z_g, z_l])?;
        let logits = f.tape.matvec(w, cat)?;
        let shifted = f.tape.add(logits, b)?;
        f.tape.sigmoid(shifted)
    }
}

/// S_c = gamma_c * S_g + (1 - gamma_c) * S_l on S_l's grid; S_g is resampled
/// (nearest) first. gamma_c = 0.5 is the plain average.
pub fn combine_saliency(sg: &SaliencyMap, sl: &SaliencyMap, gamma_c: f64) -> Result<SaliencyMap> {
    if !(0.0..=1.0).contains(&gamma_c) {
        return Err(GlamError::config(format!("gamma_c {gamma_c} outside [0, 1]")));
    }
    if sg.classes() != sl.classes() {
        return Err(GlamError::shape(format!(
            "combine_saliency: {} vs {} classes",
            sg.classes(),
            sl.classes()
        )));
    }
    let (gh, gw) = sg.grid();
    let (lh, lw) = sl.grid();
    let classes = sl.classes();
    let mut out = vec![0.0; classes * lh * lw];
    for c in 0..classes {
        let gp = &sg.values.data()[c * gh * gw..(c + 1) * gh * gw];
        let lp = &sl.values.data()[c * lh * lw..(c + 1) * lh * lw];
        let op = &mut out[c * lh * lw..(c + 1) * lh * lw];
        for i in 0..lh {
            let si = nearest_index(i, gh, lh);
            for j in 0..lw {
                let sj = nearest_index(j, gw, lw);
                op[i * lw + j] = gamma_c * gp[si * gw + sj] + (1.0 - gamma_c) * lp[i * lw + j];
            }
        }
    }
    SaliencyMap::new(Tensor::new(vec![classes, lh, lw], out)?, sl.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Phase;
    use crate::rng::rng_from;
    use crate::tape::Tape;

    #[test]
    fn zero_params_give_half() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(1);
        let head = FusionHead::init(&mut reg, &mut rng, 3, 4).unwrap();
        let id = head.weight;
        reg.get_mut(id).value = Tensor::zeros(vec![2, 7]);
        let mut tape = Tape::new();
        let zg = tape.leaf(Tensor::full(vec![3], 2.0));
        let zl = tape.leaf(Tensor::full(vec![4], -1.0));
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let y = head.fuse(&mut f, &reg, zg, zl).unwrap();
        drop(f);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn logit_ln3_gives_three_quarters() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(2);
        let head = FusionHead::init(&mut reg, &mut rng, 1, 1).unwrap();
        // w = [ln 3, 0] per class, z = [1, anything] -> logit ln 3
        reg.get_mut(head.weight).value =
            Tensor::new(vec![2, 2], vec![3.0f64.ln(), 0.0, 3.0f64.ln(), 0.0]).unwrap();
        let mut tape = Tape::new();
        let zg = tape.leaf(Tensor::full(vec![1], 1.0));
        let zl = tape.leaf(Tensor::full(vec![1], 9.9));
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let y = head.fuse(&mut f, &reg, zg, zl).unwrap();
        drop(f);
        for &v in tape.value(y).data() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_z_and_inverse_scaling_w_is_invariant() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(3);
        let head = FusionHead::init(&mut reg, &mut rng, 2, 2).unwrap();
        let zg = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let zl = Tensor::new(vec![2], vec![1.5, 0.75]).unwrap();
        let run = |reg: &ParamRegistry, zg: &Tensor, zl: &Tensor| {
            let mut tape = Tape::new();
            let a = tape.leaf(zg.clone());
            let b = tape.leaf(zl.clone());
            let mut f = Fwd::new(&mut tape, Phase::Eval);
            let y = head.fuse(&mut f, reg, a, b).unwrap();
            drop(f);
            tape.value(y).data().to_vec()
        };
        let base = run(&reg, &zg, &zl);
        let c = 4.0;
        let scaled_w = reg.value(head.weight).map(|v| v / c);
        reg.get_mut(head.weight).value = scaled_w;
        let scaled = run(&reg, &zg.map(|v| v * c), &zl.map(|v| v * c));
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_endpoints_and_average() {
        let sg = SaliencyMap::new(Tensor::full(vec![2, 2, 2], 0.4), 16).unwrap();
        let sl = SaliencyMap::new(Tensor::full(vec![2, 8, 8], 0.8), 4).unwrap();
        let mid = combine_saliency(&sg, &sl, 0.5).unwrap();
        assert_eq!(mid.grid(), (8, 8));
        assert_eq!(mid.scale, 4);
        for &v in mid.values.data() {
            assert!((v - 0.6).abs() < 1e-15);
        }
        let only_l = combine_saliency(&sg, &sl, 0.0).unwrap();
        assert_eq!(only_l.values.data(), sl.values.data());
        let only_g = combine_saliency(&sg, &sl, 1.0).unwrap();
        assert!(only_g.values.data().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn combine_is_monotone_per_cell() {
        let mut sg = SaliencyMap::new(Tensor::full(vec![1, 2, 2], 0.3), 8).unwrap();
        let sl = SaliencyMap::new(Tensor::full(vec![1, 4, 4], 0.5), 4).unwrap();
        let before = combine_saliency(&sg, &sl, 0.5).unwrap();
        sg.values.data_mut()[0] = 0.9; // raise one S_g cell
        let after = combine_saliency(&sg, &sl, 0.5).unwrap();
        for (a, b) in after.values.data().iter().zip(before.values.data()) {
            assert!(a >= b);
        }
        assert!(after.values.data()[0] > before.values.data()[0]);
    }
}
