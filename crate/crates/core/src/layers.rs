//! Network building blocks: conv + norm layers, residual blocks, and the
//! shared stem (7x7 stride-2 conv, norm, relu, 3x3 stride-2 max pool = /4).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{init_uniform, Binding, ParamId, ParamRegistry};
use crate::tape::{channel_stats, NodeId, Tape};
use crate::tensor::Tensor;

/// Exponential-average factor for running norm statistics in batch mode.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Per-sample statistics in both phases (default).
    Instance,
    /// Per-sample statistics while training, running averages at eval.
    Batch,
}

/// Deferred running-statistics update, applied after the forward pass so the
/// registry stays immutable while a tape borrows it.
#[derive(Debug)]
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn apply_stat_updates(updates: Vec<StatUpdate>, reg: &mut ParamRegistry) {
    for u in updates {
        let m = reg.get_mut(u.mean_id);
        for (r, b) in m.value.data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
        }
        let v = reg.get_mut(u.var_id);
        for (r, b) in v.value.data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
        }
    }
}

/// One forward pass: a tape, the parameter->leaf binding, the phase, and any
/// pending running-stat updates.
pub struct Fwd<'t> {
    pub tape: &'t mut Tape,
    pub bind: Binding,
    pub phase: Phase,
    pub updates: Vec<StatUpdate>,
}

impl<'t> Fwd<'t> {
    pub fn new(tape: &'t mut Tape, phase: Phase) -> Self {
        Fwd {
            tape,
            bind: Binding::new(),
            phase,
            updates: Vec::new(),
        }
    }

    pub fn leaf(&mut self, reg: &ParamRegistry, id: ParamId) -> NodeId {
        self.bind.bind(self.tape, reg, id)
    }

    /// Releases the tape borrow, handing back the binding and stat updates.
    pub fn finish(self) -> (Binding, Vec<StatUpdate>) {
        (self.bind, self.updates)
    }
}

#[derive(Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = reg.add(
            &format!("{name}/weight"),
            init_uniform(rng, vec![c_out, c_in, k, k], fan_in),
        )?;
        let bias = if bias {
            Some(reg.add(&format!("{name}/bias"), Tensor::zeros(vec![c_out]))?)
        } else {
            None
        };
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, f: &mut Fwd, reg: &ParamRegistry, x: NodeId) -> Result<NodeId> {
        let w = f.leaf(reg, self.weight);
        let y = f.tape.conv2d(x, w, self.stride, self.padding)?;
        match self.bias {
            Some(b) => {
                let bn = f.leaf(reg, b);
                f.tape.bias_add_chan(y, bn)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
}

impl NormLayer {
    pub fn init(reg: &mut ParamRegistry, name: &str, c: usize) -> Result<Self> {
        let gamma = reg.add(&format!("{name}/gain"), Tensor::full(vec![c], 1.0))?;
        let beta = reg.add(&format!("{name}/shift"), Tensor::zeros(vec![c]))?;
        let run_mean = reg.add(&format!("{name}/running_mean"), Tensor::zeros(vec![c]))?;
        let run_var = reg.add(&format!("{name}/running_var"), Tensor::full(vec![c], 1.0))?;
        // Running statistics are state, not learned weights.
        for id in [run_mean, run_var] {
            reg.get_mut(id).trainable = false;
        }
        Ok(NormLayer {
            gamma,
            beta,
            run_mean,
            run_var,
        })
    }

    pub fn forward(
        &self,
        f: &mut Fwd,
        reg: &ParamRegistry,
        x: NodeId,
        mode: NormMode,
    ) -> Result<NodeId> {
        let g = f.leaf(reg, self.gamma);
        let b = f.leaf(reg, self.beta);
        match (mode, f.phase) {
            (NormMode::Instance, _) | (NormMode::Batch, Phase::Train) => {
                if mode == NormMode::Batch {
                    let t = f.tape.value(x);
                    let (c, h, w) = t.dims3()?;
                    let (mean, var) = channel_stats(t.data(), c, h * w);
                    f.updates.push(StatUpdate {
                        mean_id: self.run_mean,
                        var_id: self.run_var,
                        mean,
                        var,
                    });
                }
                f.tape.channel_norm(x, g, b)
            }
            (NormMode::Batch, Phase::Eval) => {
                let mu = reg.value(self.run_mean).data().to_vec();
                let var = reg.value(self.run_var).data().to_vec();
                f.tape.norm_fixed(x, g, b, mu, var)
            }
        }
    }
}

/// Basic residual block: two 3x3 convs with norms; the first carries the
/// stride. The shortcut is a strided 1x1 projection when shape changes.
#[derive(Debug)]
pub struct ResBlock {
    conv1: ConvLayer,
    norm1: NormLayer,
    conv2: ConvLayer,
    norm2: NormLayer,
    shortcut: Option<(ConvLayer, NormLayer)>,
}

impl ResBlock {
    pub fn init(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = ConvLayer::init(reg, rng, &format!("{name}/conv1"), c_in, c_out, 3, stride, 1, false)?;
        let norm1 = NormLayer::init(reg, &format!("{name}/norm1"), c_out)?;
        let conv2 = ConvLayer::init(reg, rng, &format!("{name}/conv2"), c_out, c_out, 3, 1, 1, false)?;
        let norm2 = NormLayer::init(reg, &format!("{name}/norm2"), c_out)?;
        let shortcut = if stride != 1 || c_in != c_out {
            let sc = ConvLayer::init(reg, rng, &format!("{name}/proj"), c_in, c_out, 1, stride, 0, false)?;
            let sn = NormLayer::init(reg, &format!("{name}/proj_norm"), c_out)?;
            Some((sc, sn))
        } else {
            None
        };
        Ok(ResBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        })
    }

    pub fn forward(
        &self,
        f: &mut Fwd,
        reg: &ParamRegistry,
        x: NodeId,
        mode: NormMode,
    ) -> Result<NodeId> {
        let mut y = self.conv1.forward(f, reg, x)?;
        y = self.norm1.forward(f, reg, y, mode)?;
        y = f.tape.relu(y)?;
        y = self.conv2.forward(f, reg, y)?;
        y = self.norm2.forward(f, reg, y, mode)?;
        let sc = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(f, reg, x)?;
                norm.forward(f, reg, s, mode)?
            }
            None => x,
        };
        let sum = f.tape.add(y, sc)?;
        f.tape.relu(sum)
    }
}

/// Stem that downsamples by exactly 4: 7x7 stride-2 pad-3 conv, norm, relu,
/// then 3x3 stride-2 pad-1 max pool.
#[derive(Debug)]
pub struct Stem {
    conv: ConvLayer,
    norm: NormLayer,
}

impl Stem {
    pub fn init(reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, name: &str, c_out: usize) -> Result<Self> {
        let conv = ConvLayer::init(reg, rng, &format!("{name}/conv"), 1, c_out, 7, 2, 3, false)?;
        let norm = NormLayer::init(reg, &format!("{name}/norm"), c_out)?;
        Ok(Stem { conv, norm })
    }

    pub fn forward(
        &self,
        f: &mut Fwd,
        reg: &ParamRegistry,
        x: NodeId,
        mode: NormMode,
    ) -> Result<NodeId> {
        let mut y = self.conv.forward(f, reg, x)?;
        y = self.norm.forward(f, reg, y, mode)?;
        y = f.tape.relu(y)?;
        f.tape.max_pool2d(y, 3, 2, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn stem_downsamples_by_four() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(1);
        let stem = Stem::init(&mut reg, &mut rng, "stem", 8).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 64, 48]));
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let y = stem.forward(&mut f, &reg, x, NormMode::Instance).unwrap();
        assert_eq!(tape.value(y).shape(), &[8, 16, 12]);
    }

    #[test]
    fn res_block_keeps_shape_at_stride_one() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(2);
        let b = ResBlock::init(&mut reg, &mut rng, "b", 4, 4, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![4, 6, 6], 0.3));
        let mut f = Fwd::new(&mut tape, Phase::Train);
        let y = b.forward(&mut f, &reg, x, NormMode::Instance).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 6, 6]);
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn res_block_stride_four_projects() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(3);
        let b = ResBlock::init(&mut reg, &mut rng, "b", 4, 8, 4).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![4, 16, 8], 1.0));
        let mut f = Fwd::new(&mut tape, Phase::Train);
        let y = b.forward(&mut f, &reg, x, NormMode::Instance).unwrap();
        assert_eq!(tape.value(y).shape(), &[8, 4, 2]);
    }

    #[test]
    fn batch_mode_updates_running_stats_and_freezes_at_eval() {
        let mut reg = ParamRegistry::new();
        let norm = NormLayer::init(&mut reg, "n", 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, -1.0, -3.0]).unwrap());
        let mut f = Fwd::new(&mut tape, Phase::Train);
        let _ = norm.forward(&mut f, &reg, x, NormMode::Batch).unwrap();
        let (_, updates) = f.finish();
        assert_eq!(updates.len(), 1);
        assert_eq!(updates[0].mean, vec![2.0, -2.0]);
        apply_stat_updates(updates, &mut reg);
        // running_mean = 0.9*0 + 0.1*batch
        let rm = reg.value(norm.run_mean).data();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] + 0.2).abs() < 1e-12);
        // Eval uses the running stats, not the input's own.
        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(Tensor::new(vec![2, 1, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap());
        let mut f2 = Fwd::new(&mut tape2, Phase::Eval);
        let y2 = norm.forward(&mut f2, &reg, x2, NormMode::Batch).unwrap();
        // A constant input through per-sample stats would be all zeros;
        // running stats give a non-zero standardized value.
        assert!(tape2.value(y2).data()[0].abs() > 1.0);
    }

    #[test]
    fn instance_mode_ignores_running_stats() {
        let mut reg = ParamRegistry::new();
        let norm = NormLayer::init(&mut reg, "n", 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let y = norm.forward(&mut f, &reg, x, NormMode::Instance).unwrap();
        let (_, updates) = f.finish();
        assert!(updates.is_empty());
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
