//! Global network: shared /4 stem, three residual stages producing feature
//! maps at /16, /32, /64 (defaults), per-scale saliency heads, top-t%
//! predictions, the gamma-weighted combined map S_g, and the image vector z_g.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlamError, Result};
use crate::layers::{Fwd, NormMode, Phase, ResBlock, Stem};
use crate::params::{init_uniform, ParamId, ParamRegistry};
use crate::saliency::{SaliencyMap, N_CLASSES};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

fn default_channels() -> [usize; 3] {
    [64, 128, 256]
}
fn default_downsample() -> [usize; 3] {
    [16, 32, 64]
}
fn default_blocks() -> [usize; 3] {
    [2, 2, 2]
}
fn default_stem_channels() -> usize {
    16
}
fn default_t_global() -> f64 {
    2.0
}
fn default_gamma() -> [f64; 3] {
    [0.2, 0.6, 0.2]
}
fn default_norm() -> NormMode {
    NormMode::Instance
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalConfig {
    pub input_h: usize,
    pub input_w: usize,
    #[serde(default = "default_channels")]
    pub channels: [usize; 3],
    #[serde(default = "default_downsample")]
    pub downsample: [usize; 3],
    #[serde(default = "default_blocks")]
    pub blocks: [usize; 3],
    #[serde(default = "default_stem_channels")]
    pub stem_channels: usize,
    #[serde(default = "default_t_global")]
    pub t_global: f64,
    #[serde(default = "default_gamma")]
    pub gamma: [f64; 3],
    #[serde(default = "default_norm")]
    pub norm: NormMode,
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<()> {
        let deepest = self.downsample[2];
        if self.input_h % deepest != 0 || self.input_w % deepest != 0 {
            return Err(GlamError::config(format!(
                "input {}x{} not divisible by deepest stride {}",
                self.input_h, self.input_w, deepest
            )));
        }
        if self.downsample[0] % 4 != 0 {
            return Err(GlamError::config("first downsample factor must be a multiple of 4 (stem)"));
        }
        let mut prev = 4;
        for (i, &d) in self.downsample.iter().enumerate() {
            if d % prev != 0 || d < prev {
                return Err(GlamError::config(format!(
                    "downsample factors must be increasing multiples; factor {i} = {d} after {prev}"
                )));
            }
            prev = d;
        }
        let gsum: f64 = self.gamma.iter().sum();
        if self.gamma.iter().any(|&g| g < 0.0) || (gsum - 1.0).abs() > 1e-9 {
            return Err(GlamError::config(format!(
                "gamma must be nonnegative and sum to 1, got {:?}",
                self.gamma
            )));
        }
        if !(self.t_global > 0.0 && self.t_global <= 100.0) {
            return Err(GlamError::config(format!(
                "t_global {} outside (0, 100]",
                self.t_global
            )));
        }
        if self.blocks.iter().any(|&b| b == 0) || self.stem_channels == 0 {
            return Err(GlamError::config("blocks and stem_channels must be >= 1"));
        }
        Ok(())
    }

    /// Saliency grid for scale `n`.
    pub fn grid(&self, n: usize) -> (usize, usize) {
        (
            self.input_h / self.downsample[n],
            self.input_w / self.downsample[n],
        )
    }
}

#[derive(Debug)]
pub struct GlobalNet {
    stem: Stem,
    stages: Vec<Vec<ResBlock>>,
    heads: Vec<(ParamId, ParamId)>, // per scale: 1x1 conv weight + bias
    pub config: GlobalConfig,
}

/// Tape handles for everything downstream consumers need.
#[derive(Debug, Clone)]
pub struct GlobalNodes {
    /// Per-scale saliency maps S_n, shape [2, h_n, w_n].
    pub s: [NodeId; 3],
    /// Per-scale predictions from top-t pooling, shape [2].
    pub y_tilde: [NodeId; 3],
    /// Mean of the per-scale predictions, shape [2].
    pub y_hat_g: NodeId,
    /// Combined saliency map at the finest global grid, shape [2, H/d0, W/d0].
    pub s_g: NodeId,
    /// Spatial max of the deepest feature map, shape [channels[2]].
    pub z_g: NodeId,
}

/// Plain-tensor outputs for inference and evaluation.
#[derive(Debug)]
pub struct GlobalOutput {
    pub s: [SaliencyMap; 3],
    pub s_g: SaliencyMap,
    pub y_tilde: [[f64; N_CLASSES]; 3],
    pub y_hat_g: [f64; N_CLASSES],
    pub z_g: Vec<f64>,
}

impl GlobalNet {
    pub fn init(reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, config: GlobalConfig) -> Result<Self> {
        config.validate()?;
        let stem = Stem::init(reg, rng, "global/stem", config.stem_channels)?;
        let mut stages = Vec::new();
        let mut c_in = config.stem_channels;
        let mut factor = 4;
        for (si, (&c_out, &down)) in config.channels.iter().zip(&config.downsample).enumerate() {
            let stride = down / factor;
            factor = down;
            let mut blocks = Vec::new();
            for bi in 0..config.blocks[si] {
                let s = if bi == 0 { stride } else { 1 };
                let cin = if bi == 0 { c_in } else { c_out };
                blocks.push(ResBlock::init(
                    reg,
                    rng,
                    &format!("global/stage{si}/block{bi}"),
                    cin,
                    c_out,
                    s,
                )?);
            }
            stages.push(blocks);
            c_in = c_out;
        }
        let mut heads = Vec::new();
        for (si, &c) in config.channels.iter().enumerate() {
            let w = reg.add(
                &format!("global/head{si}/weight"),
                init_uniform(rng, vec![N_CLASSES, c, 1, 1], c),
            )?;
            let b = reg.add(&format!("global/head{si}/bias"), Tensor::zeros(vec![N_CLASSES]))?;
            heads.push((w, b));
        }
        Ok(GlobalNet {
            stem,
            stages,
            heads,
            config,
        })
    }

    /// Runs the network on one image node, recording onto the tape.
    pub fn forward(&self, f: &mut Fwd, reg: &ParamRegistry, image: NodeId) -> Result<GlobalNodes> {
        let (c, h, w) = f.tape.value(image).dims3()?;
        if c != 1 || h != self.config.input_h || w != self.config.input_w {
            return Err(GlamError::shape(format!(
                "global forward: image [{c}, {h}, {w}] does not match config {}x{}",
                self.config.input_h, self.config.input_w
            )));
        }
        let mode = self.config.norm;
        let mut x = self.stem.forward(f, reg, image, mode)?;
        let mut feats = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(f, reg, x, mode)?;
            }
            feats.push(x);
        }

        let mut s = Vec::with_capacity(3);
        let mut y_tilde = Vec::with_capacity(3);
        for (n, &feat) in feats.iter().enumerate() {
            let (wid, bid) = self.heads[n];
            let wn = f.leaf(reg, wid);
            let bn = f.leaf(reg, bid);
            let logits = f.tape.conv2d(feat, wn, 1, 0)?;
            let logits = f.tape.bias_add_chan(logits, bn)?;
            let sn = f.tape.sigmoid(logits)?;
            s.push(sn);
            y_tilde.push(f.tape.top_t_pool(sn, self.config.t_global)?);
        }
        let sum = f.tape.add_n(&y_tilde)?;
        let y_hat_g = f.tape.scale(sum, 1.0 / 3.0)?;

        let (th, tw) = self.config.grid(0);
        let mut weighted = Vec::with_capacity(3);
        for (n, &sn) in s.iter().enumerate() {
            let up = f.tape.resample_nearest(sn, th, tw)?;
            weighted.push(f.tape.scale(up, self.config.gamma[n])?);
        }
        let s_g = f.tape.add_n(&weighted)?;
        let z_g = f.tape.spatial_max(feats[2])?;

        Ok(GlobalNodes {
            s: [s[0], s[1], s[2]],
            y_tilde: [y_tilde[0], y_tilde[1], y_tilde[2]],
            y_hat_g,
            s_g,
            z_g,
        })
    }

    /// Inference convenience: fresh tape, eval phase, plain tensors out.
    pub fn infer(&self, reg: &ParamRegistry, image: &Tensor) -> Result<GlobalOutput> {
        let mut tape = Tape::new();
        let img = tape.leaf(image.clone());
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let nodes = self.forward(&mut f, reg, img)?;
        drop(f);
        let grab2 = |id: NodeId| -> [f64; N_CLASSES] {
            let d = tape.value(id).data();
            [d[0], d[1]]
        };
        let mut s_maps = Vec::with_capacity(3);
        for (n, &sid) in nodes.s.iter().enumerate() {
            s_maps.push(SaliencyMap::new(
                tape.value(sid).clone(),
                self.config.downsample[n],
            )?);
        }
        let s_g = SaliencyMap::new(tape.value(nodes.s_g).clone(), self.config.downsample[0])?;
        Ok(GlobalOutput {
            s: [s_maps[0].clone(), s_maps[1].clone(), s_maps[2].clone()],
            s_g,
            y_tilde: [
                grab2(nodes.y_tilde[0]),
                grab2(nodes.y_tilde[1]),
                grab2(nodes.y_tilde[2]),
            ],
            y_hat_g: grab2(nodes.y_hat_g),
            z_g: tape.value(nodes.z_g).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn small_config() -> GlobalConfig {
        GlobalConfig {
            input_h: 128,
            input_w: 64,
            channels: [8, 12, 16],
            downsample: [16, 32, 64],
            blocks: [1, 1, 1],
            stem_channels: 4,
            t_global: 2.0,
            gamma: [0.2, 0.6, 0.2],
            norm: NormMode::Instance,
        }
    }

    #[test]
    fn grids_follow_downsample_factors() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(7);
        let net = GlobalNet::init(&mut reg, &mut rng, small_config()).unwrap();
        let img = Tensor::full(vec![1, 128, 64], 0.5);
        let out = net.infer(&reg, &img).unwrap();
        assert_eq!(out.s[0].grid(), (8, 4));
        assert_eq!(out.s[1].grid(), (4, 2));
        assert_eq!(out.s[2].grid(), (2, 1));
        assert_eq!(out.s_g.grid(), (8, 4));
        assert_eq!(out.s_g.scale, 16);
        assert_eq!(out.z_g.len(), 16);
        for m in out.s.iter().chain([&out.s_g]) {
            assert!(m.values.min() >= 0.0 && m.values.max() <= 1.0);
        }
    }

    #[test]
    fn y_hat_is_exact_mean_of_scales() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(8);
        let net = GlobalNet::init(&mut reg, &mut rng, small_config()).unwrap();
        let mut rng2 = rng_from(9);
        let img = crate::params::init_uniform(&mut rng2, vec![1, 128, 64], 1);
        let out = net.infer(&reg, &img).unwrap();
        for c in 0..N_CLASSES {
            let mean = (out.y_tilde[0][c] + out.y_tilde[1][c] + out.y_tilde[2][c]) / 3.0;
            assert!((out.y_hat_g[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_heads_give_half_everywhere() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(10);
        let net = GlobalNet::init(&mut reg, &mut rng, small_config()).unwrap();
        for si in 0..3 {
            let id = reg.id(&format!("global/head{si}/weight")).unwrap();
            let n = reg.value(id).numel();
            reg.get_mut(id).value = Tensor::zeros(vec![N_CLASSES, [8, 12, 16][si], 1, 1]);
            assert_eq!(reg.value(id).numel(), n);
        }
        let img = Tensor::full(vec![1, 128, 64], 0.25);
        let out = net.infer(&reg, &img).unwrap();
        for m in &out.s {
            assert!(m.values.data().iter().all(|&v| v == 0.5));
        }
        for n in 0..3 {
            assert_eq!(out.y_tilde[n], [0.5, 0.5]);
        }
        assert_eq!(out.y_hat_g, [0.5, 0.5]);
    }

    #[test]
    fn s_g_matches_per_cell_weighted_oracle() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(11);
        let net = GlobalNet::init(&mut reg, &mut rng, small_config()).unwrap();
        let mut rng2 = rng_from(12);
        let img = crate::params::init_uniform(&mut rng2, vec![1, 128, 64], 1);
        let out = net.infer(&reg, &img).unwrap();
        let (th, tw) = out.s_g.grid();
        let gamma = [0.2, 0.6, 0.2];
        for c in 0..N_CLASSES {
            for i in 0..th {
                for j in 0..tw {
                    let mut want = 0.0;
                    for n in 0..3 {
                        let (h, w) = out.s[n].grid();
                        let si = crate::tape::nearest_index(i, h, th);
                        let sj = crate::tape::nearest_index(j, w, tw);
                        want += gamma[n] * out.s[n].values.data()[c * h * w + si * w + sj];
                    }
                    let got = out.s_g.values.data()[c * th * tw + i * tw + j];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let mut bad = small_config();
        bad.input_h = 100; // not divisible by 64
        assert!(bad.validate().is_err());
        let mut bad = small_config();
        bad.gamma = [0.5, 0.6, 0.2];
        assert!(bad.validate().is_err());
        let mut bad = small_config();
        bad.downsample = [16, 24, 64]; // 24 not a multiple of 16
        assert!(bad.validate().is_err());
    }
}
