//! Local patch network: a stride-reduced backbone that keeps the feature map
//! at patch/4 resolution, per-patch saliency and predictions, the two
//! multi-instance aggregation strategies, and assembly of the full-image
//! local map S_l.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlamError, Result};
use crate::layers::{Fwd, NormMode, ResBlock, Stem};
use crate::params::{init_uniform, ParamId, ParamRegistry};
use crate::patches::PatchLocation;
use crate::saliency::{SaliencyMap, N_CLASSES};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Stride-reduced 34-layer layout (3,4,6,3 blocks, all stride 1).
    Hr34,
    /// Stride-reduced 18-layer layout (2,2,2,2 blocks, all stride 1).
    Hr18,
    /// Conventional striding (1,2,2,2): the native /32 map is upsampled back
    /// to /4 so downstream shapes stay uniform.
    Plain34,
}

fn default_backbone() -> Backbone {
    Backbone::Hr34
}
fn default_t_local() -> f64 {
    20.0
}
fn default_widths() -> [usize; 4] {
    [16, 32, 64, 128]
}
fn default_gate_dim() -> usize {
    128
}
fn default_norm() -> NormMode {
    NormMode::Instance
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
    #[serde(default = "default_t_local")]
    pub t_local: f64,
    /// Stage widths; the last is the z_k dimension (paper-scale: 64/128/256/512).
    #[serde(default = "default_widths")]
    pub widths: [usize; 4],
    #[serde(default = "default_gate_dim")]
    pub gate_dim: usize,
    #[serde(default = "default_norm")]
    pub norm: NormMode,
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        let div = match self.backbone {
            Backbone::Plain34 => 32,
            _ => 4,
        };
        if self.patch_h % div != 0 || self.patch_w % div != 0 {
            return Err(GlamError::config(format!(
                "patch {}x{} not divisible by {div}",
                self.patch_h, self.patch_w
            )));
        }
        if !(self.t_local > 0.0 && self.t_local <= 100.0) {
            return Err(GlamError::config(format!(
                "t_local {} outside (0, 100]",
                self.t_local
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.gate_dim == 0 {
            return Err(GlamError::config("widths and gate_dim must be >= 1"));
        }
        Ok(())
    }

    pub fn map_grid(&self) -> (usize, usize) {
        (self.patch_h / 4, self.patch_w / 4)
    }

    pub fn z_dim(&self) -> usize {
        self.widths[3]
    }

    fn blocks_per_stage(&self) -> [usize; 4] {
        match self.backbone {
            Backbone::Hr34 | Backbone::Plain34 => [3, 4, 6, 3],
            Backbone::Hr18 => [2, 2, 2, 2],
        }
    }

    fn stage_strides(&self) -> [usize; 4] {
        match self.backbone {
            Backbone::Plain34 => [1, 2, 2, 2],
            _ => [1, 1, 1, 1],
        }
    }
}

#[derive(Debug)]
pub struct LocalNet {
    stem: Stem,
    stages: Vec<Vec<ResBlock>>,
    head_w: ParamId,
    head_b: ParamId,
    pub config: LocalConfig,
}

/// Tape handles for one patch.
#[derive(Debug, Clone, Copy)]
pub struct PatchNodes {
    /// Saliency map a_k, shape [2, patch_h/4, patch_w/4].
    pub a: NodeId,
    /// Patch prediction from top-t pooling, shape [2].
    pub y: NodeId,
    /// Patch vector (spatial max of the last feature map), shape [z_dim].
    pub z: NodeId,
}

impl LocalNet {
    pub fn init(reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, config: LocalConfig) -> Result<Self> {
        config.validate()?;
        let stem = Stem::init(reg, rng, "local/stem", config.widths[0])?;
        let blocks = config.blocks_per_stage();
        let strides = config.stage_strides();
        let mut stages = Vec::new();
        let mut c_in = config.widths[0];
        for si in 0..4 {
            let c_out = config.widths[si];
            let mut stage = Vec::new();
            for bi in 0..blocks[si] {
                let s = if bi == 0 { strides[si] } else { 1 };
                let cin = if bi == 0 { c_in } else { c_out };
                stage.push(ResBlock::init(
                    reg,
                    rng,
                    &format!("local/stage{si}/block{bi}"),
                    cin,
                    c_out,
                    s,
                )?);
            }
            stages.push(stage);
            c_in = c_out;
        }
        let head_w = reg.add(
            "local/head/weight",
            init_uniform(rng, vec![N_CLASSES, config.widths[3], 1, 1], config.widths[3]),
        )?;
        let head_b = reg.add("local/head/bias", Tensor::zeros(vec![N_CLASSES]))?;
        Ok(LocalNet {
            stem,
            stages,
            head_w,
            head_b,
            config,
        })
    }

    /// Runs the backbone + saliency head on one patch node.
    pub fn forward_patch(&self, f: &mut Fwd, reg: &ParamRegistry, patch: NodeId) -> Result<PatchNodes> {
        let (c, h, w) = f.tape.value(patch).dims3()?;
        if c != 1 || h != self.config.patch_h || w != self.config.patch_w {
            return Err(GlamError::shape(format!(
                "local forward: patch [{c}, {h}, {w}] does not match config {}x{}",
                self.config.patch_h, self.config.patch_w
            )));
        }
        let mode = self.config.norm;
        let mut x = self.stem.forward(f, reg, patch, mode)?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward(f, reg, x, mode)?;
            }
        }
        let wn = f.leaf(reg, self.head_w);
        let bn = f.leaf(reg, self.head_b);
        let logits = f.tape.conv2d(x, wn, 1, 0)?;
        let logits = f.tape.bias_add_chan(logits, bn)?;
        let mut a = f.tape.sigmoid(logits)?;
        let (gh, gw) = self.config.map_grid();
        let (_, ah, aw) = f.tape.value(a).dims3()?;
        if (ah, aw) != (gh, gw) {
            // Conventional striding leaves the map at /32; bring it back to /4.
            a = f.tape.resample_nearest(a, gh, gw)?;
        }
        let y = f.tape.top_t_pool(a, self.config.t_local)?;
        let z = f.tape.spatial_max(x)?;
        Ok(PatchNodes { a, y, z })
    }
}

/// Concat aggregation: widthwise concatenation of the patch maps, then one
/// top-t pool over the combined map -> [2].
pub fn aggregate_concat(tape: &mut Tape, maps: &[NodeId], t: f64) -> Result<NodeId> {
    if maps.is_empty() {
        return Err(GlamError::shape("aggregate_concat: no maps"));
    }
    let cat = tape.concat_width(maps)?;
    tape.top_t_pool(cat, t)
}

/// Gated-attention parameters over patch vectors.
#[derive(Debug)]
pub struct AttentionHead {
    pub v: ParamId,
    pub u: ParamId,
    pub w: ParamId,
}

impl AttentionHead {
    pub fn init(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        z_dim: usize,
        gate_dim: usize,
    ) -> Result<Self> {
        Ok(AttentionHead {
            v: reg.add("attention/v", init_uniform(rng, vec![gate_dim, z_dim], z_dim))?,
            u: reg.add("attention/u", init_uniform(rng, vec![gate_dim, z_dim], z_dim))?,
            w: reg.add("attention/w", init_uniform(rng, vec![gate_dim], gate_dim))?,
        })
    }

    /// alpha = softmax_k( w . (tanh(V z_k) * sigmoid(U z_k)) );
    /// returns (y_hat_l, z_l, alpha).
    pub fn aggregate(
        &self,
        f: &mut Fwd,
        reg: &ParamRegistry,
        preds: &[NodeId],
        vecs: &[NodeId],
    ) -> Result<(NodeId, NodeId, NodeId)> {
        if preds.len() != vecs.len() || preds.is_empty() {
            return Err(GlamError::shape(format!(
                "aggregate_attention: {} preds vs {} vecs",
                preds.len(),
                vecs.len()
            )));
        }
        let v = f.leaf(reg, self.v);
        let u = f.leaf(reg, self.u);
        let w = f.leaf(reg, self.w);
        let mut scores = Vec::with_capacity(vecs.len());
        for &z in vecs {
            let vz = f.tape.matvec(v, z)?;
            let tv = f.tape.tanh(vz)?;
            let uz = f.tape.matvec(u, z)?;
            let su = f.tape.sigmoid(uz)?;
            let gate = f.tape.mul(tv, su)?;
            scores.push(f.tape.dot(w, gate)?);
        }
        let stacked = f.tape.concat_vec(&scores)?;
        let alpha = f.tape.softmax(stacked)?;
        let y_l = f.tape.weighted_sum(alpha, preds)?;
        let z_l = f.tape.weighted_sum(alpha, vecs)?;
        Ok((y_l, z_l, alpha))
    }
}

/// Writes each patch map into a zero-initialized (H/4, W/4) canvas at its
/// location; overlapping cells keep the per-cell maximum.
pub fn assemble_local_map(
    maps: &[Tensor],
    locations: &[PatchLocation],
    image_dims: (usize, usize),
) -> Result<SaliencyMap> {
    let (ih, iw) = image_dims;
    if ih % 4 != 0 || iw % 4 != 0 {
        return Err(GlamError::shape(format!("image {ih}x{iw} not divisible by 4")));
    }
    if maps.len() != locations.len() {
        return Err(GlamError::shape(format!(
            "{} maps vs {} locations",
            maps.len(),
            locations.len()
        )));
    }
    let (ch, cw) = (ih / 4, iw / 4);
    let mut canvas = vec![0.0f64; N_CLASSES * ch * cw];
    for (m, loc) in maps.iter().zip(locations) {
        let (c, mh, mw) = m.dims3()?;
        if c != N_CLASSES {
            return Err(GlamError::shape(format!("patch map has {c} classes")));
        }
        let (r0, c0) = (loc.row / 4, loc.col / 4);
        if r0 + mh > ch || c0 + mw > cw {
            return Err(GlamError::shape(format!(
                "patch map at ({r0}, {c0}) size {mh}x{mw} exceeds canvas {ch}x{cw}"
            )));
        }
        for cls in 0..N_CLASSES {
            for i in 0..mh {
                let src = cls * mh * mw + i * mw;
                let dst = cls * ch * cw + (r0 + i) * cw + c0;
                for j in 0..mw {
                    let v = m.data()[src + j];
                    if v > canvas[dst + j] {
                        canvas[dst + j] = v;
                    }
                }
            }
        }
    }
    SaliencyMap::new(Tensor::new(vec![N_CLASSES, ch, cw], canvas)?, 4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Phase;
    use crate::rng::rng_from;
    use rand::Rng;

    fn small_config() -> LocalConfig {
        LocalConfig {
            patch_h: 32,
            patch_w: 32,
            backbone: Backbone::Hr18,
            t_local: 20.0,
            widths: [4, 6, 8, 10],
            gate_dim: 12,
            norm: NormMode::Instance,
        }
    }

    fn forward_once(cfg: LocalConfig, seed: u64, patch: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(seed);
        let net = LocalNet::init(&mut reg, &mut rng, cfg).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(patch.clone());
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let out = net.forward_patch(&mut f, &reg, p).unwrap();
        drop(f);
        (
            tape.value(out.a).clone(),
            tape.value(out.y).data().to_vec(),
            tape.value(out.z).data().to_vec(),
        )
    }

    #[test]
    fn map_is_quarter_resolution() {
        let patch = Tensor::full(vec![1, 32, 32], 0.4);
        let (a, y, z) = forward_once(small_config(), 1, &patch);
        assert_eq!(a.shape(), &[2, 8, 8]);
        assert_eq!(y.len(), 2);
        assert_eq!(z.len(), 10);
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
    }

    #[test]
    fn plain_backbone_still_returns_quarter_grid() {
        let mut cfg = small_config();
        cfg.backbone = Backbone::Plain34;
        let patch = Tensor::full(vec![1, 32, 32], 0.1);
        let (a, _, _) = forward_once(cfg, 2, &patch);
        assert_eq!(a.shape(), &[2, 8, 8]);
    }

    #[test]
    fn zero_head_gives_half_map() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(3);
        let net = LocalNet::init(&mut reg, &mut rng, small_config()).unwrap();
        let id = reg.id("local/head/weight").unwrap();
        reg.get_mut(id).value = Tensor::zeros(vec![2, 10, 1, 1]);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(vec![1, 32, 32], 0.7));
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let out = net.forward_patch(&mut f, &reg, p).unwrap();
        drop(f);
        assert!(tape.value(out.a).data().iter().all(|&v| v == 0.5));
        assert_eq!(tape.value(out.y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_matches_sort_oracle() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(vec![2, 1, 2], 0.2));
        let b = tape.leaf(Tensor::full(vec![2, 1, 2], 0.8));
        let y = aggregate_concat(&mut tape, &[a, b], 50.0).unwrap();
        // top 2 of {0.2, 0.2, 0.8, 0.8} per class
        assert_eq!(tape.value(y).data(), &[0.8, 0.8]);
    }

    #[test]
    fn concat_of_identical_maps_equals_single_pool() {
        let vals = Tensor::new(vec![2, 2, 2], vec![0.1, 0.9, 0.4, 0.3, 0.2, 0.6, 0.5, 0.7]).unwrap();
        let mut tape = Tape::new();
        let m = tape.leaf(vals.clone());
        let single = tape.top_t_pool(m, 50.0).unwrap();
        let m1 = tape.leaf(vals.clone());
        let m2 = tape.leaf(vals.clone());
        let m3 = tape.leaf(vals);
        let triple = aggregate_concat(&mut tape, &[m1, m2, m3], 50.0).unwrap();
        let s = tape.value(single).data().to_vec();
        let t = tape.value(triple).data().to_vec();
        for (a, b) in s.iter().zip(&t) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_k1_is_identity() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(4);
        let head = AttentionHead::init(&mut reg, &mut rng, 6, 5).unwrap();
        let mut tape = Tape::new();
        let y1 = tape.leaf(Tensor::new(vec![2], vec![0.3, 0.9]).unwrap());
        let z1 = tape.leaf(init_uniform(&mut rng, vec![6], 1));
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let (yl, _, alpha) = head.aggregate(&mut f, &reg, &[y1], &[z1]).unwrap();
        drop(f);
        assert_eq!(tape.value(alpha).data(), &[1.0]);
        assert_eq!(tape.value(yl).data(), &[0.3, 0.9]);
    }

    #[test]
    fn attention_uniform_for_identical_vectors() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(5);
        let head = AttentionHead::init(&mut reg, &mut rng, 6, 5).unwrap();
        let mut tape = Tape::new();
        let z = init_uniform(&mut rng, vec![6], 1);
        let zs: Vec<NodeId> = (0..4).map(|_| tape.leaf(z.clone())).collect();
        let ys: Vec<NodeId> = (0..4)
            .map(|i| tape.leaf(Tensor::new(vec![2], vec![0.1 * i as f64, 0.5]).unwrap()))
            .collect();
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let (_, _, alpha) = head.aggregate(&mut f, &reg, &ys, &zs).unwrap();
        drop(f);
        for &a in tape.value(alpha).data() {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_reimplemented_oracle() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(6);
        let (zd, gd, k) = (5, 4, 3);
        let head = AttentionHead::init(&mut reg, &mut rng, zd, gd).unwrap();
        let zs_data: Vec<Vec<f64>> = (0..k)
            .map(|_| init_uniform(&mut rng, vec![zd], 1).into_data())
            .collect();
        let ys_data: Vec<Vec<f64>> = (0..k)
            .map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();

        let mut tape = Tape::new();
        let zs: Vec<NodeId> = zs_data
            .iter()
            .map(|d| tape.leaf(Tensor::new(vec![zd], d.clone()).unwrap()))
            .collect();
        let ys: Vec<NodeId> = ys_data
            .iter()
            .map(|d| tape.leaf(Tensor::new(vec![2], d.clone()).unwrap()))
            .collect();
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let (yl, zl, alpha) = head.aggregate(&mut f, &reg, &ys, &zs).unwrap();
        drop(f);

        // Oracle: same formula written longhand from the raw parameter data.
        let vm = reg.value(head.v).data();
        let um = reg.value(head.u).data();
        let wv = reg.value(head.w).data();
        let mut scores = Vec::new();
        for z in &zs_data {
            let mut s = 0.0;
            for g in 0..gd {
                let mut vz = 0.0;
                let mut uz = 0.0;
                for j in 0..zd {
                    vz += vm[g * zd + j] * z[j];
                    uz += um[g * zd + j] * z[j];
                }
                s += wv[g] * vz.tanh() * (1.0 / (1.0 + (-uz).exp()));
            }
            scores.push(s);
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let zsum: f64 = exps.iter().sum();
        let want_alpha: Vec<f64> = exps.iter().map(|e| e / zsum).collect();
        for (a, b) in tape.value(alpha).data().iter().zip(&want_alpha) {
            assert!((a - b).abs() < 1e-10);
        }
        for c in 0..2 {
            let want: f64 = (0..k).map(|i| want_alpha[i] * ys_data[i][c]).sum();
            assert!((tape.value(yl).data()[c] - want).abs() < 1e-10);
        }
        for j in 0..zd {
            let want: f64 = (0..k).map(|i| want_alpha[i] * zs_data[i][j]).sum();
            assert!((tape.value(zl).data()[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn assemble_writes_blocks_and_takes_overlap_max() {
        let m1 = Tensor::full(vec![2, 2, 2], 0.3);
        let m2 = Tensor::full(vec![2, 2, 2], 0.9);
        let l1 = PatchLocation { row: 0, col: 0, h: 8, w: 8 };
        let l2 = PatchLocation { row: 4, col: 4, h: 8, w: 8 };
        let s = assemble_local_map(&[m1, m2], &[l1, l2], (16, 16)).unwrap();
        assert_eq!(s.grid(), (4, 4));
        assert_eq!(s.scale, 4);
        let d = s.values.data();
        // m1 covers rows 0-1 x cols 0-1; m2 covers rows 1-2 x cols 1-2.
        assert_eq!(d[0], 0.3);
        assert_eq!(d[1 * 4 + 1], 0.9); // overlap -> max(0.3, 0.9)
        assert_eq!(d[2 * 4 + 2], 0.9);
        assert_eq!(d[3], 0.0); // untouched cell
        assert_eq!(d[3 * 4 + 3], 0.0);
    }

    #[test]
    fn attention_permutation_equivariance() {
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(8);
        let head = AttentionHead::init(&mut reg, &mut rng, 4, 3).unwrap();
        let zs: Vec<Tensor> = (0..3).map(|_| init_uniform(&mut rng, vec![4], 1)).collect();
        let ys: Vec<Tensor> = (0..3)
            .map(|_| Tensor::new(vec![2], vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).unwrap())
            .collect();
        let run = |order: &[usize]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let zn: Vec<NodeId> = order.iter().map(|&i| tape.leaf(zs[i].clone())).collect();
            let yn: Vec<NodeId> = order.iter().map(|&i| tape.leaf(ys[i].clone())).collect();
            let mut f = Fwd::new(&mut tape, Phase::Eval);
            let (yl, zl, alpha) = head.aggregate(&mut f, &reg, &yn, &zn).unwrap();
            drop(f);
            (
                tape.value(yl).data().to_vec(),
                tape.value(zl).data().to_vec(),
                tape.value(alpha).data().to_vec(),
            )
        };
        let (y0, z0, a0) = run(&[0, 1, 2]);
        let (y1, z1, a1) = run(&[2, 0, 1]);
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in z0.iter().zip(&z1) {
            assert!((a - b).abs() < 1e-12);
        }
        // alpha permutes with the inputs
        assert!((a1[0] - a0[2]).abs() < 1e-12);
        assert!((a1[1] - a0[0]).abs() < 1e-12);
        assert!((a1[2] - a0[1]).abs() < 1e-12);
    }
}
