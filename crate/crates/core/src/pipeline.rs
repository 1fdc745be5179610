//! Whole-model assembly: staged construction, checkpoint flow, full-image
//! inference (global pass, patch selection, local pass, aggregation, fusion,
//! combined map), and split-level evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, LoadReport};
use crate::dataset::{Dataset, Example};
use crate::error::{GlamError, Result};
use crate::fusion::{combine_saliency, FusionHead};
use crate::global::{GlobalConfig, GlobalNet, GlobalOutput};
use crate::layers::{Fwd, Phase};
use crate::local::{aggregate_concat, assemble_local_map, AttentionHead, LocalConfig, LocalNet};
use crate::metrics::{auc, dice, mean_std, pxap_image, resample_plane, Grid256Pool, PxapMode};
use crate::params::ParamRegistry;
use crate::patches::{extract_patches, select_patches, PatchLocation};
use crate::rng::rng_from;
use crate::saliency::{SaliencyMap, N_CLASSES};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

fn default_gamma_c() -> f64 {
    0.5
}

/// Full-model configuration. The train section's pooling percentages are the
/// single source of truth: `resolve` copies them over the per-net fields so a
/// searched value flows everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub global: GlobalConfig,
    pub local: LocalConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_gamma_c")]
    pub gamma_c: f64,
}

impl PipelineConfig {
    pub fn resolve(&mut self) {
        self.global.t_global = self.train.t_global;
        self.local.t_local = self.train.t_local;
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate()?;
        self.local.validate()?;
        self.train.validate()?;
        if !(self.gamma_c >= 0.0 && self.gamma_c <= 1.0) {
            return Err(GlamError::config(format!(
                "gamma_c {} outside [0, 1]",
                self.gamma_c
            )));
        }
        if self.local.patch_h > self.global.input_h || self.local.patch_w > self.global.input_w {
            return Err(GlamError::config(format!(
                "patch {}x{} larger than input {}x{}",
                self.local.patch_h, self.local.patch_w, self.global.input_h, self.global.input_w
            )));
        }
        // Patch windows must cover whole cells of the finest global grid.
        let d0 = self.global.downsample[0];
        if self.local.patch_h % d0 != 0 || self.local.patch_w % d0 != 0 {
            return Err(GlamError::config(format!(
                "patch {}x{} not a multiple of the S_g cell size {d0}",
                self.local.patch_h, self.local.patch_w
            )));
        }
        Ok(())
    }

    /// Parses JSON, resolves cross-references, validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| GlamError::config(format!("config: {e}")))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        checkpoint::config_digest(self)
    }
}

/// Stages that carry parameters; stage 2 (patch-set construction) does not.
pub const MODEL_STAGES: [u8; 3] = [1, 3, 4];

#[derive(Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub reg: ParamRegistry,
    pub global: GlobalNet,
    pub local: Option<LocalNet>,
    pub attention: Option<AttentionHead>,
    pub fusion: Option<FusionHead>,
    /// Structural stage: 1 = global only, 3 = +local, 4 = +attention/fusion.
    pub stage: u8,
}

impl Pipeline {
    /// Freshly initialized model with the components stage `stage` uses.
    pub fn init(mut config: PipelineConfig, stage: u8) -> Result<Self> {
        config.resolve();
        config.validate()?;
        if !MODEL_STAGES.contains(&stage) {
            return Err(GlamError::config(format!(
                "no model at stage {stage}; model stages are 1, 3, 4"
            )));
        }
        let mut reg = ParamRegistry::new();
        let mut rng = rng_from(config.train.seed);
        let global = GlobalNet::init(&mut reg, &mut rng, config.global.clone())?;
        let local = if stage >= 3 {
            Some(LocalNet::init(&mut reg, &mut rng, config.local.clone())?)
        } else {
            None
        };
        let (attention, fusion) = if stage >= 4 {
            let att =
                AttentionHead::init(&mut reg, &mut rng, config.local.z_dim(), config.local.gate_dim)?;
            let fus =
                FusionHead::init(&mut reg, &mut rng, config.global.channels[2], config.local.z_dim())?;
            (Some(att), Some(fus))
        } else {
            (None, None)
        };
        Ok(Pipeline {
            config,
            reg,
            global,
            local,
            attention,
            fusion,
            stage,
        })
    }

    /// Structure for training `stage`, seeded from the prerequisite checkpoint
    /// (stage 3 needs a stage-1 file, stage 4 a stage-3 file).
    pub fn for_training(
        config: PipelineConfig,
        stage: u8,
        prior: Option<&Path>,
    ) -> Result<(Self, Option<LoadReport>)> {
        let mut p = Self::init(config, stage)?;
        let needed = match stage {
            3 => Some(1u8),
            4 => Some(3u8),
            _ => None,
        };
        match (needed, prior) {
            (None, None) => Ok((p, None)),
            (None, Some(_)) => Err(GlamError::config(
                "stage 1 starts from fresh parameters; no prior checkpoint expected",
            )),
            (Some(n), None) => Err(GlamError::prerequisite(format!(
                "training stage {stage} requires a stage-{n} checkpoint"
            ))),
            (Some(n), Some(path)) => {
                let expected = p.config.digest()?;
                let report = checkpoint::load_checkpoint(path, &mut p.reg, Some(expected))?;
                if report.stage != n {
                    return Err(GlamError::prerequisite(format!(
                        "training stage {stage} requires a stage-{n} checkpoint, got stage {}",
                        report.stage
                    )));
                }
                Ok((p, Some(report)))
            }
        }
    }

    /// Rebuilds a model for inference; the structure follows the file's stage
    /// tag.
    pub fn from_checkpoint(config: PipelineConfig, path: &Path) -> Result<(Self, LoadReport)> {
        let bytes = std::fs::read(path)
            .map_err(|e| GlamError::checkpoint(format!("{}: {e}", path.display())))?;
        let ckpt = Checkpoint::decode(&bytes)
            .map_err(|e| GlamError::checkpoint(format!("{}: {e}", path.display())))?;
        let mut p = Self::init(config, ckpt.stage)?;
        checkpoint::apply_checkpoint(&ckpt, &mut p.reg)?;
        let digest_mismatch = p.config.digest()? != ckpt.config_digest;
        Ok((
            p,
            LoadReport {
                stage: ckpt.stage,
                digest_mismatch,
                loaded: ckpt.entries.len(),
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, &self.reg, self.stage, self.config.digest()?)
    }
}

/// One image's inference products; later-stage fields are `None` when the
/// model lacks the corresponding heads.
#[derive(Debug)]
pub struct InferOutput {
    pub global: GlobalOutput,
    pub locations: Vec<PatchLocation>,
    /// Per-patch saliency maps `[2, ph/4, pw/4]`, aligned with `locations`.
    pub patch_maps: Vec<Tensor>,
    pub s_l: Option<SaliencyMap>,
    pub s_c: Option<SaliencyMap>,
    pub y_hat_l: Option<[f64; N_CLASSES]>,
    pub y_hat_f: Option<[f64; N_CLASSES]>,
    pub alpha: Option<Vec<f64>>,
}

impl Pipeline {
    /// Full inference with `m` retrieved patches: global pass, patch
    /// selection on S_g, local pass, stage-appropriate aggregation (concat
    /// before the attention head exists), fusion, and the combined map.
    pub fn infer(&self, image: &Tensor, m: usize) -> Result<InferOutput> {
        if m == 0 {
            return Err(GlamError::config("inference needs M >= 1 patches"));
        }
        let g = self.global.infer(&self.reg, image)?;
        let Some(local) = &self.local else {
            return Ok(InferOutput {
                global: g,
                locations: Vec::new(),
                patch_maps: Vec::new(),
                s_l: None,
                s_c: None,
                y_hat_l: None,
                y_hat_f: None,
                alpha: None,
            });
        };
        let (_, h, w) = image.dims3()?;
        let locations = select_patches(
            &g.s_g,
            m,
            (self.config.local.patch_h, self.config.local.patch_w),
            (h, w),
        )?;
        let tensors = extract_patches(image, &locations)?;
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let mut maps = Vec::new();
        let mut preds = Vec::new();
        let mut vecs = Vec::new();
        for t in tensors {
            let leaf = f.tape.leaf(t);
            let out = local.forward_patch(&mut f, &self.reg, leaf)?;
            maps.push(out.a);
            preds.push(out.y);
            vecs.push(out.z);
        }
        let (y_l, alpha, z_l) = match &self.attention {
            Some(att) => {
                let (y, z, a) = att.aggregate(&mut f, &self.reg, &preds, &vecs)?;
                (y, Some(a), Some(z))
            }
            None => (
                aggregate_concat(f.tape, &maps, self.config.local.t_local)?,
                None,
                None,
            ),
        };
        let y_f = match (&self.fusion, z_l) {
            (Some(fus), Some(z_l)) => {
                let z_g = f.tape.leaf(Tensor::new(vec![g.z_g.len()], g.z_g.clone())?);
                Some(fus.fuse(&mut f, &self.reg, z_g, z_l)?)
            }
            _ => None,
        };
        drop(f);
        let patch_maps: Vec<Tensor> = maps.iter().map(|&n| tape.value(n).clone()).collect();
        let s_l = assemble_local_map(&patch_maps, &locations, (h, w))?;
        let s_c = combine_saliency(&g.s_g, &s_l, self.config.gamma_c)?;
        let pair = |n: NodeId| -> [f64; N_CLASSES] {
            let d = tape.value(n).data();
            [d[0], d[1]]
        };
        Ok(InferOutput {
            y_hat_l: Some(pair(y_l)),
            y_hat_f: y_f.map(pair),
            alpha: alpha.map(|a| tape.value(a).data().to_vec()),
            global: g,
            locations,
            patch_maps,
            s_l: Some(s_l),
            s_c: Some(s_c),
        })
    }
}

/// Dice of one class plane against the example's mask at the full-resolution
/// mask grid.
pub fn dice_vs_mask(map: &SaliencyMap, ex: &Example, class: usize) -> Result<f64> {
    let plane = resample_plane(&map.class_plane(class), ex.height, ex.width)?;
    dice(&plane, &ex.mask_plane(class))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn summarize(xs: &[f64]) -> MeanStd {
    let (mean, std) = mean_std(xs);
    MeanStd {
        mean,
        std,
        n: xs.len(),
    }
}

/// Segmentation quality of one map kind over a split. Dice and image-level
/// PxAP average over label-positive examples; dataset PxAP pools every
/// example's pixels (lesion-free images contribute negative pixels only).
#[derive(Debug, Clone, Serialize)]
pub struct SegReport {
    pub map: String,
    pub dice: [MeanStd; N_CLASSES],
    pub pxap_image: [MeanStd; N_CLASSES],
    pub pxap_dataset: [Option<f64>; N_CLASSES],
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub m_patches: usize,
    pub auc_global: [Option<f64>; N_CLASSES],
    pub auc_local: [Option<f64>; N_CLASSES],
    pub auc_fused: [Option<f64>; N_CLASSES],
    pub maps: Vec<SegReport>,
}

/// Accumulates one map kind's segmentation metrics over a split.
pub struct MapAcc {
    name: String,
    dice: [Vec<f64>; N_CLASSES],
    pxap: [Vec<f64>; N_CLASSES],
    pools: [Grid256Pool; N_CLASSES],
}

impl MapAcc {
    pub fn new(name: impl Into<String>) -> Self {
        MapAcc {
            name: name.into(),
            dice: Default::default(),
            pxap: Default::default(),
            pools: [Grid256Pool::new(), Grid256Pool::new()],
        }
    }

    pub fn add(&mut self, map: &SaliencyMap, ex: &Example) -> Result<()> {
        for c in 0..N_CLASSES {
            let plane = resample_plane(&map.class_plane(c), ex.height, ex.width)?;
            let mask = ex.mask_plane(c);
            self.pools[c].add(&plane, &mask)?;
            if ex.labels[c] {
                self.dice[c].push(dice(&plane, &mask)?);
                if let Some(ap) = pxap_image(&plane, &mask, PxapMode::Grid256)? {
                    self.pxap[c].push(ap);
                }
            }
        }
        Ok(())
    }

    pub fn report(self) -> SegReport {
        SegReport {
            map: self.name,
            dice: [summarize(&self.dice[0]), summarize(&self.dice[1])],
            pxap_image: [summarize(&self.pxap[0]), summarize(&self.pxap[1])],
            pxap_dataset: [self.pools[0].ap(), self.pools[1].ap()],
        }
    }
}

#[derive(Default)]
struct ScoreAcc {
    scores: [Vec<f64>; N_CLASSES],
    labels: [Vec<bool>; N_CLASSES],
}

impl ScoreAcc {
    fn push(&mut self, y: &[f64; N_CLASSES], labels: &[bool; N_CLASSES]) {
        for c in 0..N_CLASSES {
            self.scores[c].push(y[c]);
            self.labels[c].push(labels[c]);
        }
    }

    fn auc(&self) -> [Option<f64>; N_CLASSES] {
        [
            auc(&self.scores[0], &self.labels[0]),
            auc(&self.scores[1], &self.labels[1]),
        ]
    }
}

/// Evaluates every map kind the model produces on one split.
pub fn evaluate(pipe: &Pipeline, ds: &Dataset, m: usize) -> Result<EvalReport> {
    if ds.positives().is_empty() {
        return Err(GlamError::config(
            "evaluation needs at least one example with a positive mask",
        ));
    }
    let with_local = pipe.local.is_some();
    let mut acc_sg = MapAcc::new("sg");
    let mut acc_sl = MapAcc::new("sl");
    let mut acc_sc = MapAcc::new("sc");
    let mut cls_g = ScoreAcc::default();
    let mut cls_l = ScoreAcc::default();
    let mut cls_f = ScoreAcc::default();
    for ex in &ds.examples {
        let out = pipe.infer(&ex.image_tensor(), m)?;
        acc_sg.add(&out.global.s_g, ex)?;
        cls_g.push(&out.global.y_hat_g, &ex.labels);
        if let Some(sl) = &out.s_l {
            acc_sl.add(sl, ex)?;
        }
        if let Some(sc) = &out.s_c {
            acc_sc.add(sc, ex)?;
        }
        if let Some(y) = &out.y_hat_l {
            cls_l.push(y, &ex.labels);
        }
        if let Some(y) = &out.y_hat_f {
            cls_f.push(y, &ex.labels);
        }
    }
    let mut maps = vec![acc_sg.report()];
    if with_local {
        maps.push(acc_sl.report());
        maps.push(acc_sc.report());
    }
    Ok(EvalReport {
        n_examples: ds.len(),
        m_patches: m,
        auc_global: cls_g.auc(),
        auc_local: cls_l.auc(),
        auc_fused: cls_f.auc(),
        maps,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaRow {
    pub gamma_c: f64,
    pub dice: [MeanStd; N_CLASSES],
}

/// Dice of the combined map as a function of gamma_c; each example is
/// inferred once and recombined per gamma.
pub fn gamma_sweep(pipe: &Pipeline, ds: &Dataset, m: usize, gammas: &[f64]) -> Result<Vec<GammaRow>> {
    if pipe.local.is_none() {
        return Err(GlamError::prerequisite(
            "gamma sweep needs a stage-3 or stage-4 model",
        ));
    }
    let mut dices: Vec<[Vec<f64>; N_CLASSES]> = gammas.iter().map(|_| Default::default()).collect();
    for ex in &ds.examples {
        if !ex.positive() {
            continue;
        }
        let out = pipe.infer(&ex.image_tensor(), m)?;
        let s_l = out.s_l.as_ref().expect("local model produces s_l");
        for (gi, &gamma) in gammas.iter().enumerate() {
            let s_c = combine_saliency(&out.global.s_g, s_l, gamma)?;
            for c in 0..N_CLASSES {
                if ex.labels[c] {
                    dices[gi][c].push(dice_vs_mask(&s_c, ex, c)?);
                }
            }
        }
    }
    Ok(gammas
        .iter()
        .zip(dices)
        .map(|(&gamma_c, d)| GammaRow {
            gamma_c,
            dice: [summarize(&d[0]), summarize(&d[1])],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;

    fn tiny_config(seed: u64) -> PipelineConfig {
        PipelineConfig {
            global: GlobalConfig {
                input_h: 64,
                input_w: 64,
                channels: [6, 8, 10],
                downsample: [16, 32, 64],
                blocks: [1, 1, 1],
                stem_channels: 4,
                t_global: 20.0,
                gamma: [0.2, 0.6, 0.2],
                norm: crate::layers::NormMode::Instance,
            },
            local: LocalConfig {
                patch_h: 16,
                patch_w: 16,
                backbone: crate::local::Backbone::Hr18,
                t_local: 20.0,
                widths: [4, 5, 6, 7],
                gate_dim: 8,
                norm: crate::layers::NormMode::Instance,
            },
            train: TrainConfig {
                seed,
                t_global: 20.0,
                t_local: 20.0,
                ..TrainConfig::default()
            },
            gamma_c: 0.5,
        }
    }

    fn tiny_dataset(seed: u64, n: usize) -> Dataset {
        let cfg = SynthConfig {
            height: 64,
            width: 64,
            n_train: n,
            n_val: 0,
            n_test: 0,
            lesion_radius_frac: (0.08, 0.12),
            area_budget: 0.25,
            seed,
            ..SynthConfig::default()
        };
        crate::synth::generate(&cfg).unwrap().train
    }

    #[test]
    fn stage_structure_controls_heads() {
        let p1 = Pipeline::init(tiny_config(1), 1).unwrap();
        assert!(p1.local.is_none() && p1.attention.is_none() && p1.fusion.is_none());
        assert!(p1.reg.id("attention/v").is_none());
        let p4 = Pipeline::init(tiny_config(1), 4).unwrap();
        assert!(p4.local.is_some() && p4.attention.is_some() && p4.fusion.is_some());
        assert!(p4.reg.id("attention/v").is_some());
        assert!(p4.reg.id("fusion/weight").is_some());
        assert!(Pipeline::init(tiny_config(1), 2).is_err());
    }

    #[test]
    fn stage_three_names_are_a_subset_of_stage_four() {
        let p3 = Pipeline::init(tiny_config(7), 3).unwrap();
        let p4 = Pipeline::init(tiny_config(7), 4).unwrap();
        for p in p3.reg.iter() {
            let id = p4.reg.id(&p.name).expect("missing in stage 4");
            assert_eq!(p4.reg.value(id).shape(), p.value.shape());
        }
    }

    #[test]
    fn config_validation_rejects_bad_patch_and_gamma() {
        let mut cfg = tiny_config(1);
        cfg.gamma_c = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(1);
        cfg.local.patch_h = 24; // not a multiple of the 16-px S_g cell
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(1);
        cfg.local.patch_h = 128; // larger than the 64-px input
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolve_pushes_train_pooling_into_nets() {
        let mut cfg = tiny_config(1);
        cfg.train.t_global = 5.0;
        cfg.train.t_local = 10.0;
        cfg.resolve();
        assert_eq!(cfg.global.t_global, 5.0);
        assert_eq!(cfg.local.t_local, 10.0);
    }

    #[test]
    fn stage_one_inference_has_no_local_products() {
        let p = Pipeline::init(tiny_config(3), 1).unwrap();
        let ds = tiny_dataset(3, 2);
        let out = p.infer(&ds.examples[0].image_tensor(), 1).unwrap();
        assert!(out.s_l.is_none() && out.s_c.is_none());
        assert!(out.y_hat_l.is_none() && out.y_hat_f.is_none() && out.alpha.is_none());
        assert_eq!(out.global.s_g.grid(), (4, 4));
        assert!(p.infer(&ds.examples[0].image_tensor(), 0).is_err());
    }

    #[test]
    fn stage_four_inference_produces_all_products() {
        let p = Pipeline::init(tiny_config(4), 4).unwrap();
        let ds = tiny_dataset(4, 2);
        let out = p.infer(&ds.examples[0].image_tensor(), 2).unwrap();
        let sl = out.s_l.unwrap();
        let sc = out.s_c.unwrap();
        assert_eq!(sl.grid(), (16, 16));
        assert_eq!(sl.scale, 4);
        assert_eq!(sc.grid(), (16, 16));
        assert_eq!(out.locations.len(), 2);
        assert_eq!(out.patch_maps.len(), 2);
        let alpha = out.alpha.unwrap();
        assert_eq!(alpha.len(), 2);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for v in out.y_hat_f.unwrap() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn checkpoint_flow_between_stages() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        let mut p1 = Pipeline::init(tiny_config(9), 1).unwrap();
        p1.stage = 1;
        p1.save(&path).unwrap();
        // Stage 3 accepts the stage-1 file; stage 4 demands stage 3.
        let (p3, report) = Pipeline::for_training(tiny_config(9), 3, Some(&path)).unwrap();
        let report = report.unwrap();
        assert_eq!(report.stage, 1);
        assert!(!report.digest_mismatch);
        assert!(p3.local.is_some());
        assert!(Pipeline::for_training(tiny_config(9), 4, Some(&path)).is_err());
        assert!(Pipeline::for_training(tiny_config(9), 3, None).is_err());
        assert!(Pipeline::for_training(tiny_config(9), 1, Some(&path)).is_err());
        // Inference structure follows the file's stage tag.
        let (pi, _) = Pipeline::from_checkpoint(tiny_config(9), &path).unwrap();
        assert_eq!(pi.stage, 1);
        assert!(pi.local.is_none());
    }

    #[test]
    fn digest_mismatch_flagged_but_load_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        let mut p1 = Pipeline::init(tiny_config(9), 1).unwrap();
        p1.stage = 1;
        p1.save(&path).unwrap();
        let mut other = tiny_config(9);
        other.train.lambda *= 2.0;
        let (_, report) = Pipeline::from_checkpoint(other, &path).unwrap();
        assert!(report.digest_mismatch);
    }

    #[test]
    fn evaluate_reports_all_map_rows_at_stage_four() {
        let p = Pipeline::init(tiny_config(11), 4).unwrap();
        let ds = tiny_dataset(11, 6);
        let report = evaluate(&p, &ds, 1).unwrap();
        assert_eq!(report.n_examples, 6);
        let names: Vec<&str> = report.maps.iter().map(|m| m.map.as_str()).collect();
        assert_eq!(names, ["sg", "sl", "sc"]);
        for row in &report.maps {
            for c in 0..N_CLASSES {
                assert!(row.dice[c].mean >= 0.0 && row.dice[c].mean <= 1.0);
                if let Some(ap) = row.pxap_dataset[c] {
                    assert!((0.0..=1.0).contains(&ap));
                }
            }
        }
        // Two runs produce identical serialized reports.
        let again = evaluate(&p, &ds, 1).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn gamma_sweep_endpoints_match_component_maps() {
        let p = Pipeline::init(tiny_config(13), 3).unwrap();
        let ds = tiny_dataset(13, 5);
        let report = evaluate(&p, &ds, 1).unwrap();
        let rows = gamma_sweep(&p, &ds, 1, &[0.0, 1.0]).unwrap();
        let sl = report.maps.iter().find(|m| m.map == "sl").unwrap();
        let sg = report.maps.iter().find(|m| m.map == "sg").unwrap();
        for c in 0..N_CLASSES {
            assert!((rows[0].dice[c].mean - sl.dice[c].mean).abs() < 1e-12);
            assert!((rows[1].dice[c].mean - sg.dice[c].mean).abs() < 1e-12);
        }
    }
}
