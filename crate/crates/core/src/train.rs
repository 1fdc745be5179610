//! Four-stage training protocol: balanced epoch sampling, local patch-set
//! construction, the per-stage optimization loops, and validation-Dice model
//! selection.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{GlamError, Result};
use crate::global::GlobalOutput;
use crate::layers::{apply_stat_updates, Fwd, Phase};
use crate::local::{aggregate_concat, assemble_local_map};
use crate::losses::{fused_loss, global_loss, joint_loss, local_loss};
use crate::metrics::auc;
use crate::params::{Adam, AdamConfig, ParamId, ParamRegistry};
use crate::patches::{extract_patches, select_patches, PatchLocation};
use crate::pipeline::{dice_vs_mask, Pipeline, PipelineConfig};
use crate::rng::{derive_seed, rng_from};
use crate::saliency::{SaliencyMap, N_CLASSES};
use crate::tape::{NodeId, Tape, BCE_EPS};
use crate::tensor::Tensor;

fn default_eta() -> f64 {
    1e-4
}
fn default_lambda() -> f64 {
    1e-4
}
fn default_t_global() -> f64 {
    2.0
}
fn default_t_local() -> f64 {
    20.0
}
fn default_k() -> usize {
    6
}
fn default_m() -> usize {
    1
}
fn default_epochs_global() -> usize {
    50
}
fn default_epochs_local() -> usize {
    20
}
fn default_epochs_joint() -> usize {
    5
}
fn default_batch() -> usize {
    1
}
fn default_flip() -> bool {
    true
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// How lesion-free images contribute patches to the local training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Uniformly random in-bounds patches (default).
    #[default]
    RandomNegatives,
    /// Greedy saliency-driven patches, same as positives.
    GlobalProposals,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_t_global")]
    pub t_global: f64,
    #[serde(default = "default_t_local")]
    pub t_local: f64,
    /// Patches per image during local training.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Patches retrieved at inference.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_epochs_global")]
    pub epochs_global: usize,
    #[serde(default = "default_epochs_local")]
    pub epochs_local: usize,
    #[serde(default = "default_epochs_joint")]
    pub epochs_joint: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub negative_sampling: NegativeSampling,
    /// Horizontal-flip augmentation on training examples.
    #[serde(default = "default_flip")]
    pub flip: bool,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: default_eta(),
            lambda: default_lambda(),
            t_global: default_t_global(),
            t_local: default_t_local(),
            k: default_k(),
            m: default_m(),
            epochs_global: default_epochs_global(),
            epochs_local: default_epochs_local(),
            epochs_joint: default_epochs_joint(),
            batch: default_batch(),
            seed: 0,
            negative_sampling: NegativeSampling::RandomNegatives,
            flip: default_flip(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(GlamError::config(format!("eta {} must be positive", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GlamError::config(format!(
                "lambda {} must be nonnegative",
                self.lambda
            )));
        }
        if self.k == 0 || self.m == 0 || self.batch == 0 {
            return Err(GlamError::config("k, m, and batch must be >= 1"));
        }
        for (name, t) in [("t_global", self.t_global), ("t_local", self.t_local)] {
            if !(t > 0.0 && t <= 100.0) {
                return Err(GlamError::config(format!("{name} {t} outside (0, 100]")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(GlamError::config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(GlamError::config("adam_eps must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            eta: self.eta,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// One metrics line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub dice_malignant: Option<f64>,
    pub dice_benign: Option<f64>,
    pub auc_malignant: Option<f64>,
    pub auc_benign: Option<f64>,
}

pub type RecordSink<'a> = &'a mut dyn FnMut(&EpochRecord) -> Result<()>;

#[derive(Debug)]
pub struct StageResult {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dice: f64,
}

// Disjoint RNG streams per stage and for patch-set sampling.
const SEED_STAGE1: u64 = 0x675f31;
const SEED_STAGE3: u64 = 0x675f33;
const SEED_STAGE4: u64 = 0x675f34;
const SEED_PATCH_SETS: u64 = 0x705f32;

/// Balanced epoch: every positive example once, plus an equal number of
/// negatives (without replacement when possible), shuffled.
pub fn sample_epoch(ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let pos = ds.positives();
    let neg = ds.negatives();
    if pos.is_empty() || neg.is_empty() {
        return Err(GlamError::config(
            "balanced sampling needs at least one positive and one negative example",
        ));
    }
    let mut chosen: Vec<usize> = if neg.len() >= pos.len() {
        let mut idx = neg;
        let (sampled, _) = idx.partial_shuffle(rng, pos.len());
        sampled.to_vec()
    } else {
        (0..pos.len()).map(|_| neg[rng.gen_range(0..neg.len())]).collect()
    };
    let mut order = pos;
    order.append(&mut chosen);
    order.shuffle(rng);
    Ok(order)
}

/// One image's local-training bag: fixed patch locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSet {
    pub id: String,
    pub locations: Vec<PatchLocation>,
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x74726e,
        Split::Val => 0x76616c,
        Split::Test => 0x747374,
    }
}

/// Stage 2: K patch locations per image. Positives use greedy saliency
/// selection on the (frozen) global net; lesion-free images use uniformly
/// random in-bounds corners unless `global_proposals` is configured.
pub fn build_patch_sets(pipe: &Pipeline, ds: &Dataset, split: Split) -> Result<Vec<PatchSet>> {
    let cfg = &pipe.config;
    let k = cfg.train.k;
    let (ph, pw) = (cfg.local.patch_h, cfg.local.patch_w);
    let base = cfg.train.seed ^ SEED_PATCH_SETS ^ split_salt(split);
    let mut sets = Vec::with_capacity(ds.len());
    for (i, ex) in ds.examples.iter().enumerate() {
        let greedy = ex.positive()
            || cfg.train.negative_sampling == NegativeSampling::GlobalProposals;
        let locations = if greedy {
            let g = pipe.global.infer(&pipe.reg, &ex.image_tensor())?;
            select_patches(&g.s_g, k, (ph, pw), (ex.height, ex.width))?
        } else {
            let mut rng = rng_from(derive_seed(base, i as u64));
            (0..k)
                .map(|_| PatchLocation {
                    row: rng.gen_range(0..=ex.height - ph),
                    col: rng.gen_range(0..=ex.width - pw),
                    h: ph,
                    w: pw,
                })
                .collect()
        };
        sets.push(PatchSet {
            id: ex.id.clone(),
            locations,
        });
    }
    Ok(sets)
}

/// One JSON object per line.
pub fn render_patch_sets(sets: &[PatchSet]) -> Result<String> {
    let mut out = String::new();
    for s in sets {
        out.push_str(
            &serde_json::to_string(s).map_err(|e| GlamError::manifest(format!("patch set: {e}")))?,
        );
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_patch_sets(text: &str) -> Result<Vec<PatchSet>> {
    let mut sets = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: PatchSet = serde_json::from_str(line)
            .map_err(|e| GlamError::manifest(format!("patch sets line {}: {e}", ln + 1)))?;
        sets.push(s);
    }
    Ok(sets)
}

/// A stage-2 artifact must line up with the dataset it will train on.
pub fn check_patch_sets(ds: &Dataset, sets: &[PatchSet], cfg: &PipelineConfig) -> Result<()> {
    if ds.len() != sets.len() {
        return Err(GlamError::config(format!(
            "patch sets cover {} images, dataset has {}",
            sets.len(),
            ds.len()
        )));
    }
    for (ex, set) in ds.examples.iter().zip(sets) {
        if ex.id != set.id {
            return Err(GlamError::config(format!(
                "patch set id {} does not match example {}",
                set.id, ex.id
            )));
        }
        if set.locations.len() != cfg.train.k {
            return Err(GlamError::config(format!(
                "{}: {} patches, config k = {}",
                set.id,
                set.locations.len(),
                cfg.train.k
            )));
        }
        for loc in &set.locations {
            if loc.h != cfg.local.patch_h
                || loc.w != cfg.local.patch_w
                || loc.row + loc.h > ex.height
                || loc.col + loc.w > ex.width
            {
                return Err(GlamError::config(format!(
                    "{}: patch at ({}, {}) size {}x{} invalid for {}x{} image",
                    set.id, loc.row, loc.col, loc.h, loc.w, ex.height, ex.width
                )));
            }
        }
    }
    Ok(())
}

fn check_dims(ds: &Dataset, cfg: &PipelineConfig) -> Result<()> {
    for ex in &ds.examples {
        if ex.height != cfg.global.input_h || ex.width != cfg.global.input_w {
            return Err(GlamError::config(format!(
                "example {} is {}x{}, config expects {}x{}",
                ex.id, ex.height, ex.width, cfg.global.input_h, cfg.global.input_w
            )));
        }
    }
    Ok(())
}

fn snapshot(reg: &ParamRegistry) -> Vec<Tensor> {
    reg.iter().map(|p| p.value.clone()).collect()
}

fn restore(reg: &mut ParamRegistry, snap: &[Tensor]) {
    for (i, t) in snap.iter().enumerate() {
        reg.get_mut(ParamId(i)).value = t.clone();
    }
}

fn flip_patch(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ci * h + i) * w + j] = src[(ci * h + i) * w + (w - 1 - j)];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Summed two-class binary cross-entropy on plain probabilities.
fn bce_numeric(p: &[f64], y: &[f64; N_CLASSES]) -> f64 {
    let mut total = 0.0;
    for c in 0..N_CLASSES {
        let q = p[c].clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= y[c] * q.ln() + (1.0 - y[c]) * (1.0 - q).ln();
    }
    total
}

/// L_g recomputed from inference outputs (no tape).
fn global_loss_numeric(g: &GlobalOutput, y: &[f64; N_CLASSES], lambda: f64) -> f64 {
    let mut total = 0.0;
    for n in 0..3 {
        total += bce_numeric(&g.y_tilde[n], y);
        total += lambda * g.s[n].values.data().iter().sum::<f64>();
    }
    total
}

struct ValMetrics {
    loss: f64,
    dice: [Option<f64>; N_CLASSES],
    auc: [Option<f64>; N_CLASSES],
    /// Mean of the per-class Dice means; the model-selection criterion.
    selection: f64,
}

#[derive(Default)]
struct ValAcc {
    loss_sum: f64,
    n: usize,
    dices: [Vec<f64>; N_CLASSES],
    scores: [Vec<f64>; N_CLASSES],
    labels: [Vec<bool>; N_CLASSES],
}

impl ValAcc {
    fn push(&mut self, loss: f64, y_hat: &[f64; N_CLASSES], labels: &[bool; N_CLASSES]) {
        self.loss_sum += loss;
        self.n += 1;
        for c in 0..N_CLASSES {
            self.scores[c].push(y_hat[c]);
            self.labels[c].push(labels[c]);
        }
    }

    fn finish(self) -> ValMetrics {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let dice = [mean(&self.dices[0]), mean(&self.dices[1])];
        let present: Vec<f64> = dice.iter().flatten().copied().collect();
        let selection = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        ValMetrics {
            loss: self.loss_sum / self.n.max(1) as f64,
            dice,
            auc: [
                auc(&self.scores[0], &self.labels[0]),
                auc(&self.scores[1], &self.labels[1]),
            ],
            selection,
        }
    }
}

fn val_record(stage: u8, epoch: usize, vm: &ValMetrics) -> EpochRecord {
    EpochRecord {
        stage,
        epoch,
        split: "val".to_string(),
        loss: vm.loss,
        dice_malignant: vm.dice[0],
        dice_benign: vm.dice[1],
        auc_malignant: vm.auc[0],
        auc_benign: vm.auc[1],
    }
}

fn train_record(stage: u8, epoch: usize, loss: f64) -> EpochRecord {
    EpochRecord {
        stage,
        epoch,
        split: "train".to_string(),
        loss,
        dice_malignant: None,
        dice_benign: None,
        auc_malignant: None,
        auc_benign: None,
    }
}

fn emit(
    records: &mut Vec<EpochRecord>,
    sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
    rec: EpochRecord,
) -> Result<()> {
    sink(&rec)?;
    records.push(rec);
    Ok(())
}

fn global_val(pipe: &Pipeline, ds: &Dataset) -> Result<ValMetrics> {
    let lambda = pipe.config.train.lambda;
    let mut acc = ValAcc::default();
    for ex in &ds.examples {
        let g = pipe.global.infer(&pipe.reg, &ex.image_tensor())?;
        let loss = global_loss_numeric(&g, &ex.label_vec(), lambda);
        for c in 0..N_CLASSES {
            if ex.labels[c] {
                acc.dices[c].push(dice_vs_mask(&g.s_g, ex, c)?);
            }
        }
        acc.push(loss, &g.y_hat_g, &ex.labels);
    }
    Ok(acc.finish())
}

/// Stage 1: the global net alone under L_g; selection by val Dice of S_g.
pub fn train_global(
    pipe: &mut Pipeline,
    train_ds: &Dataset,
    val_ds: &Dataset,
    sink: RecordSink,
) -> Result<StageResult> {
    check_dims(train_ds, &pipe.config)?;
    check_dims(val_ds, &pipe.config)?;
    if val_ds.is_empty() {
        return Err(GlamError::config("stage 1 needs a non-empty validation split"));
    }
    let cfg = pipe.config.train.clone();
    let mut opt = Adam::new(cfg.adam());
    let mut rng = rng_from(cfg.seed ^ SEED_STAGE1);
    let mut records = Vec::new();

    let vm = global_val(pipe, val_ds)?;
    let mut best_epoch = 0usize;
    let mut best_dice = vm.selection;
    let mut best_params = snapshot(&pipe.reg);
    emit(&mut records, sink, val_record(1, 0, &vm))?;

    for epoch in 1..=cfg.epochs_global {
        let order = sample_epoch(train_ds, &mut rng)?;
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            pipe.reg.zero_grads();
            for &idx in batch {
                let ex = &train_ds.examples[idx];
                let flip = cfg.flip && rng.gen_bool(0.5);
                let image = if flip {
                    ex.image_tensor_flipped()
                } else {
                    ex.image_tensor()
                };
                let mut tape = Tape::new();
                let x = tape.leaf(image);
                let mut f = Fwd::new(&mut tape, Phase::Train);
                let nodes = pipe.global.forward(&mut f, &pipe.reg, x)?;
                let loss =
                    global_loss(f.tape, &nodes.y_tilde, &nodes.s, &ex.label_vec(), cfg.lambda)?;
                let (bind, updates) = f.finish();
                tape.backward(loss)?;
                bind.accumulate_grads(&tape, &mut pipe.reg);
                apply_stat_updates(updates, &mut pipe.reg);
                loss_sum += tape.value(loss).item();
            }
            pipe.reg.scale_grads(1.0 / batch.len() as f64);
            opt.step(&mut pipe.reg);
        }
        emit(&mut records, sink, train_record(1, epoch, loss_sum / order.len() as f64))?;
        let vm = global_val(pipe, val_ds)?;
        emit(&mut records, sink, val_record(1, epoch, &vm))?;
        if vm.selection > best_dice {
            best_dice = vm.selection;
            best_epoch = epoch;
            best_params = snapshot(&pipe.reg);
        }
    }
    restore(&mut pipe.reg, &best_params);
    pipe.stage = 1;
    Ok(StageResult {
        records,
        best_epoch,
        best_dice,
    })
}

/// Forwards one bag of patches, returning (patch map nodes, aggregated
/// prediction node).
fn forward_bag(
    pipe: &Pipeline,
    f: &mut Fwd,
    patches: Vec<Tensor>,
) -> Result<(Vec<NodeId>, NodeId)> {
    let local = pipe.local.as_ref().expect("caller checked the local net");
    let mut maps = Vec::with_capacity(patches.len());
    for p in patches {
        let leaf = f.tape.leaf(p);
        let out = local.forward_patch(f, &pipe.reg, leaf)?;
        maps.push(out.a);
    }
    let y_l = aggregate_concat(f.tape, &maps, pipe.config.local.t_local)?;
    Ok((maps, y_l))
}

fn local_val(pipe: &Pipeline, ds: &Dataset, sets: &[PatchSet]) -> Result<ValMetrics> {
    let lambda = pipe.config.train.lambda;
    let mut acc = ValAcc::default();
    for (ex, set) in ds.examples.iter().zip(sets) {
        let patches = extract_patches(&ex.image_tensor(), &set.locations)?;
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, Phase::Eval);
        let (maps, y_l) = forward_bag(pipe, &mut f, patches)?;
        drop(f);
        let y_hat = {
            let d = tape.value(y_l).data();
            [d[0], d[1]]
        };
        let map_values: Vec<Tensor> = maps.iter().map(|&n| tape.value(n).clone()).collect();
        let mut loss = bce_numeric(&y_hat, &ex.label_vec());
        for m in &map_values {
            loss += lambda * m.data().iter().sum::<f64>();
        }
        let s_l = assemble_local_map(&map_values, &set.locations, (ex.height, ex.width))?;
        for c in 0..N_CLASSES {
            if ex.labels[c] {
                acc.dices[c].push(dice_vs_mask(&s_l, ex, c)?);
            }
        }
        acc.push(loss, &y_hat, &ex.labels);
    }
    Ok(acc.finish())
}

/// Stage 3: the local net on fixed patch bags under L_l with concatenation
/// aggregation; the global net stays frozen. Selection by val Dice of S_l.
pub fn train_local(
    pipe: &mut Pipeline,
    train_ds: &Dataset,
    train_sets: &[PatchSet],
    val_ds: &Dataset,
    val_sets: &[PatchSet],
    sink: RecordSink,
) -> Result<StageResult> {
    if pipe.local.is_none() {
        return Err(GlamError::prerequisite(
            "stage 3 needs a local net; construct the pipeline at stage 3",
        ));
    }
    check_dims(train_ds, &pipe.config)?;
    check_dims(val_ds, &pipe.config)?;
    check_patch_sets(train_ds, train_sets, &pipe.config)?;
    check_patch_sets(val_ds, val_sets, &pipe.config)?;
    if val_ds.is_empty() {
        return Err(GlamError::config("stage 3 needs a non-empty validation split"));
    }
    pipe.reg.set_trainable_prefix("global/", false);
    let cfg = pipe.config.train.clone();
    let mut opt = Adam::new(cfg.adam());
    let mut rng = rng_from(cfg.seed ^ SEED_STAGE3);
    let mut records = Vec::new();

    let vm = local_val(pipe, val_ds, val_sets)?;
    let mut best_epoch = 0usize;
    let mut best_dice = vm.selection;
    let mut best_params = snapshot(&pipe.reg);
    emit(&mut records, sink, val_record(3, 0, &vm))?;

    for epoch in 1..=cfg.epochs_local {
        let order = sample_epoch(train_ds, &mut rng)?;
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            pipe.reg.zero_grads();
            for &idx in batch {
                let ex = &train_ds.examples[idx];
                let mut patches = extract_patches(&ex.image_tensor(), &train_sets[idx].locations)?;
                if cfg.flip && rng.gen_bool(0.5) {
                    patches = patches.iter().map(flip_patch).collect::<Result<_>>()?;
                }
                let mut tape = Tape::new();
                let mut f = Fwd::new(&mut tape, Phase::Train);
                let (maps, y_l) = forward_bag(pipe, &mut f, patches)?;
                let loss = local_loss(f.tape, y_l, &maps, &ex.label_vec(), cfg.lambda)?;
                let (bind, updates) = f.finish();
                tape.backward(loss)?;
                bind.accumulate_grads(&tape, &mut pipe.reg);
                apply_stat_updates(updates, &mut pipe.reg);
                loss_sum += tape.value(loss).item();
            }
            pipe.reg.scale_grads(1.0 / batch.len() as f64);
            opt.step(&mut pipe.reg);
        }
        emit(&mut records, sink, train_record(3, epoch, loss_sum / order.len() as f64))?;
        let vm = local_val(pipe, val_ds, val_sets)?;
        emit(&mut records, sink, val_record(3, epoch, &vm))?;
        if vm.selection > best_dice {
            best_dice = vm.selection;
            best_epoch = epoch;
            best_params = snapshot(&pipe.reg);
        }
    }
    restore(&mut pipe.reg, &best_params);
    pipe.stage = 3;
    Ok(StageResult {
        records,
        best_epoch,
        best_dice,
    })
}

fn joint_val(pipe: &Pipeline, ds: &Dataset) -> Result<ValMetrics> {
    let lambda = pipe.config.train.lambda;
    let m = pipe.config.train.m;
    let mut acc = ValAcc::default();
    for ex in &ds.examples {
        let out = pipe.infer(&ex.image_tensor(), m)?;
        let y = ex.label_vec();
        let y_l = out.y_hat_l.expect("stage-4 model");
        let y_f = out.y_hat_f.expect("stage-4 model");
        let mut loss = global_loss_numeric(&out.global, &y, lambda);
        loss += bce_numeric(&y_l, &y);
        for map in &out.patch_maps {
            loss += lambda * map.data().iter().sum::<f64>();
        }
        loss += bce_numeric(&y_f, &y);
        let s_c = out.s_c.expect("stage-4 model");
        for c in 0..N_CLASSES {
            if ex.labels[c] {
                acc.dices[c].push(dice_vs_mask(&s_c, ex, c)?);
            }
        }
        acc.push(loss, &y_f, &ex.labels);
    }
    Ok(acc.finish())
}

/// Stage 4: everything unfrozen, attention aggregation plus the fusion head,
/// optimizing L_t = L_g + L_l + L_f. Selection by val Dice of S_c.
pub fn train_joint(
    pipe: &mut Pipeline,
    train_ds: &Dataset,
    val_ds: &Dataset,
    sink: RecordSink,
) -> Result<StageResult> {
    if pipe.local.is_none() || pipe.attention.is_none() || pipe.fusion.is_none() {
        return Err(GlamError::prerequisite(
            "stage 4 needs local, attention, and fusion heads; construct the pipeline at stage 4",
        ));
    }
    check_dims(train_ds, &pipe.config)?;
    check_dims(val_ds, &pipe.config)?;
    if val_ds.is_empty() {
        return Err(GlamError::config("stage 4 needs a non-empty validation split"));
    }
    pipe.reg.set_trainable_prefix("", true);
    let cfg = pipe.config.train.clone();
    let (ph, pw) = (pipe.config.local.patch_h, pipe.config.local.patch_w);
    let scale = pipe.config.global.downsample[0];
    let mut opt = Adam::new(cfg.adam());
    let mut rng = rng_from(cfg.seed ^ SEED_STAGE4);
    let mut records = Vec::new();

    let vm = joint_val(pipe, val_ds)?;
    let mut best_epoch = 0usize;
    let mut best_dice = vm.selection;
    let mut best_params = snapshot(&pipe.reg);
    emit(&mut records, sink, val_record(4, 0, &vm))?;

    for epoch in 1..=cfg.epochs_joint {
        let order = sample_epoch(train_ds, &mut rng)?;
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            pipe.reg.zero_grads();
            for &idx in batch {
                let ex = &train_ds.examples[idx];
                let flip = cfg.flip && rng.gen_bool(0.5);
                let image = if flip {
                    ex.image_tensor_flipped()
                } else {
                    ex.image_tensor()
                };
                let y = ex.label_vec();
                let mut tape = Tape::new();
                let x = tape.leaf(image);
                let mut f = Fwd::new(&mut tape, Phase::Train);
                let gnodes = pipe.global.forward(&mut f, &pipe.reg, x)?;
                // Training patches follow the live S_g; selection is
                // detached, so patch gradients do not flow into the global
                // net through the crop.
                let sg = SaliencyMap::new(f.tape.value(gnodes.s_g).clone(), scale)?;
                let locations = select_patches(&sg, cfg.k, (ph, pw), (ex.height, ex.width))?;
                let patches = extract_patches(f.tape.value(x), &locations)?;
                let local = pipe.local.as_ref().expect("checked above");
                let mut maps = Vec::with_capacity(patches.len());
                let mut preds = Vec::with_capacity(patches.len());
                let mut vecs = Vec::with_capacity(patches.len());
                for p in patches {
                    let leaf = f.tape.leaf(p);
                    let out = local.forward_patch(&mut f, &pipe.reg, leaf)?;
                    maps.push(out.a);
                    preds.push(out.y);
                    vecs.push(out.z);
                }
                let att = pipe.attention.as_ref().expect("checked above");
                let (y_l, z_l, _alpha) = att.aggregate(&mut f, &pipe.reg, &preds, &vecs)?;
                let fus = pipe.fusion.as_ref().expect("checked above");
                let y_f = fus.fuse(&mut f, &pipe.reg, gnodes.z_g, z_l)?;
                let lg = global_loss(f.tape, &gnodes.y_tilde, &gnodes.s, &y, cfg.lambda)?;
                let ll = local_loss(f.tape, y_l, &maps, &y, cfg.lambda)?;
                let lf = fused_loss(f.tape, y_f, &y)?;
                let lt = joint_loss(f.tape, lg, ll, lf)?;
                let (bind, updates) = f.finish();
                tape.backward(lt)?;
                bind.accumulate_grads(&tape, &mut pipe.reg);
                apply_stat_updates(updates, &mut pipe.reg);
                loss_sum += tape.value(lt).item();
            }
            pipe.reg.scale_grads(1.0 / batch.len() as f64);
            opt.step(&mut pipe.reg);
        }
        emit(&mut records, sink, train_record(4, epoch, loss_sum / order.len() as f64))?;
        let vm = joint_val(pipe, val_ds)?;
        emit(&mut records, sink, val_record(4, epoch, &vm))?;
        if vm.selection > best_dice {
            best_dice = vm.selection;
            best_epoch = epoch;
            best_params = snapshot(&pipe.reg);
        }
    }
    restore(&mut pipe.reg, &best_params);
    pipe.stage = 4;
    Ok(StageResult {
        records,
        best_epoch,
        best_dice,
    })
}
