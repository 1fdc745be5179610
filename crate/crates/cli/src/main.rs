//! `glam`: drives dataset generation, the staged training protocol, patch-set
//! construction, inference with map export, evaluation, and hyperparameter
//! search. Every run writes a `run-manifest.json` (resolved config, seed,
//! input digests) into `--out`; failures print one machine-parseable JSON
//! line on stderr and exit nonzero.

use std::collections::BTreeMap;
use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use glam_core::checkpoint::LoadReport;
use glam_core::dataset::{Dataset, Split};
use glam_core::manifest;
use glam_core::pgm::{self, PgmData};
use glam_core::pipeline::{self, MapAcc, Pipeline, PipelineConfig, SegReport};
use glam_core::saliency::{SaliencyMap, CLASSES, N_CLASSES};
use glam_core::search::{random_search, SearchSpace};
use glam_core::synth::{self, SynthConfig};
use glam_core::train::{self, EpochRecord, StageResult};
use glam_core::Tensor;

#[derive(Parser)]
#[command(
    name = "glam",
    version,
    about = "Weakly-supervised high-resolution lesion localization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic lesion dataset (images, masks, manifest).
    GenData(GenDataArgs),
    /// Stage 1: train the global network alone.
    TrainGlobal(TrainStageArgs),
    /// Stage 2: fix patch locations per image from the global saliency map.
    BuildPatches(BuildPatchesArgs),
    /// Stage 3: train the local network on fixed patch bags (global frozen).
    TrainLocal(TrainLocalArgs),
    /// Stage 4: fine-tune everything jointly with attention and fusion.
    TrainJoint(TrainStageArgs),
    /// Run one image through a checkpoint; export maps and predictions.
    Infer(InferArgs),
    /// Segmentation + classification report for one split.
    Eval(EvalArgs),
    /// Draw hyperparameter trials and write one config file per trial.
    Search(SearchArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::TrainGlobal(a) => cmd_train_global(a),
        Cmd::BuildPatches(a) => cmd_build_patches(a),
        Cmd::TrainLocal(a) => cmd_train_local(a),
        Cmd::TrainJoint(a) => cmd_train_joint(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Search(a) => cmd_search(a),
    }
}

// ---------------------------------------------------------------- plumbing

#[derive(Serialize)]
struct RunManifest {
    subcommand: &'static str,
    seed: u64,
    config: serde_json::Value,
    /// sha256 of each input file named on the command line.
    inputs: BTreeMap<String, String>,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("read {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_run_manifest(
    out: &Path,
    subcommand: &'static str,
    seed: u64,
    config: &impl Serialize,
    inputs: &[&Path],
) -> Result<()> {
    let mut digests = BTreeMap::new();
    for p in inputs {
        digests.insert(p.display().to_string(), sha256_hex(p)?);
    }
    let m = RunManifest {
        subcommand,
        seed,
        config: serde_json::to_value(config)?,
        inputs: digests,
    };
    let path = out.join("run-manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
        .with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn load_pipeline_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("read config {}", path.display()))?;
    let mut cfg = PipelineConfig::from_json(&text)
        .with_context(|| format!("config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn warn_digest(report: &LoadReport, path: &Path) {
    if report.digest_mismatch {
        eprintln!(
            "{}",
            serde_json::json!({
                "warning":
                    format!("{}: checkpoint config digest differs from the provided config", path.display())
            })
        );
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?}; expected train, val, or test")),
    }
}

#[derive(Serialize)]
struct StageSummary {
    stage: u8,
    best_epoch: usize,
    best_dice: f64,
    checkpoint: String,
}

/// Streams epoch records to `<out>/train_log.jsonl` while `body` trains, then
/// writes the checkpoint and a stage summary.
fn run_stage(
    out: &Path,
    stage: u8,
    body: impl FnOnce(&mut dyn FnMut(&EpochRecord) -> glam_core::Result<()>) -> Result<(Pipeline, StageResult)>,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let log_path = out.join("train_log.jsonl");
    let mut w = BufWriter::new(File::create(&log_path)?);
    let mut sink = |r: &EpochRecord| -> glam_core::Result<()> {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
        Ok(())
    };
    let (pipe, result) = body(&mut sink)?;
    w.flush()?;
    let ckpt = out.join("checkpoint.ckpt");
    pipe.save(&ckpt)?;
    let summary = StageSummary {
        stage,
        best_epoch: result.best_epoch,
        best_dice: result.best_dice,
        checkpoint: "checkpoint.ckpt".into(),
    };
    fs::write(
        out.join("stage_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(())
}

fn read_image_tensor(path: &Path) -> Result<(String, Tensor)> {
    let p = pgm::read_pgm(path).with_context(|| format!("image {}", path.display()))?;
    let PgmData::U8(data) = p.data else {
        bail!("image {}: expected an 8-bit PGM", path.display());
    };
    let values: Vec<f64> = data.iter().map(|&v| v as f64 / 255.0).collect();
    let t = Tensor::new(vec![1, p.height, p.width], values)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    Ok((stem, t))
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    /// Generator config JSON; defaults describe the reference dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory to create (images/, masks/, manifest.jsonl).
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("read config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = synth::generate(&cfg)?;
    manifest::write_dataset(
        &a.out,
        &[
            (Split::Train, &data.train),
            (Split::Val, &data.val),
            (Split::Test, &data.test),
        ],
    )?;
    let inputs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    write_run_manifest(&a.out, "gen-data", cfg.seed, &cfg, &inputs)
}

// ---------------------------------------------------------------- training

#[derive(Args)]
struct TrainStageArgs {
    /// Pipeline config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest (JSON lines); trains on `train`, selects on `val`.
    #[arg(long)]
    data: PathBuf,
    /// Prerequisite checkpoint (stage 3 needs stage 1, stage 4 needs stage 3).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train_global(a: TrainStageArgs) -> Result<()> {
    let cfg = load_pipeline_config(&a.config, a.seed)?;
    if let Some(p) = &a.checkpoint {
        bail!("train-global starts from fresh parameters; drop --checkpoint {}", p.display());
    }
    let train_ds = manifest::load_split(&a.data, Split::Train)?;
    let val_ds = manifest::load_split(&a.data, Split::Val)?;
    run_stage(&a.out, 1, |sink| {
        let (mut pipe, _) = Pipeline::for_training(cfg.clone(), 1, None)?;
        let result = train::train_global(&mut pipe, &train_ds, &val_ds, sink)?;
        Ok((pipe, result))
    })?;
    write_run_manifest(&a.out, "train-global", cfg.train.seed, &cfg, &[&a.config, &a.data])
}

#[derive(Args)]
struct BuildPatchesArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Stage-1 checkpoint providing the frozen global saliency.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_build_patches(a: BuildPatchesArgs) -> Result<()> {
    let cfg = load_pipeline_config(&a.config, a.seed)?;
    let (pipe, report) = Pipeline::from_checkpoint(cfg.clone(), &a.checkpoint)?;
    warn_digest(&report, &a.checkpoint);
    fs::create_dir_all(&a.out)?;
    for split in [Split::Train, Split::Val] {
        let ds = manifest::load_split(&a.data, split)?;
        let sets = train::build_patch_sets(&pipe, &ds, split)?;
        let path = a.out.join(format!("patches_{}.jsonl", split.as_str()));
        fs::write(&path, train::render_patch_sets(&sets)?)
            .with_context(|| format!("write {}", path.display()))?;
    }
    write_run_manifest(
        &a.out,
        "build-patches",
        cfg.train.seed,
        &cfg,
        &[&a.config, &a.data, &a.checkpoint],
    )
}

#[derive(Args)]
struct TrainLocalArgs {
    #[command(flatten)]
    stage: TrainStageArgs,
    /// Patch sets for the train split; derived from the checkpoint if omitted.
    #[arg(long)]
    patches_train: Option<PathBuf>,
    /// Patch sets for the val split; derived from the checkpoint if omitted.
    #[arg(long)]
    patches_val: Option<PathBuf>,
}

fn load_or_build_sets(
    pipe: &Pipeline,
    ds: &Dataset,
    split: Split,
    path: &Option<PathBuf>,
) -> Result<Vec<train::PatchSet>> {
    match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("read {}", p.display()))?;
            Ok(train::parse_patch_sets(&text)?)
        }
        None => Ok(train::build_patch_sets(pipe, ds, split)?),
    }
}

fn cmd_train_local(a: TrainLocalArgs) -> Result<()> {
    let s = &a.stage;
    let cfg = load_pipeline_config(&s.config, s.seed)?;
    let Some(ckpt) = &s.checkpoint else {
        bail!("train-local needs --checkpoint with the stage-1 model");
    };
    let train_ds = manifest::load_split(&s.data, Split::Train)?;
    let val_ds = manifest::load_split(&s.data, Split::Val)?;
    run_stage(&s.out, 3, |sink| {
        let (mut pipe, report) = Pipeline::for_training(cfg.clone(), 3, Some(ckpt))?;
        warn_digest(&report.expect("stage 3 loads a prior"), ckpt);
        let train_sets = load_or_build_sets(&pipe, &train_ds, Split::Train, &a.patches_train)?;
        let val_sets = load_or_build_sets(&pipe, &val_ds, Split::Val, &a.patches_val)?;
        let result =
            train::train_local(&mut pipe, &train_ds, &train_sets, &val_ds, &val_sets, sink)?;
        Ok((pipe, result))
    })?;
    let mut inputs: Vec<&Path> = vec![&s.config, &s.data, ckpt];
    inputs.extend(a.patches_train.iter().map(PathBuf::as_path));
    inputs.extend(a.patches_val.iter().map(PathBuf::as_path));
    write_run_manifest(&s.out, "train-local", cfg.train.seed, &cfg, &inputs)
}

fn cmd_train_joint(a: TrainStageArgs) -> Result<()> {
    let cfg = load_pipeline_config(&a.config, a.seed)?;
    let Some(ckpt) = &a.checkpoint else {
        bail!("train-joint needs --checkpoint with the stage-3 model");
    };
    let train_ds = manifest::load_split(&a.data, Split::Train)?;
    let val_ds = manifest::load_split(&a.data, Split::Val)?;
    run_stage(&a.out, 4, |sink| {
        let (mut pipe, report) = Pipeline::for_training(cfg.clone(), 4, Some(ckpt))?;
        warn_digest(&report.expect("stage 4 loads a prior"), ckpt);
        let result = train::train_joint(&mut pipe, &train_ds, &val_ds, sink)?;
        Ok((pipe, result))
    })?;
    write_run_manifest(
        &a.out,
        "train-joint",
        cfg.train.seed,
        &cfg,
        &[&a.config, &a.data, ckpt],
    )
}

// ------------------------------------------------------------------- infer

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Emit {
    Sg,
    Sl,
    Sc,
    S0,
    S1,
    S2,
    Patches,
    Preds,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (8-bit PGM with the config's dimensions).
    #[arg(long)]
    image: PathBuf,
    /// Maps to export, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "sg,preds")]
    emit: Vec<Emit>,
    /// Patches retrieved; defaults to the config's M.
    #[arg(long)]
    m: Option<usize>,
    /// Overrides the config's combination weight.
    #[arg(long)]
    gamma_c: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn write_map(dir: &Path, stem: &str, name: &str, map: &SaliencyMap) -> Result<()> {
    for (c, cls) in CLASSES.iter().enumerate() {
        let plane = map.class_plane(c);
        let (h, w) = plane.dims2()?;
        let path = dir.join(format!("{stem}_{name}_{cls}.pgm"));
        pgm::write_pgm16(&path, w, h, &pgm::quantize16(plane.data()))
            .with_context(|| format!("write {}", path.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct InferRecord<'a> {
    id: &'a str,
    m: usize,
    gamma_c: f64,
    y_hat_g: [f64; N_CLASSES],
    y_hat_l: Option<[f64; N_CLASSES]>,
    y_hat_f: Option<[f64; N_CLASSES]>,
    alpha: Option<&'a [f64]>,
    patches: &'a [glam_core::patches::PatchLocation],
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let cfg = load_pipeline_config(&a.config, None)?;
    let (mut pipe, report) = Pipeline::from_checkpoint(cfg, &a.checkpoint)?;
    warn_digest(&report, &a.checkpoint);
    if let Some(g) = a.gamma_c {
        if !(0.0..=1.0).contains(&g) {
            bail!("gamma_c {g} outside [0, 1]");
        }
        pipe.config.gamma_c = g;
    }
    let m = a.m.unwrap_or(pipe.config.train.m);
    let (stem, image) = read_image_tensor(&a.image)?;
    let out = pipe.infer(&image, m)?;
    fs::create_dir_all(&a.out)?;
    for e in &a.emit {
        match e {
            Emit::Sg => write_map(&a.out, &stem, "sg", &out.global.s_g)?,
            Emit::S0 => write_map(&a.out, &stem, "s0", &out.global.s[0])?,
            Emit::S1 => write_map(&a.out, &stem, "s1", &out.global.s[1])?,
            Emit::S2 => write_map(&a.out, &stem, "s2", &out.global.s[2])?,
            Emit::Sl => match &out.s_l {
                Some(map) => write_map(&a.out, &stem, "sl", map)?,
                None => bail!("--emit sl requires a stage-3 or stage-4 checkpoint"),
            },
            Emit::Sc => match &out.s_c {
                Some(map) => write_map(&a.out, &stem, "sc", map)?,
                None => bail!("--emit sc requires a stage-3 or stage-4 checkpoint"),
            },
            Emit::Patches => {
                if out.patch_maps.is_empty() {
                    bail!("--emit patches requires a stage-3 or stage-4 checkpoint");
                }
                for (i, map) in out.patch_maps.iter().enumerate() {
                    for (c, cls) in CLASSES.iter().enumerate() {
                        let plane = map.channel(c)?;
                        let (h, w) = plane.dims2()?;
                        let path = a.out.join(format!("{stem}_patch{i}_{cls}.pgm"));
                        pgm::write_pgm16(&path, w, h, &pgm::quantize16(plane.data()))?;
                    }
                }
            }
            Emit::Preds => {}
        }
    }
    let record = InferRecord {
        id: &stem,
        m,
        gamma_c: pipe.config.gamma_c,
        y_hat_g: out.global.y_hat_g,
        y_hat_l: out.y_hat_l,
        y_hat_f: out.y_hat_f,
        alpha: out.alpha.as_deref(),
        patches: &out.locations,
    };
    fs::write(
        a.out.join(format!("{stem}_record.json")),
        serde_json::to_string_pretty(&record)? + "\n",
    )?;
    write_run_manifest(
        &a.out,
        "infer",
        pipe.config.train.seed,
        &pipe.config,
        &[&a.config, &a.checkpoint, &a.image],
    )
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MapKind {
    Sg,
    Sl,
    Sc,
}

impl MapKind {
    fn as_str(self) -> &'static str {
        match self {
            MapKind::Sg => "sg",
            MapKind::Sl => "sl",
            MapKind::Sc => "sc",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    /// Evaluate a model checkpoint (mutually exclusive with --maps).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate previously exported maps from this directory.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Which exported map kind to read with --maps.
    #[arg(long, value_enum)]
    map: Option<MapKind>,
    /// Patches retrieved; defaults to the config's M.
    #[arg(long)]
    m: Option<usize>,
    /// Combination weights to sweep, comma-separated.
    #[arg(long, value_delimiter = ',')]
    gamma_sweep: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

fn read_map_plane(path: &Path) -> Result<Tensor> {
    let p = pgm::read_pgm(path).with_context(|| format!("map {}", path.display()))?;
    let PgmData::U16(data) = p.data else {
        bail!("map {}: expected a 16-bit PGM", path.display());
    };
    let values: Vec<f64> = data.iter().map(|&v| v as f64 / 65535.0).collect();
    Ok(Tensor::new(vec![p.height, p.width], values)?)
}

#[derive(Serialize)]
struct FileEvalReport {
    n_examples: usize,
    source: String,
    maps: Vec<SegReport>,
}

fn eval_map_files(dir: &Path, kind: MapKind, ds: &Dataset) -> Result<FileEvalReport> {
    if ds.positives().is_empty() {
        bail!("evaluation needs at least one example with a positive mask");
    }
    let mut acc = MapAcc::new(kind.as_str());
    for ex in &ds.examples {
        let mut planes = Vec::with_capacity(N_CLASSES);
        let mut dims = None;
        for cls in CLASSES {
            let path = dir.join(format!("{}_{}_{cls}.pgm", ex.id, kind.as_str()));
            let plane = read_map_plane(&path)?;
            let d = plane.dims2()?;
            if *dims.get_or_insert(d) != d {
                bail!("{}: class planes disagree on dimensions", path.display());
            }
            planes.push(plane);
        }
        let (h, w) = dims.expect("two classes read");
        let mut values = Vec::with_capacity(N_CLASSES * h * w);
        for p in &planes {
            values.extend_from_slice(p.data());
        }
        let scale = (ex.height / h).max(1);
        let map = SaliencyMap::new(Tensor::new(vec![N_CLASSES, h, w], values)?, scale)?;
        acc.add(&map, ex)?;
    }
    Ok(FileEvalReport {
        n_examples: ds.len(),
        source: format!("map-files:{}", kind.as_str()),
        maps: vec![acc.report()],
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_pipeline_config(&a.config, None)?;
    let ds = manifest::load_split(&a.data, a.split)?;
    fs::create_dir_all(&a.out)?;
    let report_path = a.out.join("report.json");
    match (&a.checkpoint, &a.maps) {
        (Some(ckpt), None) => {
            let (pipe, report) = Pipeline::from_checkpoint(cfg.clone(), ckpt)?;
            warn_digest(&report, ckpt);
            let m = a.m.unwrap_or(pipe.config.train.m);
            let report = pipeline::evaluate(&pipe, &ds, m)?;
            fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
            if let Some(gammas) = &a.gamma_sweep {
                let rows = pipeline::gamma_sweep(&pipe, &ds, m, gammas)?;
                fs::write(
                    a.out.join("gamma_sweep.json"),
                    serde_json::to_string_pretty(&rows)? + "\n",
                )?;
            }
            write_run_manifest(
                &a.out,
                "eval",
                pipe.config.train.seed,
                &pipe.config,
                &[&a.config, &a.data, ckpt],
            )
        }
        (None, Some(dir)) => {
            let Some(kind) = a.map else {
                bail!("--maps needs --map {{sg|sl|sc}} to pick the exported map kind");
            };
            if a.gamma_sweep.is_some() {
                bail!("--gamma-sweep needs a checkpoint source, not --maps");
            }
            let report = eval_map_files(dir, kind, &ds)?;
            fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
            write_run_manifest(&a.out, "eval", cfg.train.seed, &cfg, &[&a.config, &a.data])
        }
        (Some(_), Some(_)) => bail!("--checkpoint and --maps are mutually exclusive"),
        (None, None) => bail!("eval needs a saliency source: --checkpoint or --maps"),
    }
}

// ------------------------------------------------------------------ search

#[derive(Args)]
struct SearchArgs {
    /// Base pipeline config each trial modifies.
    #[arg(long)]
    config: PathBuf,
    /// Search-space JSON; bounds default to the standard ranges.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let base = load_pipeline_config(&a.config, None)?;
    let space: SearchSpace = match &a.space {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("read space {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("space {}", p.display()))?
        }
        None => SearchSpace::default(),
    };
    let trials = random_search(&space, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut lines = String::new();
    for t in &trials {
        lines.push_str(&serde_json::to_string(t)?);
        lines.push('\n');
        let mut cfg = base.clone();
        cfg.train.eta = t.eta;
        cfg.train.lambda = t.lambda;
        cfg.train.t_global = t.t;
        cfg.train.t_local = t.t;
        cfg.resolve();
        fs::write(
            a.out.join(format!("trial_{:03}.json", t.index)),
            serde_json::to_string_pretty(&cfg)? + "\n",
        )?;
    }
    fs::write(a.out.join("trials.jsonl"), lines)?;
    let mut inputs: Vec<&Path> = vec![&a.config];
    inputs.extend(a.space.iter().map(PathBuf::as_path));
    write_run_manifest(
        &a.out,
        "search",
        a.seed,
        &serde_json::json!({ "space": space, "base": base }),
        &inputs,
    )
}
