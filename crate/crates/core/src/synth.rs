//! Synthetic small-lesion dataset generator. Backgrounds are smooth value
//! noise shaped by a half-ellipse intensity falloff; benign lesions are
//! low-contrast smooth bumps, malignant lesions higher-contrast bumps with
//! radial spikes. Masks are the exact support of the added intensity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example, Split};
use crate::error::{GlamError, Result};
use crate::rng::{derive_seed, rng_from};
use crate::saliency::N_CLASSES;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Probability that an example carries a malignant / benign lesion;
    /// the two draws are independent, so examples may carry both.
    #[serde(default = "default_pos_frac")]
    pub pos_frac_malignant: f64,
    #[serde(default = "default_pos_frac")]
    pub pos_frac_benign: f64,
    /// Lesions per positive class, inclusive range.
    #[serde(default = "default_count")]
    pub lesion_count: (usize, usize),
    /// Lesion radius as a fraction of min(height, width), inclusive range.
    #[serde(default = "default_radius")]
    pub lesion_radius_frac: (f64, f64),
    #[serde(default = "default_malignant_contrast")]
    pub malignant_contrast: (f64, f64),
    #[serde(default = "default_benign_contrast")]
    pub benign_contrast: (f64, f64),
    /// Base octave cell count across the short image side.
    #[serde(default = "default_background_cells")]
    pub background_cells: usize,
    #[serde(default = "default_background_amplitude")]
    pub background_amplitude: f64,
    /// Per-example cap on total mask area as a fraction of pixels.
    #[serde(default = "default_area_budget")]
    pub area_budget: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_pos_frac() -> f64 {
    0.35
}
fn default_count() -> (usize, usize) {
    (1, 1)
}
fn default_radius() -> (f64, f64) {
    (0.015, 0.03)
}
fn default_malignant_contrast() -> (f64, f64) {
    (0.45, 0.60)
}
fn default_benign_contrast() -> (f64, f64) {
    (0.22, 0.38)
}
fn default_background_cells() -> usize {
    4
}
fn default_background_amplitude() -> f64 {
    0.40
}
fn default_area_budget() -> f64 {
    0.01
}

const AXIS_JITTER: f64 = 0.2;
const MAX_SPIKES: usize = 8;
const SPIKE_LEN_MAX: f64 = 2.2;

impl Default for SynthConfig {
    /// The reference desk-scale dataset: 768x512 images, 600/150/150 splits.
    fn default() -> Self {
        SynthConfig {
            height: 768,
            width: 512,
            n_train: 600,
            n_val: 150,
            n_test: 150,
            pos_frac_malignant: default_pos_frac(),
            pos_frac_benign: default_pos_frac(),
            lesion_count: default_count(),
            lesion_radius_frac: default_radius(),
            malignant_contrast: default_malignant_contrast(),
            benign_contrast: default_benign_contrast(),
            background_cells: default_background_cells(),
            background_amplitude: default_background_amplitude(),
            area_budget: default_area_budget(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(GlamError::config("synth: dims must be at least 16x16"));
        }
        for (name, f) in [
            ("pos_frac_malignant", self.pos_frac_malignant),
            ("pos_frac_benign", self.pos_frac_benign),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(GlamError::config(format!("synth: {name} {f} outside [0, 1]")));
            }
        }
        let (c_lo, c_hi) = self.lesion_count;
        if c_lo < 1 || c_lo > c_hi {
            return Err(GlamError::config(format!(
                "synth: lesion_count ({c_lo}, {c_hi}) must satisfy 1 <= lo <= hi"
            )));
        }
        let (r_lo, r_hi) = self.lesion_radius_frac;
        if !(r_lo > 0.0 && r_lo <= r_hi && r_hi <= 0.25) {
            return Err(GlamError::config(format!(
                "synth: lesion_radius_frac ({r_lo}, {r_hi}) must satisfy 0 < lo <= hi <= 0.25"
            )));
        }
        for (name, (lo, hi)) in [
            ("malignant_contrast", self.malignant_contrast),
            ("benign_contrast", self.benign_contrast),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(GlamError::config(format!(
                    "synth: {name} ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
                )));
            }
        }
        if self.background_cells < 2 {
            return Err(GlamError::config("synth: background_cells must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.background_amplitude) {
            return Err(GlamError::config("synth: background_amplitude outside [0, 1]"));
        }
        if !(self.area_budget > 0.0 && self.area_budget <= 0.25) {
            return Err(GlamError::config("synth: area_budget outside (0, 0.25]"));
        }
        // Worst case: both classes positive at max count and radius. Each
        // lesion covers at most its jittered ellipse; malignant lesions add
        // spike strokes of length <= SPIKE_LEN_MAX * r in a 2*width band.
        let r_px = r_hi * self.height.min(self.width) as f64;
        let axis = r_px * (1.0 + AXIS_JITTER);
        let ellipse = std::f64::consts::PI * axis * axis;
        let spike_w = (r_px * 0.15).max(1.2);
        let spikes = MAX_SPIKES as f64 * (SPIKE_LEN_MAX * r_px * 2.0 * spike_w + 4.0);
        let worst = c_hi as f64 * (2.0 * ellipse + spikes) + 8.0;
        let allowed = self.area_budget * (self.height * self.width) as f64;
        if worst > allowed {
            return Err(GlamError::config(format!(
                "synth: infeasible area budget: worst-case lesion area {worst:.0} px exceeds {allowed:.0} px \
                 ({} of {}x{}); reduce lesion_count/lesion_radius_frac or raise area_budget",
                self.area_budget, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Bilinearly interpolated random grid ("value noise") with `cells` cells
/// across the short side, one octave.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let cell = (h.min(w) as f64 / cells as f64).max(1.0);
    let gh = (h as f64 / cell).ceil() as usize + 1;
    let gw = (w as f64 / cell).ceil() as usize + 1;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let u = i as f64 / cell;
        let u0 = (u.floor() as usize).min(gh - 2);
        let fu = u - u0 as f64;
        for j in 0..w {
            let v = j as f64 / cell;
            let v0 = (v.floor() as usize).min(gw - 2);
            let fv = v - v0 as f64;
            let a = grid[u0 * gw + v0];
            let b = grid[u0 * gw + v0 + 1];
            let c = grid[(u0 + 1) * gw + v0];
            let d = grid[(u0 + 1) * gw + v0 + 1];
            out[i * w + j] =
                a * (1.0 - fu) * (1.0 - fv) + b * (1.0 - fu) * fv + c * fu * (1.0 - fv) + d * fu * fv;
        }
    }
    out
}

/// Half-ellipse intensity falloff anchored at the left edge, mimicking a
/// breast boundary: brightest at the mid-left, fading to zero rightwards.
fn falloff(i: usize, j: usize, h: usize, w: usize) -> f64 {
    let y = (i as f64 - h as f64 / 2.0) / (0.58 * h as f64);
    let x = j as f64 / (0.92 * w as f64);
    (1.0 - x * x - y * y).max(0.0)
}

fn render_background(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut noise = vec![0.0; h * w];
    let mut total_amp = 0.0;
    for octave in 0..3 {
        let amp = 0.5f64.powi(octave);
        total_amp += amp;
        let layer = value_noise(rng, h, w, cfg.background_cells << octave);
        for (n, l) in noise.iter_mut().zip(&layer) {
            *n += amp * l;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let n = noise[i * w + j] / total_amp;
            out[i * w + j] = (0.08 + cfg.background_amplitude * n) * falloff(i, j, h, w);
        }
    }
    out
}

/// Adds one smooth elliptical bump; intensity peaks at the center and falls
/// to zero at the boundary, so the support is exactly the open ellipse.
fn render_bump(layer: &mut [f64], h: usize, w: usize, ci: f64, cj: f64, ry: f64, rx: f64, contrast: f64) {
    let i0 = ((ci - ry).floor().max(0.0)) as usize;
    let i1 = ((ci + ry).ceil() as usize).min(h.saturating_sub(1));
    let j0 = ((cj - rx).floor().max(0.0)) as usize;
    let j1 = ((cj + rx).ceil() as usize).min(w.saturating_sub(1));
    for i in i0..=i1 {
        for j in j0..=j1 {
            let dy = (i as f64 - ci) / ry;
            let dx = (j as f64 - cj) / rx;
            let d2 = dy * dy + dx * dx;
            if d2 < 1.0 {
                layer[i * w + j] += contrast * (1.0 - d2);
            }
        }
    }
}

/// Adds a thin radial stroke from the lesion center outwards; intensity
/// tapers linearly to zero at the tip.
fn render_spike(
    layer: &mut [f64],
    h: usize,
    w: usize,
    ci: f64,
    cj: f64,
    angle: f64,
    len: f64,
    width: f64,
    contrast: f64,
) {
    let (di, dj) = (angle.sin(), angle.cos());
    let ti = ci + di * len;
    let tj = cj + dj * len;
    let i0 = (ci.min(ti) - width).floor().max(0.0) as usize;
    let i1 = ((ci.max(ti) + width).ceil() as usize).min(h.saturating_sub(1));
    let j0 = (cj.min(tj) - width).floor().max(0.0) as usize;
    let j1 = ((cj.max(tj) + width).ceil() as usize).min(w.saturating_sub(1));
    for i in i0..=i1 {
        for j in j0..=j1 {
            let vi = i as f64 - ci;
            let vj = j as f64 - cj;
            let t = ((vi * di + vj * dj) / len).clamp(0.0, 1.0);
            let pi = t * len * di;
            let pj = t * len * dj;
            let dist = ((vi - pi).powi(2) + (vj - pj).powi(2)).sqrt();
            if dist < width && t < 1.0 {
                let taper = (1.0 - t) * (1.0 - dist / width);
                if taper > 0.0 {
                    layer[i * w + j] += contrast * 0.8 * taper;
                }
            }
        }
    }
}

fn render_lesions(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    class: usize,
    layer: &mut [f64],
) {
    let (h, w) = (cfg.height, cfg.width);
    let min_dim = h.min(w) as f64;
    let count = rng.gen_range(cfg.lesion_count.0..=cfg.lesion_count.1);
    let (c_lo, c_hi) = if class == 0 {
        cfg.malignant_contrast
    } else {
        cfg.benign_contrast
    };
    for _ in 0..count {
        let radius = rng.gen_range(cfg.lesion_radius_frac.0..=cfg.lesion_radius_frac.1) * min_dim;
        let contrast = rng.gen_range(c_lo..=c_hi);
        let margin = (radius * SPIKE_LEN_MAX).ceil() + 2.0;
        let mut ci = h as f64 / 2.0;
        let mut cj = w as f64 * 0.25;
        if margin < h as f64 - margin && margin < w as f64 - margin {
            for _ in 0..50 {
                let i = rng.gen_range(margin..h as f64 - margin);
                let j = rng.gen_range(margin..w as f64 - margin);
                if falloff(i as usize, j as usize, h, w) >= 0.2 {
                    ci = i;
                    cj = j;
                    break;
                }
            }
        }
        let ry = radius * (1.0 + rng.gen_range(-AXIS_JITTER..=AXIS_JITTER));
        let rx = radius * (1.0 + rng.gen_range(-AXIS_JITTER..=AXIS_JITTER));
        render_bump(layer, h, w, ci, cj, ry, rx, contrast);
        if class == 0 {
            let n_spikes = rng.gen_range(4..=MAX_SPIKES);
            let width = (radius * 0.15).max(1.2);
            for _ in 0..n_spikes {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let len = radius * rng.gen_range(1.3..=SPIKE_LEN_MAX);
                render_spike(layer, h, w, ci, cj, angle, len, width, contrast);
            }
        }
        // Guarantee a nonempty support even for sub-pixel radii.
        let pi = (ci.round() as usize).min(h - 1);
        let pj = (cj.round() as usize).min(w - 1);
        if layer[pi * w + pj] == 0.0 {
            layer[pi * w + pj] += contrast;
        }
    }
}

/// Renders example `index` of the whole dataset; the RNG stream depends only
/// on (config seed, index), so generation is order-independent.
pub fn generate_example(cfg: &SynthConfig, index: usize, id: String) -> Example {
    let mut rng = rng_from(derive_seed(cfg.seed, index as u64));
    let labels = [
        rng.gen_bool(cfg.pos_frac_malignant),
        rng.gen_bool(cfg.pos_frac_benign),
    ];
    let background = render_background(&mut rng, cfg);
    let (h, w) = (cfg.height, cfg.width);
    let mut layers: [Option<Vec<f64>>; N_CLASSES] = [None, None];
    for class in 0..N_CLASSES {
        if labels[class] {
            let mut layer = vec![0.0; h * w];
            render_lesions(&mut rng, cfg, class, &mut layer);
            layers[class] = Some(layer);
        }
    }
    let mut image = Vec::with_capacity(h * w);
    for idx in 0..h * w {
        let mut v = background[idx];
        for layer in layers.iter().flatten() {
            v += layer[idx];
        }
        image.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let masks = layers.map(|l| l.map(|layer| layer.iter().map(|&v| (v > 0.0) as u8).collect()));
    Example {
        id,
        height: h,
        width: w,
        image,
        labels,
        masks,
    }
}

#[derive(Debug)]
pub struct SynthOutput {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut index = 0;
    let mut make_split = |split: Split, n: usize| -> Result<Dataset> {
        let mut examples = Vec::with_capacity(n);
        for k in 0..n {
            let id = format!("{}-{k:04}", split.as_str());
            examples.push(generate_example(cfg, index, id));
            index += 1;
        }
        Dataset::new(examples)
    };
    Ok(SynthOutput {
        train: make_split(Split::Train, cfg.n_train)?,
        val: make_split(Split::Val, cfg.n_val)?,
        test: make_split(Split::Test, cfg.n_test)?,
    })
}
