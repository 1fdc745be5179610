//! Evaluation metrics: soft Dice, pixel-level average precision (image and
//! dataset pooled), and classification AUC.
//!
//! Undefined cases (no positive pixels, single-class AUC input) return `None`
//! and are excluded from means by callers.

use crate::error::{GlamError, Result};
use crate::tape::nearest_index;
use crate::tensor::Tensor;

/// Nearest-neighbor resample of an `[h, w]` plane to `[th, tw]`.
pub fn resample_plane(s: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (h, w) = s.dims2()?;
    if th == 0 || tw == 0 {
        return Err(GlamError::shape("resample_plane: target dims must be positive"));
    }
    let mut out = vec![0.0; th * tw];
    for i in 0..th {
        let si = nearest_index(i, h, th);
        for j in 0..tw {
            out[i * tw + j] = s.data()[si * w + nearest_index(j, w, tw)];
        }
    }
    Tensor::new(vec![th, tw], out)
}

/// Soft Dice: `2 * sum(S .* G) / (sum(S^2) + sum(G^2))`; 0 when both empty.
pub fn dice(s: &Tensor, g: &Tensor) -> Result<f64> {
    if s.shape() != g.shape() {
        return Err(GlamError::shape(format!(
            "dice: shapes {:?} vs {:?}",
            s.shape(),
            g.shape()
        )));
    }
    let mut inter = 0.0;
    let mut s2 = 0.0;
    let mut g2 = 0.0;
    for (&sv, &gv) in s.data().iter().zip(g.data()) {
        inter += sv * gv;
        s2 += sv * sv;
        g2 += gv * gv;
    }
    let denom = s2 + g2;
    Ok(if denom == 0.0 { 0.0 } else { 2.0 * inter / denom })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PxapMode {
    Exact,
    Grid256,
}

/// Threshold sweep: at each threshold the predicted-positive set is
/// `{pixels with s >= tau}`; AP sums `precision * delta(recall)` as the
/// threshold descends. Exact mode visits every distinct saliency value;
/// grid mode uses 256 evenly spaced thresholds from 1 down to 0.
fn ap_from_pixels(scores: &[f64], truth: &[bool], mode: PxapMode) -> Option<f64> {
    let total_pos = truth.iter().filter(|&&t| t).count();
    if total_pos == 0 {
        return None;
    }
    match mode {
        PxapMode::Exact => {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            let mut ap = 0.0;
            let mut prev_rec = 0.0;
            let mut tp = 0usize;
            let mut seen = 0usize;
            let mut i = 0;
            while i < order.len() {
                // Consume the whole tie group: thresholding at this value
                // includes every pixel with an equal score.
                let v = scores[order[i]];
                while i < order.len() && scores[order[i]] == v {
                    if truth[order[i]] {
                        tp += 1;
                    }
                    seen += 1;
                    i += 1;
                }
                let prec = tp as f64 / seen as f64;
                let rec = tp as f64 / total_pos as f64;
                ap += prec * (rec - prev_rec);
                prev_rec = rec;
            }
            Some(ap)
        }
        PxapMode::Grid256 => {
            let mut ap = 0.0;
            let mut prev_rec = 0.0;
            for l in 0..256 {
                let tau = (255 - l) as f64 / 255.0;
                let mut tp = 0usize;
                let mut pred = 0usize;
                for (s, t) in scores.iter().zip(truth) {
                    if *s >= tau {
                        pred += 1;
                        if *t {
                            tp += 1;
                        }
                    }
                }
                if pred == 0 {
                    continue;
                }
                let prec = tp as f64 / pred as f64;
                let rec = tp as f64 / total_pos as f64;
                ap += prec * (rec - prev_rec);
                prev_rec = rec;
            }
            Some(ap)
        }
    }
}

fn mask_to_truth(g: &Tensor) -> Result<Vec<bool>> {
    let mut truth = Vec::with_capacity(g.numel());
    for &v in g.data() {
        if v == 0.0 {
            truth.push(false);
        } else if v == 1.0 {
            truth.push(true);
        } else {
            return Err(GlamError::shape(format!("mask entry {v} is not 0 or 1")));
        }
    }
    Ok(truth)
}

/// Image-level pixel AP; `None` when the mask has no positive pixel.
pub fn pxap_image(s: &Tensor, g: &Tensor, mode: PxapMode) -> Result<Option<f64>> {
    if s.shape() != g.shape() {
        return Err(GlamError::shape(format!(
            "pxap: shapes {:?} vs {:?}",
            s.shape(),
            g.shape()
        )));
    }
    Ok(ap_from_pixels(s.data(), &mask_to_truth(g)?, mode))
}

/// Streaming grid-mode pixel AP: each plane is reduced to per-threshold
/// counts on entry, so dataset-level pooling never holds all pixels at once.
/// Yields exactly what `pxap_dataset(.., Grid256)` would on the same pairs.
#[derive(Debug, Clone)]
pub struct Grid256Pool {
    taus: Vec<f64>,
    pred: Vec<u64>,
    pos: Vec<u64>,
    total_pos: u64,
}

impl Default for Grid256Pool {
    fn default() -> Self {
        Self::new()
    }
}

impl Grid256Pool {
    pub fn new() -> Self {
        let taus = (0..256).map(|l| (255 - l) as f64 / 255.0).collect();
        Grid256Pool { taus, pred: vec![0; 256], pos: vec![0; 256], total_pos: 0 }
    }

    pub fn add(&mut self, s: &Tensor, g: &Tensor) -> Result<()> {
        if s.shape() != g.shape() {
            return Err(GlamError::shape(format!(
                "pxap pool: shapes {:?} vs {:?}",
                s.shape(),
                g.shape()
            )));
        }
        let truth = mask_to_truth(g)?;
        for (&v, t) in s.data().iter().zip(truth) {
            self.total_pos += t as u64;
            // Thresholds descend, so this is the first index the pixel passes;
            // the negated comparison keeps NaN out of every predicted set,
            // matching the full-scan mode.
            let l = self.taus.partition_point(|&tau| !(v >= tau));
            if l < 256 {
                self.pred[l] += 1;
                if t {
                    self.pos[l] += 1;
                }
            }
        }
        Ok(())
    }

    /// Pooled AP; `None` when no positive pixel has been added.
    pub fn ap(&self) -> Option<f64> {
        if self.total_pos == 0 {
            return None;
        }
        let mut ap = 0.0;
        let mut prev_rec = 0.0;
        let mut tp = 0u64;
        let mut pred = 0u64;
        for l in 0..256 {
            pred += self.pred[l];
            tp += self.pos[l];
            if pred == 0 {
                continue;
            }
            let prec = tp as f64 / pred as f64;
            let rec = tp as f64 / self.total_pos as f64;
            ap += prec * (rec - prev_rec);
            prev_rec = rec;
        }
        Some(ap)
    }
}

/// Dataset-level pixel AP: pixels from every pair pooled into one sweep.
pub fn pxap_dataset(pairs: &[(&Tensor, &Tensor)], mode: PxapMode) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for (s, g) in pairs {
        if s.shape() != g.shape() {
            return Err(GlamError::shape(format!(
                "pxap_dataset: shapes {:?} vs {:?}",
                s.shape(),
                g.shape()
            )));
        }
        scores.extend_from_slice(s.data());
        truth.extend(mask_to_truth(g)?);
    }
    Ok(ap_from_pixels(&scores, &truth, mode))
}

/// Rank-based AUC (Mann-Whitney with tie correction); `None` when only one
/// class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auc: length mismatch");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        let start = i;
        while i < order.len() && scores[order[i]] == v {
            i += 1;
        }
        let avg_rank = (start + 1 + i) as f64 / 2.0; // mean of ranks start+1..=i
        for &idx in &order[start..i] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}
