//! Greedy patch selection from a saliency map, and pixel-exact extraction.
//!
//! Selection normalizes each class plane to [0,1], sums the planes, then
//! greedily picks the window with the largest cell sum K times, zeroing each
//! chosen window. Ties take the smallest (row, col); a position is not
//! re-selected unless every position has already been chosen.

use serde::{Deserialize, Serialize};

use crate::error::{GlamError, Result};
use crate::saliency::SaliencyMap;
use crate::tensor::Tensor;

/// Top-left corner of a patch in input-image pixels, plus its size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLocation {
    pub row: usize,
    pub col: usize,
    pub h: usize,
    pub w: usize,
}

/// (v - min) / (max - min) per cell; a constant map collapses to all zeros.
pub fn minmax_normalize(map: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return vec![0.0; map.len()];
    }
    let span = hi - lo;
    map.iter().map(|&v| (v - lo) / span).collect()
}

/// Window dims on the saliency grid for a patch of `patch_px` pixels.
fn window_dims(
    patch_px: (usize, usize),
    grid: (usize, usize),
    image: (usize, usize),
) -> Result<(usize, usize)> {
    let (h_c, w_c) = patch_px;
    let (gh, gw) = grid;
    let (ih, iw) = image;
    if h_c == 0 || w_c == 0 || h_c > ih || w_c > iw {
        return Err(GlamError::config(format!(
            "patch {h_c}x{w_c} outside image {ih}x{iw}"
        )));
    }
    let wh = (h_c as f64 * gh as f64 / ih as f64).round().max(1.0) as usize;
    let ww = (w_c as f64 * gw as f64 / iw as f64).round().max(1.0) as usize;
    if wh > gh || ww > gw {
        return Err(GlamError::config(format!(
            "selection window {wh}x{ww} larger than saliency grid {gh}x{gw}"
        )));
    }
    Ok((wh, ww))
}

/// Greedy selection of `k` patch locations (Algorithm: per-class min-max
/// normalize, sum classes, then k rounds of best-window + zeroing).
pub fn select_patches(
    saliency: &SaliencyMap,
    k: usize,
    patch_px: (usize, usize),
    image_dims: (usize, usize),
) -> Result<Vec<PatchLocation>> {
    if k == 0 {
        return Err(GlamError::config("select_patches: K must be >= 1"));
    }
    let (gh, gw) = saliency.grid();
    let (wh, ww) = window_dims(patch_px, (gh, gw), image_dims)?;
    let (ih, iw) = image_dims;
    let (h_c, w_c) = patch_px;

    // Merge class planes after per-class normalization.
    let mut merged = vec![0.0f64; gh * gw];
    for c in 0..saliency.classes() {
        let plane = saliency.class_plane(c);
        let normed = minmax_normalize(plane.data());
        for (m, v) in merged.iter_mut().zip(&normed) {
            *m += v;
        }
    }

    let rows = gh - wh + 1;
    let cols = gw - ww + 1;
    let n_positions = rows * cols;
    let mut taken = vec![false; n_positions];
    let mut n_taken = 0usize;
    let mut out = Vec::with_capacity(k);

    for _ in 0..k {
        let skip_taken = n_taken < n_positions;
        let mut best = f64::NEG_INFINITY;
        let mut best_pos = (0usize, 0usize);
        for r in 0..rows {
            for c in 0..cols {
                if skip_taken && taken[r * cols + c] {
                    continue;
                }
                let mut s = 0.0;
                for i in 0..wh {
                    let base = (r + i) * gw + c;
                    for j in 0..ww {
                        s += merged[base + j];
                    }
                }
                if s > best {
                    best = s;
                    best_pos = (r, c);
                }
            }
        }
        let (r, c) = best_pos;
        if !taken[r * cols + c] {
            taken[r * cols + c] = true;
            n_taken += 1;
        }
        for i in 0..wh {
            let base = (r + i) * gw + c;
            for v in &mut merged[base..base + ww] {
                *v = 0.0;
            }
        }
        let row = ((r as f64 * ih as f64 / gh as f64).round() as usize).min(ih - h_c);
        let col = ((c as f64 * iw as f64 / gw as f64).round() as usize).min(iw - w_c);
        out.push(PatchLocation {
            row,
            col,
            h: h_c,
            w: w_c,
        });
    }
    Ok(out)
}

/// Pixel-exact crops of `image: [1, H, W]` at the given locations.
pub fn extract_patches(image: &Tensor, locations: &[PatchLocation]) -> Result<Vec<Tensor>> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(GlamError::shape(format!("extract_patches: expected 1 channel, got {c}")));
    }
    let mut out = Vec::with_capacity(locations.len());
    for loc in locations {
        if loc.row + loc.h > h || loc.col + loc.w > w {
            return Err(GlamError::shape(format!(
                "patch at ({}, {}) size {}x{} exceeds image {}x{}",
                loc.row, loc.col, loc.h, loc.w, h, w
            )));
        }
        let mut data = Vec::with_capacity(loc.h * loc.w);
        for i in 0..loc.h {
            let base = (loc.row + i) * w + loc.col;
            data.extend_from_slice(&image.data()[base..base + loc.w]);
        }
        out.push(Tensor::new(vec![1, loc.h, loc.w], data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_1class(h: usize, w: usize, data: Vec<f64>, scale: usize) -> SaliencyMap {
        SaliencyMap::new(Tensor::new(vec![1, h, w], data).unwrap(), scale).unwrap()
    }

    /// Re-scores every window from scratch each round; shares no code with
    /// the production path.
    fn oracle_select(
        values: &Tensor,
        k: usize,
        win: (usize, usize),
    ) -> Vec<(usize, usize)> {
        let c = values.shape()[0];
        let (gh, gw) = (values.shape()[1], values.shape()[2]);
        let mut merged = vec![0.0f64; gh * gw];
        for ci in 0..c {
            let plane = &values.data()[ci * gh * gw..(ci + 1) * gh * gw];
            let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                for (i, &v) in plane.iter().enumerate() {
                    merged[i] += (v - lo) / (hi - lo);
                }
            }
        }
        let (wh, ww) = win;
        let rows = gh - wh + 1;
        let cols = gw - ww + 1;
        let mut taken: Vec<(usize, usize)> = Vec::new();
        let mut out = Vec::new();
        for _ in 0..k {
            let exhausted = taken.len() >= rows * cols;
            let mut best = f64::NEG_INFINITY;
            let mut pos = (0, 0);
            for r in 0..rows {
                for cc in 0..cols {
                    if !exhausted && taken.contains(&(r, cc)) {
                        continue;
                    }
                    let mut s = 0.0;
                    for i in 0..wh {
                        for j in 0..ww {
                            s += merged[(r + i) * gw + cc + j];
                        }
                    }
                    if s > best {
                        best = s;
                        pos = (r, cc);
                    }
                }
            }
            if !taken.contains(&pos) {
                taken.push(pos);
            }
            for i in 0..wh {
                for j in 0..ww {
                    merged[(pos.0 + i) * gw + pos.1 + j] = 0.0;
                }
            }
            out.push(pos);
        }
        out
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[1.0, 3.0]), vec![0.0, 1.0]);
        assert_eq!(minmax_normalize(&[2.0, 2.0, 2.0]), vec![0.0, 0.0, 0.0]);
        let n = minmax_normalize(&[0.2, 0.4, 0.6]);
        assert_eq!(n[0], 0.0);
        assert!((n[1] - 0.5).abs() < 1e-12);
        assert_eq!(n[2], 1.0);
    }

    #[test]
    fn single_hot_cell_ties_to_origin() {
        // One 1.0 at (1,1) on a 4x4 grid: all four 2x2 windows covering it tie;
        // the smallest (row, col) wins.
        let mut data = vec![0.0; 16];
        data[5] = 1.0;
        let m = map_1class(4, 4, data, 16);
        let locs = select_patches(&m, 1, (32, 32), (64, 64)).unwrap();
        assert_eq!((locs[0].row, locs[0].col), (0, 0));
    }

    #[test]
    fn all_zero_map_walks_row_major() {
        let m = map_1class(4, 4, vec![0.0; 16], 16);
        let locs = select_patches(&m, 2, (32, 32), (64, 64)).unwrap();
        assert_eq!((locs[0].row, locs[0].col), (0, 0));
        assert_eq!((locs[1].row, locs[1].col), (0, 16));
    }

    #[test]
    fn two_blobs_picked_in_mass_order() {
        let mut data = vec![0.0; 36];
        // 2x2 blob of mass 4 at grid (0,0); 2x2 blob of mass 3 at (4,4) area.
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            data[r * 6 + c] = 1.0;
        }
        for (r, c, v) in [(4, 4, 1.0), (4, 5, 1.0), (5, 4, 1.0), (5, 5, 0.0)] {
            data[r * 6 + c] = v;
        }
        let m = map_1class(6, 6, data, 8);
        let locs = select_patches(&m, 2, (16, 16), (48, 48)).unwrap();
        assert_eq!((locs[0].row, locs[0].col), (0, 0));
        assert_eq!((locs[1].row, locs[1].col), (32, 32));
    }

    #[test]
    fn matches_oracle_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..150 {
            let gh = rng.gen_range(2..=10);
            let gw = rng.gen_range(2..=10);
            let wh = rng.gen_range(1..=gh.min(3));
            let ww = rng.gen_range(1..=gw.min(3));
            let k = rng.gen_range(1..=3);
            let c = rng.gen_range(1..=2);
            let data: Vec<f64> = (0..c * gh * gw).map(|_| rng.gen::<f64>()).collect();
            let values = Tensor::new(vec![c, gh, gw], data).unwrap();
            // Scale of 1: grid == image, windows == patches.
            let m = SaliencyMap::new(values.clone(), 1).unwrap();
            let got = select_patches(&m, k, (wh, ww), (gh, gw)).unwrap();
            let want = oracle_select(&values, k, (wh, ww));
            for (g, w) in got.iter().zip(&want) {
                assert_eq!((g.row, g.col), *w, "trial {trial}");
            }
        }
    }

    #[test]
    fn scale_invariance_of_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let data: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
            let m1 = map_1class(8, 8, data.clone(), 8);
            let m2 = map_1class(8, 8, data.iter().map(|v| v * 37.5).collect(), 8);
            let a = select_patches(&m1, 3, (16, 16), (64, 64)).unwrap();
            let b = select_patches(&m2, 3, (16, 16), (64, 64)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn locations_stay_inside_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let data: Vec<f64> = (0..48).map(|_| rng.gen::<f64>()).collect();
            let m = map_1class(6, 8, data, 16);
            let (ih, iw) = (96, 128);
            let locs = select_patches(&m, 4, (32, 32), (ih, iw)).unwrap();
            for l in locs {
                assert!(l.row + l.h <= ih && l.col + l.w <= iw);
            }
        }
    }

    #[test]
    fn extraction_is_pixel_exact() {
        let (h, w) = (10, 12);
        let ramp: Vec<f64> = (0..h * w).map(|i| (i / w + i % w) as f64).collect();
        let img = Tensor::new(vec![1, h, w], ramp).unwrap();
        let loc = PatchLocation { row: 3, col: 5, h: 4, w: 4 };
        let p = &extract_patches(&img, &[loc]).unwrap()[0];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(p.data()[i * 4 + j], ((3 + i) + (5 + j)) as f64);
            }
        }
        // Full-image crop returns the image.
        let full = PatchLocation { row: 0, col: 0, h, w };
        assert_eq!(extract_patches(&img, &[full]).unwrap()[0].data(), img.data());
    }

    #[test]
    fn out_of_bounds_extraction_rejected() {
        let img = Tensor::zeros(vec![1, 8, 8]);
        let loc = PatchLocation { row: 5, col: 0, h: 4, w: 4 };
        assert!(extract_patches(&img, &[loc]).is_err());
    }
}
