//! Grid-level saliency arithmetic.

use crate::datamodel::ImageSize;
use crate::error::{Error, Result};
use crate::grid::Grid;

use super::FixationRecord;

/// Divides by the maximum. Returns the grid and whether it was all-zero.
pub fn normalize_max(grid: &Grid) -> (Grid, bool) {
    let m = grid.max();
    if m > 0.0 && m.is_finite() {
        (grid.scale(1.0 / m), false)
    } else {
        (grid.clone(), true)
    }
}

pub fn mean_grid(grids: &[&Grid]) -> Result<Grid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot average an empty list of maps".into()))?;
    let shape = first.shape();
    let mut acc = Grid::zeros(shape.0, shape.1);
    for g in grids {
        g.ensure_shape(shape)?;
        for (a, v) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += v;
        }
    }
    let k = grids.len() as f64;
    Ok(acc.map(|v| v / k))
}

/// Duration-weighted sum of isotropic Gaussians, one per fixation, before normalization.
///
/// A fixation at normalized `(x, y)` sits at continuous pixel position
/// `(x·W − ½, y·H − ½)`, i.e. pixel `c` covers `[c/W, (c+1)/W)`.
pub fn gaze_density(fixations: &[FixationRecord], sigma_px: f64, size: ImageSize) -> Grid {
    let (h, w) = (size.height, size.width);
    let mut out = Grid::zeros(h, w);
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let mut gx = vec![0.0; w];
    let mut gy = vec![0.0; h];
    for f in fixations {
        let px = f.x * w as f64 - 0.5;
        let py = f.y * h as f64 - 0.5;
        for (c, g) in gx.iter_mut().enumerate() {
            let d = c as f64 - px;
            *g = (-d * d * inv).exp();
        }
        for (r, g) in gy.iter_mut().enumerate() {
            let d = r as f64 - py;
            *g = (-d * d * inv).exp();
        }
        let amp = f.duration_ms;
        for r in 0..h {
            let row = amp * gy[r];
            for c in 0..w {
                out.add_at(r, c, row * gx[c]);
            }
        }
    }
    out
}

/// Per-pixel fraction of masks that mark the pixel.
pub fn annotation_mean(masks: &[Grid]) -> Result<Grid> {
    let refs: Vec<&Grid> = masks.iter().collect();
    mean_grid(&refs)
}

/// Standard deviation used for a kernel of `ksize` taps; matches the common
/// OpenCV convention for `sigma = 0`.
pub fn kernel_sigma(ksize: usize) -> f64 {
    0.3 * ((ksize as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps for a nominal kernel size. Even sizes are widened to
/// the next odd width so the kernel stays centred; sigma follows the nominal size.
pub fn gaussian_kernel(ksize: usize) -> Vec<f64> {
    if ksize <= 1 {
        return vec![1.0];
    }
    let radius = ksize / 2;
    let sigma = kernel_sigma(ksize);
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Half-sample symmetric reflection (`… 1 0 | 0 1 2 … n−1 | n−1 n−2 …`), folded as often as needed.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_rows(grid: &Grid, taps: &[f64]) -> Grid {
    let (h, w) = grid.shape();
    let r = (taps.len() / 2) as isize;
    Grid::from_fn(h, w, |row, col| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * grid.get(row, reflect_index(col as isize + k as isize - r, w)))
            .sum()
    })
}

fn convolve_cols(grid: &Grid, taps: &[f64]) -> Grid {
    let (h, w) = grid.shape();
    let r = (taps.len() / 2) as isize;
    Grid::from_fn(h, w, |row, col| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * grid.get(reflect_index(row as isize + k as isize - r, h), col))
            .sum()
    })
}

/// Separable Gaussian blur with reflective borders. `ksize = 0` is the identity.
pub fn gaussian_blur(grid: &Grid, ksize: i64) -> Result<Grid> {
    if ksize < 0 {
        return Err(Error::InvalidArgument(format!(
            "blur kernel size must be non-negative, got {ksize}"
        )));
    }
    if ksize <= 1 || grid.is_empty() {
        return Ok(grid.clone());
    }
    let taps = gaussian_kernel(ksize as usize);
    Ok(convolve_cols(&convolve_rows(grid, &taps), &taps))
}

/// Shannon entropy in bits of the grid read as a distribution.
pub fn entropy_bits(grid: &Grid) -> Result<f64> {
    let total: f64 = grid.as_slice().iter().filter(|v| **v > 0.0).sum();
    if !(total > 0.0) {
        return Err(Error::EntropyUndefined);
    }
    let h = grid
        .as_slice()
        .iter()
        .filter(|v| **v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}
