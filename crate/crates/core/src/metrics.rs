//! Evaluation statistics: non-mask preservation, in-mask color diversity
//! across noise seeds, and side-by-side sample grids.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image_core::{ImageTensor, RegionMask};

/// Mean absolute difference between input and output over all elements
/// outside the mask region, reported in storage units (0-255 scale).
pub fn non_mask_change(input: &ImageTensor, output: &ImageTensor, region: &RegionMask) -> Result<f64> {
    if input.data().dim() != output.data().dim() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            input.data().dim(),
            output.data().dim()
        )));
    }
    if (region.height(), region.width()) != (input.height(), input.width()) {
        return Err(Error::DimensionMismatch("region size mismatch".into()));
    }
    let (h, w, c) = input.data().dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            if region.data()[[i, j]] {
                continue;
            }
            for ch in 0..c {
                sum += (input.data()[[i, j, ch]] - output.data()[[i, j, ch]]).abs() * 127.5;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Mean RGB color inside the region, model domain.
fn in_region_mean(img: &ImageTensor, region: &RegionMask) -> Result<[f64; 3]> {
    let mut mean = [0.0f64; 3];
    let mut count = 0usize;
    for ((i, j), &on) in region.data().indexed_iter() {
        if on {
            for c in 0..3 {
                mean[c] += img.data()[[i, j, c]];
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Dataset("empty mask region in diversity computation".into()));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    Ok(mean)
}

/// Variance across images of the mean in-region RGB color: the trace of the
/// 3x3 population covariance of the per-image color means.
pub fn mask_color_diversity(outputs: &[ImageTensor], regions: &[RegionMask]) -> Result<f64> {
    if outputs.is_empty() || outputs.len() != regions.len() {
        return Err(Error::Dataset(format!(
            "need aligned non-empty lists, got {} outputs and {} regions",
            outputs.len(),
            regions.len()
        )));
    }
    let means: Vec<[f64; 3]> = outputs
        .iter()
        .zip(regions.iter())
        .map(|(o, r)| in_region_mean(o, r))
        .collect::<Result<_>>()?;
    let n = means.len() as f64;
    let mut grand = [0.0f64; 3];
    for m in &means {
        for c in 0..3 {
            grand[c] += m[c] / n;
        }
    }
    let mut trace = 0.0;
    for c in 0..3 {
        trace += means.iter().map(|m| (m[c] - grand[c]).powi(2)).sum::<f64>() / n;
    }
    Ok(trace)
}

/// Writes a single PNG tiling `(input, output)` pairs side by side,
/// row-major, `pairs_per_row` pairs per row. All images must share one size.
pub fn emit_grid(
    pairs: &[(ImageTensor, ImageTensor)],
    path: &Path,
    pairs_per_row: usize,
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Dataset("emit_grid needs at least one pair".into()));
    }
    let cols = pairs_per_row.max(1).min(pairs.len());
    let (h, w) = (pairs[0].0.height(), pairs[0].0.width());
    for (a, b) in pairs {
        if (a.height(), a.width()) != (h, w) || (b.height(), b.width()) != (h, w) {
            return Err(Error::DimensionMismatch("grid images must share one size".into()));
        }
    }
    let rows = pairs.len().div_ceil(cols);
    let mut canvas = image::RgbImage::new((cols * 2 * w) as u32, (rows * h) as u32);
    for (k, (input, output)) in pairs.iter().enumerate() {
        let row = k / cols;
        let col = k % cols;
        let x0 = (col * 2 * w) as u32;
        let y0 = (row * h) as u32;
        let left = input.to_rgb8();
        let right = output.to_rgb8();
        for y in 0..h as u32 {
            for x in 0..w as u32 {
                canvas.put_pixel(x0 + x, y0 + y, *left.get_pixel(x, y));
                canvas.put_pixel(x0 + w as u32 + x, y0 + y, *right.get_pixel(x, y));
            }
        }
    }
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::ImageWrite { path: path.to_path_buf(), reason: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use tempfile::tempdir;

    fn flat(h: usize, w: usize, v: f64) -> ImageTensor {
        ImageTensor::new(Array3::from_elem((h, w, 3), v)).unwrap()
    }

    fn rect_region(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> RegionMask {
        let data = Array2::from_shape_fn((h, w), |(i, j)| i >= r0 && i < r1 && j >= c0 && j < c1);
        RegionMask::new(data).unwrap()
    }

    #[test]
    fn non_mask_change_basic_cases() {
        let a = flat(8, 8, 0.0);
        let region = rect_region(8, 8, 2, 6, 2, 6);
        assert_eq!(non_mask_change(&a, &a, &region).unwrap(), 0.0);

        // Change only inside the region -> still 0.
        let mut inside = a.data().clone();
        for i in 2..6 {
            for j in 2..6 {
                for c in 0..3 {
                    inside[[i, j, c]] = 0.9;
                }
            }
        }
        let inside = ImageTensor::new(inside).unwrap();
        assert_eq!(non_mask_change(&a, &inside, &region).unwrap(), 0.0);

        // Uniform +10 storage units outside the region -> 10. Brute force:
        // every non-mask element differs by 10/127.5 in model units.
        let delta = 10.0 / 127.5;
        let shifted = ImageTensor::new(a.data().mapv(|v| v + delta)).unwrap();
        let got = non_mask_change(&a, &shifted, &region).unwrap();
        assert!((got - 10.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn non_mask_change_invariant_to_in_region_offsets() {
        let a = flat(8, 8, 0.1);
        let region = rect_region(8, 8, 0, 4, 0, 8);
        let mut b = a.data().clone();
        for i in 0..4 {
            for j in 0..8 {
                for c in 0..3 {
                    b[[i, j, c]] += 0.37;
                }
            }
        }
        let b = ImageTensor::new(b.mapv(|v| v.clamp(-1.0, 1.0))).unwrap();
        assert_eq!(non_mask_change(&a, &b, &region).unwrap(), 0.0);
    }

    #[test]
    fn diversity_hand_computed_two_sample_case() {
        let region = rect_region(4, 4, 1, 3, 1, 3);
        let a = flat(4, 4, 0.0);
        let b = flat(4, 4, 1.0);
        // In-region means (0,0,0) and (1,1,1): population variance per
        // channel is 0.25, trace 0.75.
        let got = mask_color_diversity(&[a.clone(), b.clone()], &[region.clone(), region.clone()])
            .unwrap();
        assert!((got - 0.75).abs() < 1e-12);

        // Identical outputs -> 0; permutation invariance.
        assert_eq!(
            mask_color_diversity(&[a.clone(), a.clone()], &[region.clone(), region.clone()])
                .unwrap(),
            0.0
        );
        let swapped =
            mask_color_diversity(&[b, a], &[region.clone(), region.clone()]).unwrap();
        assert!((swapped - got).abs() < 1e-15);
    }

    #[test]
    fn diversity_rejects_empty_region() {
        let a = flat(4, 4, 0.0);
        let empty = RegionMask::all_false(4, 4);
        assert!(mask_color_diversity(&[a], &[empty]).is_err());
    }

    #[test]
    fn grid_layout_and_determinism() {
        let dir = tempdir().unwrap();
        let pairs: Vec<_> = (0..9)
            .map(|k| (flat(4, 4, -1.0 + k as f64 * 0.2), flat(4, 4, 1.0 - k as f64 * 0.2)))
            .collect();
        // 1 pair per row: 2 image columns x 9 rows.
        let p1 = dir.path().join("grid1.png");
        emit_grid(&pairs, &p1, 1).unwrap();
        let img = image::open(&p1).unwrap();
        assert_eq!((img.width(), img.height()), (8, 36));

        // 3 pairs per row: 6 image columns x 3 rows.
        let p3 = dir.path().join("grid3.png");
        emit_grid(&pairs, &p3, 3).unwrap();
        let img = image::open(&p3).unwrap();
        assert_eq!((img.width(), img.height()), (24, 12));

        let single = dir.path().join("one.png");
        emit_grid(&pairs[..1], &single, 3).unwrap();
        let img = image::open(&single).unwrap();
        assert_eq!((img.width(), img.height()), (8, 4));

        // Byte-identical on identical input.
        let p1b = dir.path().join("grid1b.png");
        emit_grid(&pairs, &p1b, 1).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p1b).unwrap());
    }
}
