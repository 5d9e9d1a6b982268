//! Ground-truth mask regions from pixel-wise comparison of full-face and
//! rule-based mask images, plus the batch sidecar lifecycle.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::{
    load_image_native, region_mask_path, save_region_mask, ImageTensor, RegionMask,
};

/// Suffix marking the unwarped original in a paired directory.
pub const FULL_SUFFIX: &str = "full.png";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExtractConfig {
    /// Per-channel absolute difference threshold, in storage units (0-255).
    pub threshold: f64,
    /// Square dilation radius in pixels.
    pub dilation_radius: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { threshold: 8.0, dilation_radius: 2 }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold < 0.0 || !self.threshold.is_finite() {
            return Err(Error::InvalidConfig("threshold must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Marks every pixel whose max-channel absolute difference exceeds the
/// threshold, then dilates with a `(2r+1)` square structuring element.
pub fn extract_region(
    full: &ImageTensor,
    warped: &ImageTensor,
    cfg: &ExtractConfig,
) -> Result<RegionMask> {
    cfg.validate()?;
    if full.data().dim() != warped.data().dim() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            full.data().dim(),
            warped.data().dim()
        )));
    }
    let (h, w, c) = full.data().dim();
    let mut seed = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let mut max_diff = 0.0f64;
            for ch in 0..c {
                // Model-domain values span 2/255 per storage step.
                let d = (full.data()[[i, j, ch]] - warped.data()[[i, j, ch]]).abs() * 127.5;
                max_diff = max_diff.max(d);
            }
            seed[[i, j]] = max_diff > cfg.threshold;
        }
    }
    RegionMask::new(dilate(&seed, cfg.dilation_radius))
}

/// Morphological dilation with a square structuring element of side `2r+1`,
/// computed separably (horizontal pass then vertical pass).
pub fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as isize;
    let mut horiz = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let lo = (j as isize - r).max(0) as usize;
            let hi = ((j as isize + r) as usize).min(w - 1);
            horiz[[i, j]] = (lo..=hi).any(|jj| mask[[i, jj]]);
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for i in 0..h {
        let lo = (i as isize - r).max(0) as usize;
        let hi = ((i as isize + r) as usize).min(h - 1);
        for j in 0..w {
            out[[i, j]] = (lo..=hi).any(|ii| horiz[[ii, j]]);
        }
    }
    out
}

/// Result of a batch sidecar pass.
#[derive(Debug, Default)]
pub struct BatchReport {
    /// Sidecars written on this run.
    pub written: usize,
    /// Pairs whose sidecar was already up to date.
    pub skipped: usize,
    /// Images without a counterpart, reported but not fatal.
    pub orphans: Vec<PathBuf>,
}

fn is_sidecar_or_full(name: &str) -> bool {
    name.ends_with(".regionmask.png") || name.ends_with(".full.png")
}

fn newer_than(path: &Path, other: &Path) -> bool {
    match (std::fs::metadata(path), std::fs::metadata(other)) {
        (Ok(a), Ok(b)) => match (a.modified(), b.modified()) {
            (Ok(ma), Ok(mb)) => ma >= mb,
            _ => false,
        },
        _ => false,
    }
}

/// Pairs every `<stem>.png` (rule-based) with `<stem>.full.png` (original) in
/// `dataset_dir`, writing one region-mask sidecar per pair. Pairs whose
/// sidecar is newer than both inputs are skipped, so reruns are cheap.
pub fn batch_extract(dataset_dir: &Path, cfg: &ExtractConfig) -> Result<BatchReport> {
    cfg.validate()?;
    let mut report = BatchReport::default();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dataset_dir)
        .map_err(|e| Error::io(dataset_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();

    let mut warped_files = Vec::new();
    let mut full_stems = std::collections::BTreeSet::new();
    for path in &entries {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if !name.to_ascii_lowercase().ends_with(".png") {
            continue;
        }
        if name.ends_with(".regionmask.png") {
            continue;
        }
        if name.ends_with(".full.png") {
            full_stems.insert(name.trim_end_matches(".full.png").to_string());
        } else {
            warped_files.push(path.clone());
        }
    }

    let mut paired_stems = std::collections::BTreeSet::new();
    for warped_path in &warped_files {
        let name = warped_path.file_name().unwrap().to_str().unwrap();
        debug_assert!(!is_sidecar_or_full(name));
        let stem = name.trim_end_matches(".png").to_string();
        let full_path = warped_path.with_file_name(format!("{stem}.{FULL_SUFFIX}"));
        if !full_path.exists() {
            log::warn!("unpaired rule-based image (no .full.png): {}", warped_path.display());
            report.orphans.push(warped_path.clone());
            continue;
        }
        paired_stems.insert(stem.clone());
        let sidecar = region_mask_path(warped_path);
        if sidecar.exists() && newer_than(&sidecar, warped_path) && newer_than(&sidecar, &full_path)
        {
            report.skipped += 1;
            continue;
        }
        let warped = load_image_native(warped_path)?;
        let full = load_image_native(&full_path)?;
        let mask = extract_region(&full, &warped, cfg)?;
        save_region_mask(&mask, warped_path)?;
        report.written += 1;
    }

    for stem in full_stems {
        if !paired_stems.contains(&stem) {
            let p = dataset_dir.join(format!("{stem}.{FULL_SUFFIX}"));
            log::warn!("unpaired full image (no rule-based counterpart): {}", p.display());
            report.orphans.push(p);
        }
    }
    Ok(report)
}
