//! Dataset construction and access: annotation records and filtering, A/B
//! size balancing, unpaired training-set loading with region-mask sidecar
//! pairing, and multi-face scene composition.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::{region_mask_path, ImageTensor};
use crate::mask_warp::{warp_mask, LandmarkSet, MaskTemplate, Point};
use crate::model::{batch_to_image, images_to_batch, Generator, NoiseSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    Front,
    FrontLeft,
    FrontRight,
    Left,
    Right,
    Back,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskType {
    Simple,
    Complex,
    Body,
    Hybrid,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }
}

/// One annotated face crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub image: PathBuf,
    pub bbox: BBox,
    pub orientation: Orientation,
    pub occlusion_degree: i32,
    pub mask_type: MaskType,
    pub source: String,
}

/// One annotated multi-face scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image: PathBuf,
    pub faces: Vec<FaceRecord>,
    /// Landmarks per face, in scene-image pixel coordinates.
    #[serde(default)]
    pub landmarks: Vec<Option<Vec<Point>>>,
}

/// Conjunctive selection criteria; `None` fields match everything.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterCriteria {
    /// Minimum for both bbox width and height.
    pub min_size: Option<u32>,
    pub orientations: Option<Vec<Orientation>>,
    /// Keep records with occlusion degree at or above this value.
    pub min_occlusion_degree: Option<i32>,
    pub mask_types: Option<Vec<MaskType>>,
}

impl FilterCriteria {
    pub fn matches(&self, rec: &FaceRecord) -> bool {
        if let Some(s) = self.min_size {
            if rec.bbox.w < s || rec.bbox.h < s {
                return false;
            }
        }
        if let Some(ref os) = self.orientations {
            if !os.contains(&rec.orientation) {
                return false;
            }
        }
        if let Some(d) = self.min_occlusion_degree {
            if rec.occlusion_degree < d {
                return false;
            }
        }
        if let Some(ref ms) = self.mask_types {
            if !ms.contains(&rec.mask_type) {
                return false;
            }
        }
        true
    }
}

/// Keeps the records matching every populated criterion.
pub fn filter_faces(records: &[FaceRecord], criteria: &FilterCriteria) -> Vec<FaceRecord> {
    records.iter().filter(|r| criteria.matches(r)).cloned().collect()
}

/// Reads one JSON value per line, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| {
            Error::Dataset(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Uniform seeded downsample of `set_a` to `set_b`'s size. Relative order of
/// the kept entries is preserved.
pub fn balance_downsample(
    set_a: &[PathBuf],
    set_b: &[PathBuf],
    seed: u64,
) -> Result<Vec<PathBuf>> {
    if set_a.len() < set_b.len() {
        return Err(Error::Dataset(format!(
            "set A ({}) smaller than set B ({})",
            set_a.len(),
            set_b.len()
        )));
    }
    if set_a.len() == set_b.len() {
        return Ok(set_a.to_vec());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> =
        rand::seq::index::sample(&mut rng, set_a.len(), set_b.len()).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| set_a[i].clone()).collect())
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_primary_image(path: &Path) -> bool {
    let Some(name) = path.file_name().and_then(|n| n.to_str()) else { return false };
    let lower = name.to_ascii_lowercase();
    if lower.ends_with(".regionmask.png") || lower.ends_with(".full.png") {
        return false;
    }
    IMAGE_EXTENSIONS.iter().any(|ext| lower.ends_with(&format!(".{ext}")))
}

/// Sorted list of primary images in a directory (sidecars and `.full.png`
/// originals excluded).
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_primary_image(p))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", dir.display())));
    }
    Ok(out)
}

/// An unpaired A/B training dataset rooted at `<root>/trainA` + `<root>/trainB`.
#[derive(Debug, Clone)]
pub struct UnpairedSet {
    pub a_images: Vec<PathBuf>,
    pub b_images: Vec<PathBuf>,
}

impl UnpairedSet {
    pub fn load(root: &Path) -> Result<Self> {
        let a = list_images(&root.join("trainA"))?;
        let b = list_images(&root.join("trainB"))?;
        Ok(Self { a_images: a, b_images: b })
    }

    /// Every A image must carry a region-mask sidecar; returns the missing
    /// list otherwise. Required before any NMC-enabled epoch.
    pub fn check_sidecars(&self) -> Result<()> {
        let missing: Vec<String> = self
            .a_images
            .iter()
            .filter(|p| !region_mask_path(p).exists())
            .map(|p| p.display().to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Dataset(format!(
                "{} trainA images lack region-mask sidecars: {}",
                missing.len(),
                missing.join(", ")
            )))
        }
    }

    /// Batches per epoch with the given batch size: every image of the larger
    /// set appears at least once, batches always full (indices wrap).
    pub fn iterations_per_epoch(&self, batch: usize) -> usize {
        self.a_images.len().max(self.b_images.len()).div_ceil(batch)
    }
}

/// What scene composition runs on each selected face crop.
pub enum ScenePipeline<'a> {
    /// Landmark warp only.
    WarpOnly { template: &'a MaskTemplate, work_size: usize },
    /// Landmark warp followed by a frozen generator.
    WarpGenerate {
        template: &'a MaskTemplate,
        generator: &'a Generator,
        noise: NoiseSpec,
        noise_seed: u64,
        work_size: usize,
    },
}

impl ScenePipeline<'_> {
    fn work_size(&self) -> usize {
        match self {
            ScenePipeline::WarpOnly { work_size, .. } => *work_size,
            ScenePipeline::WarpGenerate { work_size, .. } => *work_size,
        }
    }

    fn template(&self) -> &MaskTemplate {
        match self {
            ScenePipeline::WarpOnly { template, .. } => template,
            ScenePipeline::WarpGenerate { template, .. } => template,
        }
    }
}

/// Per-box class label emitted by scene composition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BoxLabel {
    pub bbox: BBox,
    pub masked: bool,
}

/// Output annotations for one composed scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneLabels {
    pub image: PathBuf,
    pub boxes: Vec<BoxLabel>,
}

/// Selects `ceil(fraction * n)` faces (seeded), masks each via the pipeline
/// and overlays the result on its original box. Pixels outside selected
/// boxes are untouched. Faces without landmarks are skipped with a warning.
pub fn scene_compose(
    scene_image: &RgbImage,
    scene: &SceneRecord,
    fraction: f64,
    pipeline: &ScenePipeline<'_>,
    seed: u64,
) -> Result<(RgbImage, Vec<BoxLabel>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("fraction {fraction} outside [0, 1]")));
    }
    let n = scene.faces.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut selected: Vec<usize> = if k == 0 {
        Vec::new()
    } else {
        rand::seq::index::sample(&mut rng, n, k).into_vec()
    };
    selected.sort_unstable();
    let selected_set: BTreeSet<usize> = selected.iter().copied().collect();

    let mut out = scene_image.clone();
    let mut labels: Vec<BoxLabel> =
        scene.faces.iter().map(|f| BoxLabel { bbox: f.bbox, masked: false }).collect();

    for &fi in &selected {
        let face = &scene.faces[fi];
        let Some(Some(raw_lms)) = scene.landmarks.get(fi) else {
            log::warn!(
                "scene {}: face {fi} selected but has no landmarks; skipping",
                scene.image.display()
            );
            continue;
        };
        let bbox = face.bbox;
        if bbox.right() > scene_image.width() || bbox.bottom() > scene_image.height() {
            return Err(Error::Dataset(format!(
                "face {fi} bbox exceeds scene bounds in {}",
                scene.image.display()
            )));
        }
        if bbox.w == 0 || bbox.h == 0 {
            continue;
        }

        // Crop, pad to square with edge replication, resize to work size.
        let crop = image::imageops::crop_imm(scene_image, bbox.x, bbox.y, bbox.w, bbox.h).to_image();
        let side = bbox.w.max(bbox.h);
        let pad_x = (side - bbox.w) / 2;
        let pad_y = (side - bbox.h) / 2;
        let mut square = RgbImage::new(side, side);
        for y in 0..side {
            for x in 0..side {
                let sx = x.saturating_sub(pad_x).min(bbox.w - 1);
                let sy = y.saturating_sub(pad_y).min(bbox.h - 1);
                square.put_pixel(x, y, *crop.get_pixel(sx, sy));
            }
        }
        let ws = pipeline.work_size() as u32;
        let resized = image::imageops::resize(&square, ws, ws, image::imageops::FilterType::Triangle);
        let work = ImageTensor::from_rgb8(&resized);

        // Landmarks: scene coords -> crop -> padded square -> work scale.
        let scale = ws as f64 / side as f64;
        let pts: Vec<Point> = raw_lms
            .iter()
            .map(|p| {
                [
                    (p[0] - bbox.x as f64 + pad_x as f64) * scale,
                    (p[1] - bbox.y as f64 + pad_y as f64) * scale,
                ]
            })
            .collect();
        let lms = match LandmarkSet::new(pts) {
            Ok(l) => l.clamped(ws as usize, ws as usize),
            Err(e) => {
                log::warn!("scene {}: face {fi}: {e}; skipping", scene.image.display());
                continue;
            }
        };

        let warped = warp_mask(&work, &lms, pipeline.template())?;
        let masked = match pipeline {
            ScenePipeline::WarpOnly { .. } => warped,
            ScenePipeline::WarpGenerate { generator, noise, noise_seed, .. } => {
                let batch = images_to_batch(&[&warped]);
                let out = generator.infer(&batch, noise, noise_seed.wrapping_add(fi as u64));
                batch_to_image(&out.output, 0)
            }
        };

        // Back to box size: resize to the padded square, crop the pad.
        let masked8 = masked.to_rgb8();
        let back = image::imageops::resize(&masked8, side, side, image::imageops::FilterType::Triangle);
        for y in 0..bbox.h {
            for x in 0..bbox.w {
                let px = back.get_pixel(x + pad_x, y + pad_y);
                out.put_pixel(bbox.x + x, bbox.y + y, *px);
            }
        }
        labels[fi].masked = true;
    }

    // Faces that were selected but skipped keep their unmasked label.
    debug_assert!(labels
        .iter()
        .enumerate()
        .all(|(i, l)| !l.masked || selected_set.contains(&i)));
    Ok((out, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(w: u32, h: u32, o: Orientation, occ: i32, m: MaskType) -> FaceRecord {
        FaceRecord {
            image: PathBuf::from("x.png"),
            bbox: BBox { x: 0, y: 0, w, h },
            orientation: o,
            occlusion_degree: occ,
            mask_type: m,
            source: "test".into(),
        }
    }

    #[test]
    fn filter_min_size_excludes_small_faces() {
        let records = vec![
            rec(59, 70, Orientation::Front, 3, MaskType::Simple),
            rec(60, 60, Orientation::Front, 3, MaskType::Simple),
        ];
        let crit = FilterCriteria { min_size: Some(60), ..Default::default() };
        let kept = filter_faces(&records, &crit);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox.w, 60);
    }

    #[test]
    fn filter_orientation_whitelist() {
        let records = vec![
            rec(80, 80, Orientation::Left, 3, MaskType::Simple),
            rec(80, 80, Orientation::FrontLeft, 3, MaskType::Simple),
        ];
        let crit = FilterCriteria {
            orientations: Some(vec![
                Orientation::Front,
                Orientation::FrontLeft,
                Orientation::FrontRight,
            ]),
            ..Default::default()
        };
        let kept = filter_faces(&records, &crit);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].orientation, Orientation::FrontLeft);
    }

    #[test]
    fn empty_criteria_is_identity() {
        let records = vec![
            rec(10, 10, Orientation::Back, 0, MaskType::None),
            rec(500, 500, Orientation::Front, 3, MaskType::Simple),
        ];
        assert_eq!(filter_faces(&records, &FilterCriteria::default()), records);
    }

    #[test]
    fn criteria_compose_conjunctively() {
        let records: Vec<FaceRecord> = (0..50)
            .map(|i| {
                rec(
                    40 + i * 2,
                    40 + i * 2,
                    if i % 2 == 0 { Orientation::Front } else { Orientation::Left },
                    (i % 5) as i32,
                    if i % 3 == 0 { MaskType::Simple } else { MaskType::Complex },
                )
            })
            .collect();
        let c1 = FilterCriteria { min_size: Some(60), ..Default::default() };
        let c2 = FilterCriteria {
            orientations: Some(vec![Orientation::Front]),
            min_occlusion_degree: Some(3),
            ..Default::default()
        };
        let combined = FilterCriteria {
            min_size: Some(60),
            orientations: Some(vec![Orientation::Front]),
            min_occlusion_degree: Some(3),
            ..Default::default()
        };
        let sequential = filter_faces(&filter_faces(&records, &c1), &c2);
        let at_once = filter_faces(&records, &combined);
        assert_eq!(sequential, at_once);
    }

    #[test]
    fn downsample_matches_sizes_and_is_deterministic() {
        let a: Vec<PathBuf> = (0..700).map(|i| PathBuf::from(format!("a{i:04}.png"))).collect();
        let b: Vec<PathBuf> = (0..17).map(|i| PathBuf::from(format!("b{i:02}.png"))).collect();
        let s1 = balance_downsample(&a, &b, 9).unwrap();
        let s2 = balance_downsample(&a, &b, 9).unwrap();
        assert_eq!(s1.len(), 17);
        assert_eq!(s1, s2);
        let s3 = balance_downsample(&a, &b, 10).unwrap();
        assert_ne!(s1, s3, "different seeds should pick different subsets");
        // Subset property.
        let set: BTreeSet<_> = a.iter().collect();
        assert!(s1.iter().all(|p| set.contains(p)));

        // Equal sizes: identity up to order.
        let same = balance_downsample(&b, &b, 1).unwrap();
        assert_eq!(same, b);

        // |A| < |B| is an error.
        assert!(balance_downsample(&b, &a, 1).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("faces.jsonl");
        let records =
            vec![rec(64, 64, Orientation::Front, 3, MaskType::Simple), rec(70, 80, Orientation::Back, 1, MaskType::None)];
        write_jsonl(&p, &records).unwrap();
        let back: Vec<FaceRecord> = read_jsonl(&p).unwrap();
        assert_eq!(back, records);
    }
}
