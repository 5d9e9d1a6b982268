//! Step 1: warp an annotated mask template onto a full-face image using
//! facial landmarks.
//!
//! The template carries anchor points paired with landmark indices. The
//! anchors are Delaunay-triangulated in template space, each triangle is
//! affinely mapped onto the corresponding landmark triangle in face space,
//! and template pixels composite over the face wherever the template alpha
//! clears 0.5. Compositing is binary so the extracted mask region is
//! unambiguous; soft transitions are the translation model's job.

pub mod delaunay;

use std::path::{Path, PathBuf};

use image::RgbaImage;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::image_core::{normalize, sidecar_path, ImageTensor, RegionMask};
use crate::region_extract::{extract_region, ExtractConfig};
use delaunay::{collinear, triangulate};
pub use delaunay::Point;

/// Number of facial landmark points.
pub const NUM_LANDMARKS: usize = 68;

/// Suffix of the landmark sidecar: `<stem>.landmarks.json`.
pub const LANDMARKS_SUFFIX: &str = "landmarks.json";

/// Default landmark indices for mask anchors: jaw contour, nose bridge and
/// mouth corners.
pub const DEFAULT_ANCHOR_LANDMARKS: [usize; 12] = [1, 3, 5, 8, 11, 13, 15, 28, 29, 30, 48, 54];

/// 68 facial landmarks in image pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    /// Validates the point count and the left-to-right jawline ordering
    /// (indices 0..=16 non-decreasing in x).
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidLandmarks(format!(
                "expected {NUM_LANDMARKS} points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLandmarks("non-finite coordinate".into()));
        }
        for i in 0..16 {
            if points[i][0] > points[i + 1][0] {
                return Err(Error::InvalidLandmarks(format!(
                    "jawline not ordered left-to-right at index {i}"
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> Point {
        self.points[idx]
    }

    /// Clamps every point into `[0, w-1] x [0, h-1]`.
    pub fn clamped(mut self, width: usize, height: usize) -> Self {
        for p in &mut self.points {
            p[0] = p[0].clamp(0.0, (width - 1) as f64);
            p[1] = p[1].clamp(0.0, (height - 1) as f64);
        }
        self
    }

    fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p[0] < 0.0 || p[0] > (width - 1) as f64 || p[1] < 0.0 || p[1] > (height - 1) as f64 {
                return Err(Error::InvalidLandmarks(format!(
                    "landmark {i} at ({}, {}) outside {width}x{height} image",
                    p[0], p[1]
                )));
            }
        }
        Ok(())
    }
}

/// Sidecar path for an image's landmarks: `<stem>.landmarks.json`.
pub fn landmarks_path(image_path: &Path) -> PathBuf {
    sidecar_path(image_path, LANDMARKS_SUFFIX)
}

/// Loads a landmark sidecar (a JSON array of 68 `[x, y]` pairs) and clamps
/// the points into the image bounds.
pub fn load_landmarks(path: &Path, width: usize, height: usize) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<Point> = serde_json::from_str(&text)?;
    let clamped: Vec<Point> = raw
        .into_iter()
        .map(|p| [p[0].clamp(0.0, (width - 1) as f64), p[1].clamp(0.0, (height - 1) as f64)])
        .collect();
    LandmarkSet::new(clamped)
}

#[derive(Debug, Deserialize)]
struct TemplateSpec {
    anchors: Vec<Point>,
    landmark_map: Vec<usize>,
}

/// A mask raster plus anchor points mapped to landmark indices.
#[derive(Debug, Clone)]
pub struct MaskTemplate {
    raster: RgbaImage,
    anchors: Vec<Point>,
    landmark_map: Vec<usize>,
}

impl MaskTemplate {
    pub fn new(raster: RgbaImage, anchors: Vec<Point>, landmark_map: Vec<usize>) -> Result<Self> {
        if raster.width() == 0 || raster.height() == 0 {
            return Err(Error::InvalidTemplate("empty raster".into()));
        }
        if anchors.len() < 6 {
            return Err(Error::InvalidTemplate(format!(
                "need at least 6 anchors, got {}",
                anchors.len()
            )));
        }
        if anchors.len() != landmark_map.len() {
            return Err(Error::InvalidTemplate(format!(
                "{} anchors but {} landmark indices",
                anchors.len(),
                landmark_map.len()
            )));
        }
        let (w, h) = (raster.width() as f64, raster.height() as f64);
        for (i, a) in anchors.iter().enumerate() {
            if a[0] < 0.0 || a[0] > w - 1.0 || a[1] < 0.0 || a[1] > h - 1.0 {
                return Err(Error::InvalidTemplate(format!(
                    "anchor {i} at ({}, {}) outside raster {w}x{h}",
                    a[0], a[1]
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for &idx in &landmark_map {
            if idx >= NUM_LANDMARKS {
                return Err(Error::InvalidTemplate(format!("landmark index {idx} out of range")));
            }
            if !seen.insert(idx) {
                return Err(Error::InvalidTemplate(format!("duplicate landmark index {idx}")));
            }
        }
        Ok(Self { raster, anchors, landmark_map })
    }

    /// Loads a template bundle: `<base>.png` (RGBA raster) plus `<base>.json`
    /// holding `{"anchors": [[x,y]...], "landmark_map": [i...]}`.
    pub fn load(png_path: &Path) -> Result<Self> {
        if !png_path.exists() {
            return Err(Error::FileNotFound(png_path.to_path_buf()));
        }
        let raster = image::open(png_path)
            .map_err(|e| Error::ImageDecode { path: png_path.to_path_buf(), reason: e.to_string() })?
            .to_rgba8();
        let json_path = png_path.with_extension("json");
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let spec: TemplateSpec = serde_json::from_str(&text)?;
        Self::new(raster, spec.anchors, spec.landmark_map)
    }

    pub fn raster(&self) -> &RgbaImage {
        &self.raster
    }

    pub fn anchors(&self) -> &[Point] {
        &self.anchors
    }

    pub fn landmark_map(&self) -> &[usize] {
        &self.landmark_map
    }
}

/// Resolves collinear anchor triples by nudging the later-indexed point
/// 0.25 px perpendicular to the degenerate segment, repeating until every
/// triple spans a proper triangle.
pub fn perturb_degenerate(points: &[Point]) -> Result<Vec<Point>> {
    let mut pts = points.to_vec();
    let n = pts.len();
    let max_rounds = 40 * n.max(1);
    for _ in 0..max_rounds {
        let mut fixed_one = false;
        'scan: for i in 0..n {
            for j in (i + 1)..n {
                for k in (j + 1)..n {
                    if collinear(pts[i], pts[j], pts[k]) {
                        let (dx, dy) = (pts[j][0] - pts[i][0], pts[j][1] - pts[i][1]);
                        let len = (dx * dx + dy * dy).sqrt();
                        let (nx, ny) = if len > 1e-12 {
                            (-dy / len, dx / len)
                        } else {
                            // coincident base points: any fixed direction works
                            (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2)
                        };
                        pts[k][0] += 0.25 * nx;
                        pts[k][1] += 0.25 * ny;
                        fixed_one = true;
                        break 'scan;
                    }
                }
            }
        }
        if !fixed_one {
            return Ok(pts);
        }
    }
    Err(Error::DegenerateTriangulation(
        "anchor perturbation did not converge; anchors too degenerate".into(),
    ))
}

fn barycentric(p: Point, a: Point, b: Point, c: Point) -> Option<(f64, f64, f64)> {
    let denom = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    if denom.abs() < 1e-12 {
        return None;
    }
    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / denom;
    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / denom;
    Some((1.0 - l1 - l2, l1, l2))
}

const INSIDE_EPS: f64 = 1e-9;
const ALPHA_THRESHOLD: u8 = 128;

/// Warps the template onto the face. Pixels outside the warped alpha support
/// are returned bit-identical to the input.
pub fn warp_mask(
    face: &ImageTensor,
    landmarks: &LandmarkSet,
    template: &MaskTemplate,
) -> Result<ImageTensor> {
    let (h, w) = (face.height(), face.width());
    landmarks.check_inside(w, h)?;

    let anchors = perturb_degenerate(template.anchors())?;
    let tris = triangulate(&anchors)?;

    let mut out = face.data().clone();
    let raster = template.raster();
    let (tw, th) = (raster.width() as i64, raster.height() as i64);

    for tri in &tris {
        let t_pts = [anchors[tri[0]], anchors[tri[1]], anchors[tri[2]]];
        let f_pts = [
            landmarks.point(template.landmark_map()[tri[0]]),
            landmarks.point(template.landmark_map()[tri[1]]),
            landmarks.point(template.landmark_map()[tri[2]]),
        ];
        // Bounding box of the face-space triangle, clipped to the image.
        let min_x = f_pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x = (f_pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil() as usize)
            .min(w - 1);
        let min_y = f_pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y = (f_pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil() as usize)
            .min(h - 1);

        for i in min_y..=max_y {
            for j in min_x..=max_x {
                let p = [j as f64, i as f64];
                let Some((l0, l1, l2)) = barycentric(p, f_pts[0], f_pts[1], f_pts[2]) else {
                    continue;
                };
                if l0 < -INSIDE_EPS || l1 < -INSIDE_EPS || l2 < -INSIDE_EPS {
                    continue;
                }
                let qx = (l0 * t_pts[0][0] + l1 * t_pts[1][0] + l2 * t_pts[2][0]).round() as i64;
                let qy = (l0 * t_pts[0][1] + l1 * t_pts[1][1] + l2 * t_pts[2][1]).round() as i64;
                let qx = qx.clamp(0, tw - 1) as u32;
                let qy = qy.clamp(0, th - 1) as u32;
                let px = raster.get_pixel(qx, qy);
                if px.0[3] >= ALPHA_THRESHOLD {
                    out[[i, j, 0]] = normalize(px.0[0]);
                    out[[i, j, 1]] = normalize(px.0[1]);
                    out[[i, j, 2]] = normalize(px.0[2]);
                }
            }
        }
    }
    Ok(ImageTensor::from_raw(out))
}

/// Warps the template and extracts the resulting mask region.
pub fn warp_and_extract(
    face: &ImageTensor,
    landmarks: &LandmarkSet,
    template: &MaskTemplate,
    cfg: &ExtractConfig,
) -> Result<(ImageTensor, RegionMask)> {
    let warped = warp_mask(face, landmarks, template)?;
    let region = extract_region(face, &warped, cfg)?;
    Ok((warped, region))
}
