//! Image tensors, normalization and sidecar file I/O.
//!
//! Images live in two domains: 8-bit storage (`0..=255` per channel) and the
//! model domain `[-1, 1]` used everywhere else in the crate. Region masks are
//! boolean rasters stored as lossless 8-bit grayscale PNG sidecars so they
//! survive round-trips bit-exactly.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Extension appended to an image stem to name its region-mask sidecar.
pub const REGION_MASK_SUFFIX: &str = "regionmask.png";

/// An RGB image in the model domain `[-1, 1]`, laid out `[height, width, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wraps an `[H, W, 3]` array. Values must be finite and within `[-1, 1]`.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::DimensionMismatch("image tensor with zero dimension".into()));
        }
        if c != 3 {
            return Err(Error::DimensionMismatch(format!("expected 3 channels, got {c}")));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(Error::DimensionMismatch(format!(
                    "model-domain value {v} outside [-1, 1]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Wraps without range validation. For internal use where values are
    /// produced by normalization and already in range.
    pub(crate) fn from_raw(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Converts to an 8-bit storage-domain image.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w, _) = self.data.dim();
        let mut img = RgbImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let px = [
                    denormalize(self.data[[i, j, 0]]),
                    denormalize(self.data[[i, j, 1]]),
                    denormalize(self.data[[i, j, 2]]),
                ];
                img.put_pixel(j as u32, i as u32, image::Rgb(px));
            }
        }
        img
    }

    /// Converts an 8-bit storage-domain image into the model domain.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = normalize(px.0[c]);
            }
        }
        Self { data }
    }
}

/// Maps a storage-domain value to the model domain: `v = p / 127.5 - 1`.
pub fn normalize(p: u8) -> f64 {
    f64::from(p) / 127.5 - 1.0
}

/// Maps a model-domain value back to storage, rounding and clamping.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// A boolean raster marking rule-generated mask pixels, laid out `[H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    data: Array2<bool>,
}

impl RegionMask {
    pub fn new(data: Array2<bool>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::DimensionMismatch("region mask with zero dimension".into()));
        }
        Ok(Self { data })
    }

    pub fn all_false(height: usize, width: usize) -> Self {
        Self { data: Array2::from_elem((height, width), false) }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads an 8-bit RGB raster, resizes it to `target_size` square with
/// bilinear filtering (no crop) and maps values into `[-1, 1]`.
pub fn load_image(path: &Path, target_size: usize) -> Result<ImageTensor> {
    if target_size == 0 {
        return Err(Error::InvalidConfig("target_size must be positive".into()));
    }
    let img = open_image(path)?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::ZeroDimension(path.to_path_buf()));
    }
    let rgb = img.to_rgb8();
    let resized = if rgb.dimensions() == (target_size as u32, target_size as u32) {
        rgb
    } else {
        image::imageops::resize(
            &rgb,
            target_size as u32,
            target_size as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    Ok(ImageTensor::from_rgb8(&resized))
}

/// Loads an image at its native size, without resizing.
pub fn load_image_native(path: &Path) -> Result<ImageTensor> {
    let img = open_image(path)?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::ZeroDimension(path.to_path_buf()));
    }
    Ok(ImageTensor::from_rgb8(&img.to_rgb8()))
}

/// Sidecar path for an image: `<dir>/<stem>.regionmask.png`.
pub fn region_mask_path(image_path: &Path) -> PathBuf {
    sidecar_path(image_path, REGION_MASK_SUFFIX)
}

pub(crate) fn sidecar_path(image_path: &Path, suffix: &str) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}.{suffix}"))
}

/// Writes `mask` as a lossless 8-bit grayscale PNG (0 = non-mask, 255 = mask)
/// beside `image_path`, returning the sidecar path. The write goes through a
/// temp file and a rename so concurrent readers never see a partial file.
pub fn save_region_mask(mask: &RegionMask, image_path: &Path) -> Result<PathBuf> {
    let out = region_mask_path(image_path);
    let mut img = GrayImage::new(mask.width() as u32, mask.height() as u32);
    for ((i, j), &on) in mask.data().indexed_iter() {
        img.put_pixel(j as u32, i as u32, image::Luma([if on { 255 } else { 0 }]));
    }
    let tmp = out.with_extension("png.tmp");
    img.save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(|e| Error::ImageWrite { path: out.clone(), reason: e.to_string() })?;
    std::fs::rename(&tmp, &out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

/// Loads a sidecar written by [`save_region_mask`]. The file must be a
/// single-channel raster holding only 0 and 255.
pub fn load_region_mask(path: &Path) -> Result<RegionMask> {
    let img = open_image(path)?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::CorruptSidecar {
                path: path.to_path_buf(),
                reason: format!("expected single-channel 8-bit raster, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::ZeroDimension(path.to_path_buf()));
    }
    let mut data = Array2::from_elem((h as usize, w as usize), false);
    for (x, y, px) in gray.enumerate_pixels() {
        data[[y as usize, x as usize]] = match px.0[0] {
            0 => false,
            255 => true,
            v => {
                return Err(Error::CorruptSidecar {
                    path: path.to_path_buf(),
                    reason: format!("intermediate gray value {v} at ({x}, {y})"),
                })
            }
        };
    }
    Ok(RegionMask { data })
}
