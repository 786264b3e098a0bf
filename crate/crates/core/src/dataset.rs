//! Manifest loading, sliding-window cropping, smoke-patch filtering and
//! input normalization.
//!
//! A manifest is UTF-8 text with one record per line:
//!
//! ```text
//! image_path<TAB>label<TAB>[mask_path]
//! ```
//!
//! `label` is `0` (no smoke) or `1` (smoke). Relative paths resolve against the
//! manifest's directory. Blank lines and lines starting with `#` are skipped.
//! Masks are single-channel lossless images with 0 = background, 255 = smoke.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, LineIssue, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub label: u8,
    pub mask_path: Option<PathBuf>,
    pub split: Split,
    /// Set when a referenced file could not be found at load time. Flagged
    /// records are kept so callers can decide how to report them.
    pub issue: Option<String>,
}

impl SampleRecord {
    /// File stem of the image, used to name per-image outputs.
    pub fn image_id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub fn load_manifest(path: impl AsRef<Path>, split: Split) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base, split).map_err(|issues| Error::Manifest {
        path: path.to_path_buf(),
        issues,
    })
}

/// Parse manifest text. All malformed lines are reported together.
pub fn parse_manifest(
    text: &str,
    base: &Path,
    split: Split,
) -> std::result::Result<Vec<SampleRecord>, Vec<LineIssue>> {
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_line(trimmed, base, split) {
            Ok(rec) => records.push(rec),
            Err(message) => issues.push(LineIssue { line, message }),
        }
    }
    if issues.is_empty() {
        Ok(records)
    } else {
        Err(issues)
    }
}

fn parse_line(line: &str, base: &Path, split: Split) -> std::result::Result<SampleRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if !(2..=3).contains(&fields.len()) {
        return Err(format!(
            "expected 2 or 3 tab-separated fields, found {}",
            fields.len()
        ));
    }
    if fields[0].is_empty() {
        return Err("empty image path".into());
    }
    let label = match fields[1].trim() {
        "0" => 0,
        "1" => 1,
        other => return Err(format!("label must be 0 or 1, got {other:?}")),
    };
    let mask_path = fields
        .get(2)
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| base.join(s));
    if split == Split::Test && mask_path.is_none() {
        return Err("test records require a mask path".into());
    }
    let image_path = base.join(fields[0]);
    let mut missing = Vec::new();
    if !image_path.is_file() {
        missing.push(format!("image not found: {}", image_path.display()));
    }
    if let Some(m) = &mask_path {
        if !m.is_file() {
            missing.push(format!("mask not found: {}", m.display()));
        }
    }
    Ok(SampleRecord {
        image_path,
        label,
        mask_path,
        split,
        issue: (!missing.is_empty()).then(|| missing.join("; ")),
    })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::new();
    for r in records {
        out.push_str(&rel(&r.image_path));
        out.push('\t');
        out.push_str(&r.label.to_string());
        if let Some(m) = &r.mask_path {
            out.push('\t');
            out.push_str(&rel(m));
        }
        out.push('\n');
    }
    crate::io::write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `H×W×3` pixels, already normalized.
    pub pixels: Array3<f32>,
    /// `(row, col)` of the top-left corner in the source image.
    pub origin: (usize, usize),
    pub source_id: usize,
}

/// Window origins along one axis. The last origin is clamped to the border so
/// the whole axis is covered.
fn axis_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        if start + window >= len {
            let last = len - window;
            if out.last() != Some(&last) {
                out.push(last);
            }
            return out;
        }
        out.push(start);
        start += stride;
    }
}

/// All `(row, col)` window origins for an `h×w` image, row-major.
pub fn crop_origins(h: usize, w: usize, window: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if window == 0 || window > h.min(w) {
        return Err(Error::invalid(format!(
            "window {window} does not fit a {h}x{w} image"
        )));
    }
    if stride > window {
        return Err(Error::invalid(format!(
            "stride {stride} exceeds window {window}; windows would leave gaps"
        )));
    }
    let rows = axis_origins(h, window, stride);
    let cols = axis_origins(w, window, stride);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

pub fn slide_crop(
    image: ArrayView3<f32>,
    window: usize,
    stride: usize,
    source_id: usize,
) -> Result<Vec<Patch>> {
    let (h, w, _) = image.dim();
    Ok(crop_origins(h, w, window, stride)?
        .into_iter()
        .map(|(r, c)| Patch {
            pixels: image.slice(s![r..r + window, c..c + window, ..]).to_owned(),
            origin: (r, c),
            source_id,
        })
        .collect())
}

/// Crop a mask with the same window placement as [`slide_crop`].
pub fn crop_mask(mask: ArrayView2<u8>, origin: (usize, usize), window: usize) -> Result<Array2<u8>> {
    let (h, w) = mask.dim();
    let (r, c) = origin;
    if r + window > h || c + window > w {
        return Err(Error::shape(format!(
            "window {window} at {origin:?} exceeds mask {h}x{w}"
        )));
    }
    Ok(mask.slice(s![r..r + window, c..c + window]).to_owned())
}

/// Keep the patches whose aligned mask contains at least one smoke pixel.
pub fn filter_smoke_patches(patches: Vec<Patch>, masks: &[Array2<u8>]) -> Result<Vec<Patch>> {
    if patches.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} patches but {} masks",
            patches.len(),
            masks.len()
        )));
    }
    for (i, (p, m)) in patches.iter().zip(masks).enumerate() {
        let (ph, pw, _) = p.pixels.dim();
        if m.dim() != (ph, pw) {
            return Err(Error::shape(format!(
                "patch {i} is {ph}x{pw} but its mask is {:?}",
                m.dim()
            )));
        }
    }
    Ok(patches
        .into_iter()
        .zip(masks)
        .filter(|(_, m)| m.iter().any(|&v| v != 0))
        .map(|(p, _)| p)
        .collect())
}

/// Per-channel affine input normalization `(x/255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

pub fn normalize(image: ArrayView3<u8>, norm: &Normalization) -> Array3<f32> {
    let mut out = image.mapv(|v| v as f32 / 255.0);
    for ((_, _, c), v) in out.indexed_iter_mut() {
        *v = (*v - norm.mean[c]) / norm.std[c];
    }
    out
}

/// Inverse of [`normalize`] back to the `[0, 1]` scale (not re-quantized).
pub fn denormalize(image: ArrayView3<f32>, norm: &Normalization) -> Array3<f32> {
    let mut out = image.to_owned();
    for ((_, _, c), v) in out.indexed_iter_mut() {
        *v = *v * norm.std[c] + norm.mean[c];
    }
    out
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<Array3<u8>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::shape(e.to_string()))
}

pub fn save_rgb(path: impl AsRef<Path>, image: ArrayView3<u8>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let buf = image::RgbImage::from_raw(
        w as u32,
        h as u32,
        image.as_standard_layout().iter().copied().collect(),
    )
    .ok_or_else(|| Error::shape("rgb buffer size"))?;
    save_image(path.as_ref(), |p| buf.save(p))
}

/// Load a binary mask; pixels above 127 are smoke (1), others background (0).
pub fn load_mask(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
    Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| Error::shape(e.to_string()))
}

/// Save a `{0,1}` label map as 0/255 grayscale PNG.
pub fn save_mask(path: impl AsRef<Path>, mask: ArrayView2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = image::GrayImage::from_raw(
        w as u32,
        h as u32,
        mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
    )
    .ok_or_else(|| Error::shape("mask buffer size"))?;
    save_image(path.as_ref(), |p| buf.save(p))
}

fn save_image(
    path: &Path,
    save: impl FnOnce(&Path) -> image::ImageResult<()>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        crate::io::ensure_dir(parent)?;
    }
    let tmp = crate::io::temp_sibling(path);
    save(&tmp).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
