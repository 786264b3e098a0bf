//! Seeded synthetic co-occurrence benchmark.
//!
//! Each scene is a small outdoor-like canvas: a sky gradient, a ground strip,
//! optional high-contrast chimney and optional translucent smoke plume. When
//! both are present the plume rises from the chimney top. The `coupling`
//! parameter of a split controls how strongly chimneys predict smoke:
//! positives get a chimney with probability `0.5 + 0.5·coupling`, negatives
//! with `0.5 - 0.5·coupling`. Coupling 1 makes the chimney a perfect shortcut;
//! coupling 0 makes it independent of the label.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::ActivationMap;
use crate::dataset::{self, SampleRecord, Split};
use crate::error::{Error, Result};

/// Smoke pixels are those whose rendered alpha reaches this value.
pub const SMOKE_ALPHA_THRESHOLD: f32 = 0.12;

/// Object ids written to the label image used by the offline proposal provider.
pub const OBJECT_BACKGROUND: u8 = 0;
pub const OBJECT_SMOKE: u8 = 1;
pub const OBJECT_CHIMNEY: u8 = 2;
pub const OBJECT_GROUND: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: (usize, usize),
    pub smoke_present: bool,
    pub chimney_present: bool,
    /// Coupling of the split this scene belongs to; recorded for provenance.
    pub coupling: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `H×W×3` RGB.
    pub image: Array3<u8>,
    /// Smoke ground truth, `{0,1}`.
    pub gt: Array2<u8>,
    pub label: u8,
    /// Visible chimney pixels, `{0,1}`.
    pub chimney: Array2<u8>,
    /// Per-pixel object id, see the `OBJECT_*` constants.
    pub objects: Array2<u8>,
    /// Rendered smoke opacity in `[0,1]`.
    pub alpha: Array2<f32>,
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Array3<f32>,
}

impl Canvas {
    fn blend(&mut self, y: usize, x: usize, color: [f32; 3], alpha: f32) {
        for (c, &v) in color.iter().enumerate() {
            let cur = self.rgb[[y, x, c]];
            self.rgb[[y, x, c]] = cur * (1.0 - alpha) + v * alpha;
        }
    }
}

/// Smooth value noise: random lattice values on a coarse grid, bilinearly
/// interpolated to the canvas.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Array2<f32> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice = Array2::from_shape_fn((gh, gw), |_| rng.random::<f32>());
    Array2::from_shape_fn((h, w), |(y, x)| {
        let fy = y as f32 / cell as f32;
        let fx = x as f32 / cell as f32;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        // smoothstep
        let (ty, tx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
        let top = lattice[[y0, x0]] * (1.0 - tx) + lattice[[y0, x0 + 1]] * tx;
        let bot = lattice[[y0 + 1, x0]] * (1.0 - tx) + lattice[[y0 + 1, x0 + 1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

pub fn generate_scene(layout: &SceneSpec) -> Result<Scene> {
    let (h, w) = layout.canvas;
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!("canvas {h}x{w} too small; need at least 16x16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);
    let mut canvas = Canvas {
        h,
        w,
        rgb: Array3::zeros((h, w, 3)),
    };
    let mut objects = Array2::<u8>::zeros((h, w));

    // sky: vertical gradient with a per-scene tint and soft texture
    let top = [
        rng.random_range(0.35..0.6f32),
        rng.random_range(0.45..0.7),
        rng.random_range(0.6..0.85),
    ];
    let bottom = [
        (top[0] + rng.random_range(0.05..0.2f32)).min(1.0),
        (top[1] + rng.random_range(0.05..0.2f32)).min(1.0),
        (top[2] + rng.random_range(0.0..0.1f32)).min(1.0),
    ];
    let texture = value_noise(&mut rng, h, w, 8);
    for y in 0..h {
        let t = y as f32 / (h - 1) as f32;
        for x in 0..w {
            let n = (texture[[y, x]] - 0.5) * 0.08;
            for c in 0..3 {
                canvas.rgb[[y, x, c]] = top[c] * (1.0 - t) + bottom[c] * t + n;
            }
        }
    }

    // ground strip
    let ground_h = rng.random_range(h / 8..h / 5 + 1);
    let ground_top = h - ground_h;
    let ground = [
        rng.random_range(0.25..0.4f32),
        rng.random_range(0.3..0.45),
        rng.random_range(0.2..0.3),
    ];
    for y in ground_top..h {
        for x in 0..w {
            let n = (texture[[y, x]] - 0.5) * 0.1;
            for c in 0..3 {
                canvas.rgb[[y, x, c]] = ground[c] + n;
            }
            objects[[y, x]] = OBJECT_GROUND;
        }
    }

    // chimney: dark, high-contrast rectangle standing on the ground
    let mut chimney = Array2::<u8>::zeros((h, w));
    let mut source: Option<(f32, f32)> = None;
    if layout.chimney_present {
        let cw = rng.random_range(w / 16 + 2..w / 10 + 3);
        let ch = rng.random_range(h / 4..h / 3 + 1);
        let cx = rng.random_range(w / 8..w - w / 8 - cw);
        let cy = ground_top.saturating_sub(ch);
        let color = [
            rng.random_range(0.25..0.4f32),
            rng.random_range(0.08..0.15),
            rng.random_range(0.05..0.12),
        ];
        for y in cy..ground_top + 1 {
            for x in cx..cx + cw {
                for (c, &v) in color.iter().enumerate() {
                    canvas.rgb[[y, x, c]] = v;
                }
                chimney[[y, x]] = 1;
                objects[[y, x]] = OBJECT_CHIMNEY;
            }
        }
        source = Some((cy as f32, cx as f32 + cw as f32 / 2.0));
    }

    // smoke: translucent plume of soft blobs modulated by value noise
    let mut alpha = Array2::<f32>::zeros((h, w));
    if layout.smoke_present {
        let (sy, sx) = source.unwrap_or_else(|| {
            (
                rng.random_range(h as f32 * 0.45..ground_top as f32 - 2.0),
                rng.random_range(w as f32 * 0.2..w as f32 * 0.8),
            )
        });
        let drift = rng.random_range(-0.6..0.6f32);
        let length = rng.random_range(h as f32 * 0.3..h as f32 * 0.55);
        let max_alpha = rng.random_range(0.45..0.65f32);
        let blobs = 6;
        let density_noise = value_noise(&mut rng, h, w, 6);
        let mut density = Array2::<f32>::zeros((h, w));
        for b in 0..blobs {
            let t = b as f32 / (blobs - 1) as f32;
            let cy = sy - t * length;
            let cx = sx + drift * t * length + rng.random_range(-1.5..1.5f32);
            let r = 2.5 + t * length * 0.35;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    density[[y, x]] += (-d2 / (2.0 * r * r)).exp();
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let d = density[[y, x]].min(1.0) * (0.6 + 0.8 * density_noise[[y, x]]);
                alpha[[y, x]] = (d * max_alpha).clamp(0.0, max_alpha);
            }
        }
        let color = [
            rng.random_range(0.72..0.85f32),
            rng.random_range(0.72..0.85),
            rng.random_range(0.74..0.88),
        ];
        for y in 0..h {
            for x in 0..w {
                if alpha[[y, x]] > 0.0 {
                    canvas.blend(y, x, color, alpha[[y, x]]);
                }
            }
        }
    }

    let gt = alpha.mapv(|a| u8::from(a >= SMOKE_ALPHA_THRESHOLD));
    for ((y, x), &g) in gt.indexed_iter() {
        if g == 1 {
            objects[[y, x]] = OBJECT_SMOKE;
            chimney[[y, x]] = 0;
        }
    }
    let image = canvas
        .rgb
        .mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    debug_assert_eq!(image.dim(), (canvas.h, canvas.w, 3));
    let label = u8::from(gt.iter().any(|&g| g == 1));
    Ok(Scene {
        image,
        gt,
        label,
        chimney,
        objects,
        alpha,
    })
}

/// Chimney probability for a scene, given its smoke label and split coupling.
pub fn chimney_probability(smoke: bool, coupling: f64) -> f64 {
    if smoke {
        0.5 + 0.5 * coupling
    } else {
        0.5 - 0.5 * coupling
    }
}

fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .rotate_left(17)
}

/// Specs for a balanced split: even indices are positives, odd negatives.
pub fn split_specs(n: usize, coupling: f64, seed: u64, canvas: (usize, usize)) -> Result<Vec<SceneSpec>> {
    if n == 0 {
        return Err(Error::invalid("split size must be >= 1"));
    }
    if !(0.0..=1.0).contains(&coupling) {
        return Err(Error::invalid(format!("coupling must be in [0,1], got {coupling}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
    Ok((0..n)
        .map(|i| {
            let smoke = i % 2 == 0;
            let chimney = rng.random_bool(chimney_probability(smoke, coupling));
            SceneSpec {
                canvas,
                smoke_present: smoke,
                chimney_present: chimney,
                coupling,
                seed: scene_seed(seed, i),
            }
        })
        .collect())
}

pub fn generate_scenes(n: usize, coupling: f64, seed: u64, canvas: (usize, usize)) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    split_specs(n, coupling, seed, canvas)?
        .par_iter()
        .map(generate_scene)
        .collect()
}

/// Sidecar record written next to a generated manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSidecar {
    pub n: usize,
    pub coupling: f64,
    pub seed: u64,
    pub canvas: (usize, usize),
    pub smoke_alpha_threshold: f32,
    pub scenes: Vec<SidecarScene>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarScene {
    pub id: String,
    pub label: u8,
    pub chimney_present: bool,
    pub seed: u64,
    pub chimney_mask: String,
    pub objects: String,
}

#[derive(Debug, Clone)]
pub struct GeneratedSplit {
    pub manifest: PathBuf,
    pub sidecar: PathBuf,
    pub records: Vec<SampleRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const SIDECAR_NAME: &str = "synth.json";

/// Write images, masks, chimney masks, object label images, a manifest and a
/// JSON sidecar under `dir`.
pub fn generate_split(
    dir: impl AsRef<Path>,
    n: usize,
    coupling: f64,
    seed: u64,
    canvas: (usize, usize),
    split: Split,
) -> Result<GeneratedSplit> {
    let dir = dir.as_ref();
    for sub in ["images", "masks", "chimney", "objects"] {
        crate::io::ensure_dir(dir.join(sub))?;
    }
    let layouts = split_specs(n, coupling, seed, canvas)?;
    let mut records = Vec::with_capacity(n);
    let mut scenes_meta = Vec::with_capacity(n);
    for (i, layout) in layouts.iter().enumerate() {
        let scene = generate_scene(layout)?;
        let id = format!("scene_{i:05}");
        let image_path = dir.join("images").join(format!("{id}.png"));
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let chimney_rel = format!("chimney/{id}.png");
        let objects_rel = format!("objects/{id}.png");
        dataset::save_rgb(&image_path, scene.image.view())?;
        dataset::save_mask(&mask_path, scene.gt.view())?;
        dataset::save_mask(dir.join(&chimney_rel), scene.chimney.view())?;
        save_objects(&dir.join(&objects_rel), scene.objects.view())?;
        records.push(SampleRecord {
            image_path,
            label: scene.label,
            mask_path: Some(mask_path),
            split,
            issue: None,
        });
        scenes_meta.push(SidecarScene {
            id,
            label: scene.label,
            chimney_present: layout.chimney_present,
            seed: layout.seed,
            chimney_mask: chimney_rel,
            objects: objects_rel,
        });
    }
    let manifest = dir.join(MANIFEST_NAME);
    dataset::write_manifest(&manifest, &records)?;
    let sidecar = dir.join(SIDECAR_NAME);
    let meta = SplitSidecar {
        n,
        coupling,
        seed,
        canvas,
        smoke_alpha_threshold: SMOKE_ALPHA_THRESHOLD,
        scenes: scenes_meta,
    };
    crate::io::write_atomic(&sidecar, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(GeneratedSplit {
        manifest,
        sidecar,
        records,
    })
}

fn save_objects(path: &Path, objects: ArrayView2<u8>) -> Result<()> {
    let (h, w) = objects.dim();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, objects.iter().copied().collect())
        .ok_or_else(|| Error::shape("object buffer size"))?;
    let tmp = crate::io::temp_sibling(path);
    buf.save(&tmp).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load an object label image written by [`generate_split`].
pub fn load_objects(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| Error::shape(e.to_string()))
}

/// Activation mass on chimney pixels and in total, for a normalized CAM.
/// Summing both over a dataset and dividing gives the chimney activation ratio.
pub fn chimney_mass(cam: &ActivationMap, chimney: ArrayView2<u8>) -> Result<(f64, f64)> {
    let m = cam.max_over_classes();
    if m.dim() != chimney.dim() {
        return Err(Error::shape(format!(
            "cam {:?} vs chimney mask {:?}",
            m.dim(),
            chimney.dim()
        )));
    }
    let mut on = 0.0;
    let mut total = 0.0;
    for (&v, &c) in m.iter().zip(chimney.iter()) {
        let v = v.max(0.0) as f64;
        total += v;
        if c != 0 {
            on += v;
        }
    }
    Ok((on, total))
}
