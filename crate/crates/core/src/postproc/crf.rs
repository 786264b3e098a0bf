//! Fully connected CRF over two labels (background, smoke), approximated by
//! windowed mean-field inference with Potts compatibility.

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::cam::{ActivationMap, PseudoMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    /// Foreground tempering: `fg = 1 - (1 - cam)^scaling`. Larger values keep
    /// weak activations in the foreground.
    pub scaling: f32,
    pub iterations: usize,
    pub gaussian_sxy: f32,
    pub bilateral_sxy: f32,
    /// Colour bandwidth on the 0-255 scale.
    pub bilateral_srgb: f32,
    pub w_gaussian: f32,
    pub w_bilateral: f32,
    /// Pairwise kernels are truncated to `min(ceil(3σ), max_radius)` pixels.
    pub max_radius: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            scaling: 16.0,
            iterations: 10,
            gaussian_sxy: 3.0,
            bilateral_sxy: 50.0,
            bilateral_srgb: 13.0,
            w_gaussian: 3.0,
            w_bilateral: 10.0,
            max_radius: 12,
        }
    }
}

impl CrfParams {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.iterations == 0 {
            out.push("crf: iterations must be >= 1".to_string());
        }
        if !(self.scaling > 0.0 && self.scaling.is_finite()) {
            out.push(format!("crf: scaling must be > 0, got {}", self.scaling));
        }
        for (name, v) in [
            ("gaussian_sxy", self.gaussian_sxy),
            ("bilateral_sxy", self.bilateral_sxy),
            ("bilateral_srgb", self.bilateral_srgb),
        ] {
            if !(v > 0.0) {
                out.push(format!("crf: {name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [("w_gaussian", self.w_gaussian), ("w_bilateral", self.w_bilateral)] {
            if !(v >= 0.0) {
                out.push(format!("crf: {name} must be >= 0, got {v}"));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct CrfOutput {
    /// `2×H×W`; index 0 is background, 1 smoke.
    pub probabilities: Array3<f32>,
    pub mask: PseudoMask,
    /// Softmax of the negated unary, i.e. the distribution before any
    /// pairwise message.
    pub unary_probabilities: Array3<f32>,
    /// L∞ change of `Q` at each iteration.
    pub deltas: Vec<f64>,
    /// Largest `|Q_bg + Q_fg - 1|` seen at any iteration.
    pub max_normalization_error: f64,
}

const PROB_EPS: f64 = 1e-6;

struct Kernel {
    offsets: Vec<(isize, isize, f64)>,
}

impl Kernel {
    fn new(sxy: f32, max_radius: usize) -> Self {
        let r = ((3.0 * sxy).ceil() as usize).min(max_radius) as isize;
        let s2 = 2.0 * (sxy as f64).powi(2);
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy == 0 && dx == 0 {
                    continue;
                }
                offsets.push((dy, dx, (-((dy * dy + dx * dx) as f64) / s2).exp()));
            }
        }
        Self { offsets }
    }
}

pub fn crf_refine(image: ArrayView3<u8>, cam: &ActivationMap, params: &CrfParams) -> Result<CrfOutput> {
    if !cam.normalized {
        return Err(Error::invalid("crf_refine requires a normalized CAM"));
    }
    let problems = params.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(Error::shape(format!("expected H×W×3 image, got {:?}", image.dim())));
    }
    if cam.hw() != (h, w) {
        return Err(Error::shape(format!("cam {:?} vs image {:?}", cam.hw(), (h, w))));
    }
    let fgcam = cam.max_over_classes();
    // unary distribution
    let mut unary = Array3::<f64>::zeros((2, h, w));
    for ((y, x), &c) in fgcam.indexed_iter() {
        let c = (c as f64).clamp(0.0, 1.0);
        let fg = (1.0 - (1.0 - c).powf(params.scaling as f64)).clamp(PROB_EPS, 1.0 - PROB_EPS);
        unary[[0, y, x]] = -(1.0 - fg).ln();
        unary[[1, y, x]] = -fg.ln();
    }
    let softmax = |e0: f64, e1: f64| -> (f64, f64) {
        let m = e0.min(e1);
        let (a, b) = ((-(e0 - m)).exp(), (-(e1 - m)).exp());
        (a / (a + b), b / (a + b))
    };
    let mut q = Array3::<f64>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let (a, b) = softmax(unary[[0, y, x]], unary[[1, y, x]]);
            q[[0, y, x]] = a;
            q[[1, y, x]] = b;
        }
    }
    let unary_probabilities = q.mapv(|v| v as f32);

    let gauss = Kernel::new(params.gaussian_sxy, params.max_radius);
    let bilat = Kernel::new(params.bilateral_sxy, params.max_radius);
    let rgb = image.mapv(|v| v as f64);
    let srgb2 = 2.0 * (params.bilateral_srgb as f64).powi(2);
    let (wg, wb) = (params.w_gaussian as f64, params.w_bilateral as f64);

    let mut deltas = Vec::with_capacity(params.iterations);
    let mut max_norm_err: f64 = 0.0;
    let mut msg = Array2::<[f64; 2]>::from_elem((h, w), [0.0; 2]);
    for _ in 0..params.iterations {
        msg.fill([0.0; 2]);
        if wg > 0.0 || wb > 0.0 {
            use rayon::prelude::*;
            let rows: Vec<Vec<[f64; 2]>> = (0..h)
                .into_par_iter()
                .map(|y| {
                    (0..w)
                        .map(|x| {
                            let mut m = [0.0f64; 2];
                            if wg > 0.0 {
                                for &(dy, dx, k) in &gauss.offsets {
                                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                                        continue;
                                    }
                                    let (ny, nx) = (ny as usize, nx as usize);
                                    m[0] += wg * k * q[[0, ny, nx]];
                                    m[1] += wg * k * q[[1, ny, nx]];
                                }
                            }
                            if wb > 0.0 {
                                for &(dy, dx, k) in &bilat.offsets {
                                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                                        continue;
                                    }
                                    let (ny, nx) = (ny as usize, nx as usize);
                                    let mut d2 = 0.0;
                                    for c in 0..3 {
                                        d2 += (rgb[[y, x, c]] - rgb[[ny, nx, c]]).powi(2);
                                    }
                                    let kk = wb * k * (-d2 / srgb2).exp();
                                    m[0] += kk * q[[0, ny, nx]];
                                    m[1] += kk * q[[1, ny, nx]];
                                }
                            }
                            m
                        })
                        .collect()
                })
                .collect();
            for (y, row) in rows.into_iter().enumerate() {
                for (x, m) in row.into_iter().enumerate() {
                    msg[[y, x]] = m;
                }
            }
        }
        let mut delta: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                // Potts: E(l) = U(l) + Σ k·(1 - Q_j(l)) = U(l) - Σ k·Q_j(l) + const
                let m = msg[[y, x]];
                let (a, b) = softmax(unary[[0, y, x]] - m[0], unary[[1, y, x]] - m[1]);
                delta = delta.max((a - q[[0, y, x]]).abs()).max((b - q[[1, y, x]]).abs());
                max_norm_err = max_norm_err.max((a + b - 1.0).abs());
                q[[0, y, x]] = a;
                q[[1, y, x]] = b;
            }
        }
        deltas.push(delta);
    }
    let labels = Array2::from_shape_fn((h, w), |(y, x)| u8::from(q[[1, y, x]] > q[[0, y, x]]));
    Ok(CrfOutput {
        probabilities: q.mapv(|v| v as f32),
        mask: PseudoMask::new(labels)?,
        unary_probabilities,
        deltas,
        max_normalization_error: max_norm_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn cam_from(v: Array2<f32>) -> ActivationMap {
        ActivationMap::new(v.insert_axis(ndarray::Axis(0)), true)
    }

    #[test]
    fn zero_pairwise_is_unary() {
        let img = Array3::<u8>::from_shape_fn((6, 5, 3), |(y, x, c)| (y * 30 + x * 10 + c) as u8);
        let cam = cam_from(Array2::from_shape_fn((6, 5), |(y, x)| ((y * 5 + x) as f32) / 29.0));
        let p = CrfParams {
            w_gaussian: 0.0,
            w_bilateral: 0.0,
            ..Default::default()
        };
        let out = crf_refine(img.view(), &cam, &p).unwrap();
        for (a, b) in out.probabilities.iter().zip(out.unary_probabilities.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_pixel_returns_unary_decision() {
        let img = Array3::<u8>::zeros((1, 1, 3));
        for (v, want) in [(0.0f32, 0u8), (0.5, 1)] {
            let out = crf_refine(img.view(), &cam_from(Array2::from_elem((1, 1), v)), &CrfParams::default()).unwrap();
            assert_eq!(out.mask.labels()[[0, 0]], want);
        }
    }

    #[test]
    fn unnormalized_cam_rejected() {
        let img = Array3::<u8>::zeros((2, 2, 3));
        let cam = ActivationMap::new(Array3::zeros((1, 2, 2)), false);
        assert!(crf_refine(img.view(), &cam, &CrfParams::default()).is_err());
    }

    #[test]
    fn scaling_tempers_foreground() {
        // cam 0.1 with scaling 16: fg = 1 - 0.9^16 ≈ 0.8147
        let img = Array3::<u8>::zeros((1, 1, 3));
        let out = crf_refine(img.view(), &cam_from(Array2::from_elem((1, 1), 0.1)), &CrfParams::default()).unwrap();
        assert!((out.unary_probabilities[[1, 0, 0]] - (1.0 - 0.9f32.powi(16))).abs() < 1e-5);
    }
}
