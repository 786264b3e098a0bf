use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{Error, Result};

/// Pixel-correlation refinement: each output pixel is the affinity-weighted
/// average of the input CAM, with affinity = ReLU(cosine) between per-pixel
/// feature vectors, row-normalized.
///
/// A pixel whose feature vector is zero has no affinity to anything; it keeps
/// its own value.
pub fn pcm_refine(cam: ArrayView3<f32>, feature: ArrayView3<f32>) -> Result<Array3<f32>> {
    let (k, h, w) = cam.dim();
    let (c, fh, fw) = feature.dim();
    if (h, w) != (fh, fw) {
        return Err(Error::shape(format!(
            "cam grid {h}x{w} does not match feature grid {fh}x{fw}"
        )));
    }
    let n = h * w;
    // unit feature vectors, one row per pixel
    let mut unit = Array2::<f64>::zeros((n, c));
    let mut nonzero = vec![false; n];
    for i in 0..n {
        let (y, x) = (i / w, i % w);
        let norm = (0..c)
            .map(|ch| (feature[[ch, y, x]] as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            nonzero[i] = true;
            for ch in 0..c {
                unit[[i, ch]] = feature[[ch, y, x]] as f64 / norm;
            }
        }
    }
    let affinity = unit.dot(&unit.t()).mapv(|v| v.max(0.0));
    let mut out = Array3::<f32>::zeros((k, h, w));
    for i in 0..n {
        let row = affinity.row(i);
        let total: f64 = row.sum();
        let (y, x) = (i / w, i % w);
        for cls in 0..k {
            out[[cls, y, x]] = if nonzero[i] && total > 0.0 {
                let acc: f64 = (0..n)
                    .map(|j| row[j] * cam[[cls, j / w, j % w]] as f64)
                    .sum();
                (acc / total) as f32
            } else {
                cam[[cls, y, x]]
            };
        }
    }
    Ok(out)
}
