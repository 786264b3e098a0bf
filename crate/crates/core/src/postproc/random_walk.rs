use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::cam::ActivationMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomWalkParams {
    /// Colour bandwidth on the 0-255 scale.
    pub sigma_color: f64,
    /// Position bandwidth in pixels.
    pub sigma_pos: f64,
    /// Pixels farther apart than this (Euclidean) have zero affinity.
    pub radius: usize,
    /// Hadamard power applied to the affinity before row normalization.
    pub beta: u32,
    pub steps: usize,
}

impl Default for RandomWalkParams {
    fn default() -> Self {
        Self {
            sigma_color: 10.0,
            sigma_pos: 3.0,
            radius: 5,
            beta: 8,
            steps: 16,
        }
    }
}

impl RandomWalkParams {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.radius == 0 {
            out.push("random_walk: radius must be >= 1".to_string());
        }
        if self.beta == 0 {
            out.push("random_walk: beta must be >= 1".to_string());
        }
        if !(self.sigma_color > 0.0) || !(self.sigma_pos > 0.0) {
            out.push("random_walk: sigma_color and sigma_pos must be > 0".to_string());
        }
        out
    }
}

/// Propagate each CAM class by `steps` applications of the row-normalized
/// pixel transition matrix `T = rownorm(A^β)`, where
/// `A(i,j) = exp(-|rgb_i - rgb_j|²/2σc² - |p_i - p_j|²/2σp²)` for `|p_i - p_j| ≤ radius`.
///
/// Rows of `T` are convex weights, so every output lies between the input
/// extremes; the result is marked unnormalized.
pub fn affinity_random_walk(image: ArrayView3<u8>, cam: &ActivationMap, p: &RandomWalkParams) -> Result<ActivationMap> {
    let problems = p.problems();
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
    if p.steps == 0 {
        let mut out = cam.clone();
        out.normalized = false;
        return Ok(out);
    }
    let r = p.radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let sc2 = 2.0 * p.sigma_color * p.sigma_color;
    let sp2 = 2.0 * p.sigma_pos * p.sigma_pos;
    let beta = p.beta as f64;
    let rgb = image.mapv(|v| v as f64);
    // Sparse rows: (neighbour flat index, weight), weights summing to 1.
    let n = h * w;
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let mut row = Vec::with_capacity(offsets.len());
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                let mut dc = 0.0;
                for c in 0..3 {
                    dc += (rgb[[y, x, c]] - rgb[[ny, nx, c]]).powi(2);
                }
                let dp = (dy * dy + dx * dx) as f64;
                // (exp(-e))^β = exp(-β·e)
                row.push((ny * w + nx, (-beta * (dc / sc2 + dp / sp2)).exp()));
            }
            let s: f64 = row.iter().map(|e| e.1).sum();
            // the self term is exp(0) = 1, so s >= 1
            for e in &mut row {
                e.1 /= s;
            }
            rows.push(row);
        }
    }
    let k = cam.data.dim().0;
    let mut out = Array3::<f32>::zeros((k, h, w));
    for c in 0..k {
        let mut v: Vec<f64> = cam.data.index_axis(ndarray::Axis(0), c).iter().map(|&x| x as f64).collect();
        let mut next = vec![0.0; n];
        for _ in 0..p.steps {
            for (i, row) in rows.iter().enumerate() {
                next[i] = row.iter().map(|&(j, t)| t * v[j]).sum();
            }
            std::mem::swap(&mut v, &mut next);
        }
        for (o, x) in out.index_axis_mut(ndarray::Axis(0), c).iter_mut().zip(v) {
            *o = x as f32;
        }
    }
    let mut am = ActivationMap::new(out, false);
    am.class_ids = cam.class_ids.clone();
    Ok(am)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_is_identity() {
        let img = Array3::<u8>::from_elem((4, 4, 3), 7);
        let cam = ActivationMap::new(Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f32 / 15.0), true);
        let p = RandomWalkParams {
            steps: 0,
            ..Default::default()
        };
        assert_eq!(affinity_random_walk(img.view(), &cam, &p).unwrap().data, cam.data);
    }

    #[test]
    fn constant_cam_is_fixed() {
        let img = Array3::<u8>::from_shape_fn((5, 5, 3), |(y, x, c)| (y * 40 + x * 3 + c) as u8);
        let cam = ActivationMap::new(Array3::from_elem((1, 5, 5), 0.4), true);
        let out = affinity_random_walk(img.view(), &cam, &RandomWalkParams::default()).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn invalid_params_listed() {
        let p = RandomWalkParams {
            radius: 0,
            beta: 0,
            ..Default::default()
        };
        assert_eq!(p.problems().len(), 2);
    }
}
