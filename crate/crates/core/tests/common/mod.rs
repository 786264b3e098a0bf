//! Straight-line reference implementations shared by the integration tests.
//! They favour obviousness over speed and share no code with the library.

#![allow(dead_code)]

pub mod gradcheck;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |_| u8::from(r.random_bool(p)))
}

pub fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<u8> {
    Array3::from_shape_fn((h, w, 3), |_| r.random::<u8>())
}

/// (tp, fp, fn, tn) by looping over pixels.
pub fn brute_confusion(pred: &Array2<u8>, gt: &Array2<u8>) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for y in 0..gt.nrows() {
        for x in 0..gt.ncols() {
            let p = pred[[y, x]] == 1;
            let g = gt[[y, x]] == 1;
            if p && g {
                tp += 1;
            } else if p {
                fp += 1;
            } else if g {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
    }
    (tp, fp, fn_, tn)
}

pub fn brute_iou(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for (x, y) in a.iter().zip(b.iter()) {
        if *x == 1 && *y == 1 {
            inter += 1;
        }
        if *x == 1 || *y == 1 {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Proposal fusion by per-pixel set algebra. `strategy` is "and", "or" or "copy".
pub fn brute_fusion(seed: &Array2<u8>, proposals: &[Array2<u8>], thresh: f64, strategy: &str) -> Array2<u8> {
    let selected: Vec<&Array2<u8>> = proposals
        .iter()
        .filter(|p| brute_iou(p, seed) >= thresh)
        .collect();
    Array2::from_shape_fn(seed.dim(), |(y, x)| {
        let in_s = selected.iter().any(|p| p[[y, x]] == 1);
        let in_seed = seed[[y, x]] == 1;
        u8::from(match strategy {
            "and" => in_s && in_seed,
            "or" => in_s || in_seed,
            "copy" => in_s,
            _ => unreachable!(),
        })
    })
}

/// Dense random-walk oracle: explicit `N×N` transition matrix raised to
/// `steps` by repeated multiplication, applied to the flattened map.
pub fn dense_random_walk(
    image: &Array3<u8>,
    cam: &Array2<f32>,
    sigma_c: f64,
    sigma_p: f64,
    radius: usize,
    beta: u32,
    steps: usize,
) -> Array2<f64> {
    let (h, w) = cam.dim();
    let n = h * w;
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (yi, xi) = (i / w, i % w);
        for j in 0..n {
            let (yj, xj) = (j / w, j % w);
            let dp = ((yi as f64 - yj as f64).powi(2) + (xi as f64 - xj as f64).powi(2)) as f64;
            if dp > (radius * radius) as f64 {
                continue;
            }
            let mut dc = 0.0;
            for c in 0..3 {
                dc += (image[[yi, xi, c]] as f64 - image[[yj, xj, c]] as f64).powi(2);
            }
            let aff = (-dc / (2.0 * sigma_c * sigma_c) - dp / (2.0 * sigma_p * sigma_p)).exp();
            a[[i, j]] = aff.powi(beta as i32);
        }
    }
    for i in 0..n {
        let s: f64 = a.row(i).sum();
        a.row_mut(i).mapv_inplace(|v| v / s);
    }
    let mut t = Array2::<f64>::eye(n);
    for _ in 0..steps {
        t = t.dot(&a);
    }
    let v: ndarray::Array1<f64> = cam.iter().map(|&x| x as f64).collect();
    t.dot(&v).into_shape_with_order((h, w)).unwrap()
}

/// CAM by explicit per-pixel dot products: `out[k,y,x] = Σ_c w[k,c]·f[c,y,x]`.
pub fn dot_cam(feature: &Array3<f32>, head: &Array2<f32>) -> Array3<f64> {
    let (c, h, w) = feature.dim();
    let k = head.nrows();
    let mut out = Array3::<f64>::zeros((k, h, w));
    for kk in 0..k {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for cc in 0..c {
                    s += head[[kk, cc]] as f64 * feature[[cc, y, x]] as f64;
                }
                out[[kk, y, x]] = s;
            }
        }
    }
    out
}

/// Exhaustive sweep: for each threshold, global IoU over images of
/// `cam >= t`; the first maximum wins.
pub fn brute_sweep(cams: &[Array2<f32>], gts: &[Array2<u8>], grid: &[f32]) -> (usize, Vec<f64>) {
    let mut curve = Vec::new();
    for &t in grid {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (c, g) in cams.iter().zip(gts) {
            let pred = c.mapv(|v| u8::from(v >= t));
            let (a, b, d, _) = brute_confusion(&pred, g);
            tp += a;
            fp += b;
            fn_ += d;
        }
        curve.push(tp as f64 / (tp + fp + fn_) as f64);
    }
    let mut best = 0;
    for i in 1..curve.len() {
        if curve[i] > curve[best] {
            best = i;
        }
    }
    (best, curve)
}
