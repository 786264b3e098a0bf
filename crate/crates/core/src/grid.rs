//! Bilinear resampling shared by CAM fusion, positional-embedding resize and
//! teacher/student grid matching.
//!
//! All resamplers use the half-pixel convention (sample centres at `i + 0.5`),
//! clamped at the border. With equal source and target sizes every tap has
//! weight exactly one, so resizing to the same shape is a bitwise identity.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// One output sample along an axis: `(1 - t) * src[lo] + t * src[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisTap {
    pub lo: usize,
    pub hi: usize,
    pub t: f32,
}

pub fn axis_taps(src: usize, dst: usize) -> Vec<AxisTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            AxisTap {
                lo,
                hi,
                t: (x - lo as f64) as f32,
            }
        })
        .collect()
}

/// Dense `dst × src` interpolation matrix, row-major.
pub fn interp_matrix(src: usize, dst: usize) -> Vec<f32> {
    let mut m = vec![0f32; dst * src];
    for (i, tap) in axis_taps(src, dst).into_iter().enumerate() {
        m[i * src + tap.lo] += 1.0 - tap.t;
        m[i * src + tap.hi] += tap.t;
    }
    m
}

fn check_target(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("resize target {h}x{w} must be at least 1x1")));
    }
    Ok(())
}

pub fn resize_2d(src: ArrayView2<f32>, (h, w): (usize, usize)) -> Result<Array2<f32>> {
    check_target(h, w)?;
    let (sh, sw) = src.dim();
    if sh == 0 || sw == 0 {
        return Err(Error::shape("cannot resize an empty map"));
    }
    if (sh, sw) == (h, w) {
        return Ok(src.to_owned());
    }
    let ty = axis_taps(sh, h);
    let tx = axis_taps(sw, w);
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let (a, b) = (ty[i], tx[j]);
        let top = (1.0 - b.t) * src[[a.lo, b.lo]] + b.t * src[[a.lo, b.hi]];
        let bot = (1.0 - b.t) * src[[a.hi, b.lo]] + b.t * src[[a.hi, b.hi]];
        (1.0 - a.t) * top + a.t * bot
    }))
}

/// Resize every channel of a `C×H×W` block independently.
pub fn resize_chw(src: ArrayView3<f32>, hw: (usize, usize)) -> Result<Array3<f32>> {
    check_target(hw.0, hw.1)?;
    let mut out = Array3::zeros((src.dim().0, hw.0, hw.1));
    for (c, plane) in src.axis_iter(Axis(0)).enumerate() {
        out.index_axis_mut(Axis(0), c).assign(&resize_2d(plane, hw)?);
    }
    Ok(out)
}

/// Resize an `H×W×C` image.
pub fn resize_hwc(src: ArrayView3<f32>, hw: (usize, usize)) -> Result<Array3<f32>> {
    let chw = src.permuted_axes([2, 0, 1]);
    let out = resize_chw(chw, hw)?;
    Ok(out.permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
}

/// Differentiable bilinear resize of the two trailing axes of a tensor, built
/// from interpolation matrices so gradients flow to the source.
pub fn resize_tensor(t: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    check_target(h, w)?;
    let dims = t.dims();
    if dims.len() < 2 {
        return Err(Error::shape(format!("resize_tensor needs >= 2 dims, got {dims:?}")));
    }
    let (sh, sw) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (sh, sw) == (h, w) {
        return Ok(t.clone());
    }
    let dev = t.device();
    let ry = matrix_tensor(sh, h, t.dtype(), dev)?;
    let rx = matrix_tensor(sw, w, t.dtype(), dev)?.t()?;
    Ok(ry.broadcast_matmul(&t.contiguous()?)?.broadcast_matmul(&rx)?)
}

fn matrix_tensor(src: usize, dst: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(interp_matrix(src, dst), (dst, src), dev)?.to_dtype(dtype)?)
}
