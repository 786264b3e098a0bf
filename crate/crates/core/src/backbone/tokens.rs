use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::grid;

/// Reshape row-major patch tokens (`N×C`, class token already removed) into a
/// channel-first `C×h×w` grid.
pub fn tokens_to_grid(tokens: ArrayView2<f32>, (h, w): (usize, usize)) -> Result<Array3<f32>> {
    let (n, c) = tokens.dim();
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens cannot fill a {h}x{w} grid")));
    }
    Ok(Array3::from_shape_fn((c, h, w), |(k, y, x)| tokens[[y * w + x, k]]))
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens(grid: ArrayView3<f32>) -> Array2<f32> {
    let (c, h, w) = grid.dim();
    Array2::from_shape_fn((h * w, c), |(i, k)| grid[[k, i / w, i % w]])
}

/// Bilinearly resize an `h₀×w₀×C` positional-embedding grid. Callers strip the
/// class-token embedding before and re-attach it after.
pub fn resize_pos_embedding(pos: ArrayView3<f32>, target: (usize, usize)) -> Result<Array3<f32>> {
    grid::resize_hwc(pos, target)
}
