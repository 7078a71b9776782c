//! Rearrangement between images and non-overlapping patch tokens.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// `(B, C, H, W)` to `(B, (H/p)(W/p), C·p·p)`, tokens in row-major order,
/// features ordered `(channel, row, col)` within a patch.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(x.reshape((b, c, gh, p, gw, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, gh * gw, c * p * p))?)
}

/// Inverse of [`patchify`] for a `rows x cols` token grid.
pub fn unpatchify(
    tokens: &Tensor,
    p: usize,
    channels: usize,
    rows: usize,
    cols: usize,
) -> Result<Tensor> {
    let (b, l, d) = tokens.dims3()?;
    if l != rows * cols || d != channels * p * p {
        return Err(Error::Shape(format!(
            "tokens {:?} do not form a {rows}x{cols} grid of {channels}-channel {p}x{p} patches",
            tokens.dims()
        )));
    }
    Ok(tokens
        .reshape((b, rows, cols, channels, p, p))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, channels, rows * p, cols * p))?)
}

/// `(B, C·p·p, h, w)` feature map to `(B, C, h·p, w·p)`.
pub fn depth_to_space(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, d, h, w) = x.dims4()?;
    if d % (p * p) != 0 {
        return Err(Error::Shape(format!(
            "{d} channels not divisible by {p}x{p}"
        )));
    }
    let tokens = x.reshape((b, d, h * w))?.transpose(1, 2)?;
    unpatchify(&tokens, p, d / (p * p), h, w)
}
