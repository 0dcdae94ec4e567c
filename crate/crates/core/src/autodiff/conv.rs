//! Composite convolutions built from [`Graph::conv2d`] and the Haar transform.

use super::graph::{ConvSpec, Graph, Var};
use crate::error::{shape_err, Error, Result};

/// A `k×1` convolution followed by a `1×k` convolution, both "same"-padded.
///
/// `vertical` is `[C_mid, C_in/groups, k, 1]`, `horizontal` is
/// `[C_out, C_mid/groups, 1, k]`. The pair equals one `k×k` convolution
/// whose kernel is their outer product when `groups` equals the channel count.
pub fn asymmetric_conv(g: &mut Graph, x: Var, vertical: Var, horizontal: Var, groups: usize) -> Result<Var> {
    let (vs, hs) = (g.shape(vertical).to_vec(), g.shape(horizontal).to_vec());
    if vs.len() != 4 || hs.len() != 4 || vs[3] != 1 || hs[2] != 1 || vs[2] != hs[3] {
        return shape_err(format!("asymmetric_conv: kernels {vs:?} / {hs:?} are not a k×1 / 1×k pair"));
    }
    let k = vs[2];
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("asymmetric_conv: kernel length {k} must be odd")));
    }
    let y = g.conv2d(x, vertical, None, ConvSpec::same(k, 1, 1, 1, groups))?;
    g.conv2d(y, horizontal, None, ConvSpec::same(1, k, 1, 1, groups))
}

/// Multi-level Haar wavelet convolution of `x[C, H, W]`.
///
/// The input is decomposed `level` times (recursing on the LL band). At every
/// level the three detail bands go through a depthwise 3×3 convolution
/// (`detail[j]`, shaped `[3C, 1, 3, 3]`); the deepest LL band goes through
/// `approx` (`[C, 1, 3, 3]`). Reconstruction runs coarse to fine, with each
/// level's LL slot taken from the level below. With `level == 0` this is a
/// plain depthwise 3×3 convolution by `approx`.
pub fn wavelet_conv(g: &mut Graph, x: Var, level: usize, detail: &[Var], approx: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return shape_err(format!("wavelet_conv: expected [C,H,W], got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let unit = 1usize << level;
    if h % unit != 0 || w % unit != 0 {
        return shape_err(format!("wavelet_conv: {h}x{w} not divisible by 2^{level}"));
    }
    if detail.len() < level {
        return shape_err(format!("wavelet_conv: {} detail kernels for level {level}", detail.len()));
    }
    let dw = |ch: usize| ConvSpec::same(3, 3, 1, 1, ch);
    if level == 0 {
        return g.conv2d(x, approx, None, dw(c));
    }

    let mut approx_band = x;
    let mut details = Vec::with_capacity(level);
    for &kernel in detail.iter().take(level) {
        let bands = g.haar_dwt(approx_band)?;
        let ll = g.slice(bands, 0, 0, c)?;
        let hi = g.slice(bands, 0, c, 3 * c)?;
        details.push(g.conv2d(hi, kernel, None, dw(3 * c))?);
        approx_band = ll;
    }
    let mut recon = g.conv2d(approx_band, approx, None, dw(c))?;
    for hi in details.into_iter().rev() {
        let bands = g.concat(&[recon, hi], 0)?;
        recon = g.haar_idwt(bands)?;
    }
    Ok(recon)
}
