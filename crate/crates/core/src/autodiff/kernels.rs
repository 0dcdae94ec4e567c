//! Forward and adjoint numeric kernels used by the graph ops.
//!
//! Everything here works on flat row-major slices of a single image
//! (`[C, H, W]`). Batching happens one level up.

/// `c = op(a) * op(b) + beta * c` where `op` transposes when flagged.
///
/// `a` is `[m, k]` (or `[k, m]` when `ta`), `b` is `[k, n]` (or `[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the extents described by the strides,
    // checked by the debug assertions above and by every caller's shape logic.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_h - self.dilation * (self.kh - 1) - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_w - self.dilation * (self.kw - 1) - 1) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.cin_g() == 1 && self.cout_g() == 1
    }

    /// Output columns `ox` whose input column for tap `j` lies inside the image.
    fn valid_cols(&self, j: usize) -> std::ops::Range<usize> {
        let off = (j * self.dilation) as isize - self.pad_w as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((self.w as isize - off) + s - 1) / s;
        let hi = hi.clamp(0, self.out_w() as isize);
        (lo.min(hi) as usize)..(hi as usize)
    }

    /// Visits every in-bounds `(input index, output index)` pair of channel-local
    /// tap `(i, j)`.
    fn for_tap(&self, i: usize, j: usize, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let cols = self.valid_cols(j);
        for oy in 0..ho {
            let iy = (oy * self.stride + i * self.dilation) as isize - self.pad_h as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            let row = iy as usize * self.w;
            for ox in cols.clone() {
                let ix = ox * self.stride + j * self.dilation - self.pad_w;
                f(row + ix, oy * wo + ox);
            }
        }
    }

    fn im2col(&self, x: &[f64], group: usize, cols: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let hw = self.h * self.w;
        let c0 = group * self.cin_g();
        let mut row = 0;
        for c in 0..self.cin_g() {
            let plane = &x[(c0 + c) * hw..(c0 + c + 1) * hw];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + i * self.dilation) as isize - self.pad_h as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j * self.dilation) as isize - self.pad_w as isize;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], group: usize, dx: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let hw = self.h * self.w;
        let c0 = group * self.cin_g();
        let mut row = 0;
        for c in 0..self.cin_g() {
            let plane = &mut dx[(c0 + c) * hw..(c0 + c + 1) * hw];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + i * self.dilation) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + j * self.dilation) as isize - self.pad_w as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation of one image. `w` is `[c_out, c_in/groups, kh, kw]`.
pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let hw_out = g.out_h() * g.out_w();
    if g.is_depthwise() {
        let (hw, taps) = (g.h * g.w, g.kh * g.kw);
        out.fill(0.0);
        for c in 0..g.c_in {
            let xc = &x[c * hw..(c + 1) * hw];
            let oc = &mut out[c * hw_out..(c + 1) * hw_out];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let k = w[c * taps + i * g.kw + j];
                    g.for_tap(i, j, |xi, oi| oc[oi] += k * xc[xi]);
                }
            }
        }
    } else {
        conv2d_forward_gemm(g, x, w, out);
    }
    if let Some(b) = bias {
        for (co, plane) in out.chunks_mut(hw_out).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[co]);
        }
    }
}

fn conv2d_forward_gemm(g: &ConvGeometry, x: &[f64], w: &[f64], out: &mut [f64]) {
    let hw_out = g.out_h() * g.out_w();
    let (cig, cog, patch) = (g.cin_g(), g.cout_g(), g.patch());
    let mut cols = Vec::new();
    for grp in 0..g.groups {
        let wg = &w[grp * cog * patch..(grp + 1) * cog * patch];
        let og = &mut out[grp * cog * hw_out..(grp + 1) * cog * hw_out];
        if g.is_pointwise() {
            let xg = &x[grp * cig * hw_out..(grp + 1) * cig * hw_out];
            gemm(cog, patch, hw_out, wg, false, xg, false, og, 0.0);
        } else {
            cols.resize(patch * hw_out, 0.0);
            g.im2col(x, grp, &mut cols);
            gemm(cog, patch, hw_out, wg, false, &cols, false, og, 0.0);
        }
    }
}

/// Accumulates input, weight and bias adjoints of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let hw_out = g.out_h() * g.out_w();
    let (cig, cog, patch) = (g.cin_g(), g.cout_g(), g.patch());
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let mut dx = dx;
    let mut dw = dw;
    let groups = if g.is_depthwise() { 0 } else { g.groups };
    if g.is_depthwise() {
        let (hw, taps) = (g.h * g.w, g.kh * g.kw);
        for c in 0..g.c_in {
            let dyc = &dy[c * hw_out..(c + 1) * hw_out];
            let xc = &x[c * hw..(c + 1) * hw];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let t = c * taps + i * g.kw + j;
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = 0.0;
                        g.for_tap(i, j, |xi, oi| acc += xc[xi] * dyc[oi]);
                        dw[t] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let k = w[t];
                        let dxc = &mut dx[c * hw..(c + 1) * hw];
                        g.for_tap(i, j, |xi, oi| dxc[xi] += k * dyc[oi]);
                    }
                }
            }
        }
    }
    for grp in 0..groups {
        let dyg = &dy[grp * cog * hw_out..(grp + 1) * cog * hw_out];
        let wg = &w[grp * cog * patch..(grp + 1) * cog * patch];
        if let Some(dw) = dw.as_deref_mut() {
            let dwg = &mut dw[grp * cog * patch..(grp + 1) * cog * patch];
            if g.is_pointwise() {
                let xg = &x[grp * cig * hw_out..(grp + 1) * cig * hw_out];
                gemm(cog, hw_out, patch, dyg, false, xg, true, dwg, 1.0);
            } else {
                cols.resize(patch * hw_out, 0.0);
                g.im2col(x, grp, &mut cols);
                gemm(cog, hw_out, patch, dyg, false, &cols, true, dwg, 1.0);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            if g.is_pointwise() {
                let dxg = &mut dx[grp * cig * hw_out..(grp + 1) * cig * hw_out];
                gemm(patch, cog, hw_out, wg, true, dyg, false, dxg, 1.0);
            } else {
                dcols.resize(patch * hw_out, 0.0);
                gemm(patch, cog, hw_out, wg, true, dyg, false, &mut dcols, 0.0);
                g.col2im(&dcols, grp, dx);
            }
        }
    }
    if let Some(db) = db {
        for (co, plane) in dy.chunks(hw_out).enumerate() {
            db[co] += plane.iter().sum::<f64>();
        }
    }
}

/// Bilinear tap for one normalized coordinate along an axis of length `n`.
///
/// Returns `(i0, i1, frac, d_frac/d_coord)`; the derivative is zero when the
/// coordinate was clamped to the border.
fn axis_tap(coord: f64, n: usize) -> (usize, usize, f64, f64) {
    if n == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let p = coord * n as f64 - 0.5;
    let max = (n - 1) as f64;
    let (p, dp) = if p <= 0.0 {
        (0.0, 0.0)
    } else if p >= max {
        (max, 0.0)
    } else {
        (p, n as f64)
    };
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, i0 + 1, p - i0 as f64, dp)
}

/// Samples `grid` (`[C, H, W]`) at normalized `(x, y)` points in `[0, 1]²`.
/// Pixel `(i, j)` has its center at `((j + 0.5) / W, (i + 0.5) / H)`.
pub(crate) fn bilinear_forward(grid: &[f64], c: usize, h: usize, w: usize, points: &[f64], out: &mut [f64]) {
    let hw = h * w;
    for (n, pt) in points.chunks(2).enumerate() {
        let (x0, x1, fx, _) = axis_tap(pt[0], w);
        let (y0, y1, fy, _) = axis_tap(pt[1], h);
        let w00 = (1.0 - fy) * (1.0 - fx);
        let w01 = (1.0 - fy) * fx;
        let w10 = fy * (1.0 - fx);
        let w11 = fy * fx;
        let row = &mut out[n * c..(n + 1) * c];
        for (ch, o) in row.iter_mut().enumerate() {
            let p = &grid[ch * hw..(ch + 1) * hw];
            *o = w00 * p[y0 * w + x0] + w01 * p[y0 * w + x1] + w10 * p[y1 * w + x0] + w11 * p[y1 * w + x1];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_backward(
    grid: &[f64],
    c: usize,
    h: usize,
    w: usize,
    points: &[f64],
    dy: &[f64],
    mut dgrid: Option<&mut [f64]>,
    mut dpoints: Option<&mut [f64]>,
) {
    let hw = h * w;
    for (n, pt) in points.chunks(2).enumerate() {
        let (x0, x1, fx, dfx) = axis_tap(pt[0], w);
        let (y0, y1, fy, dfy) = axis_tap(pt[1], h);
        let g = &dy[n * c..(n + 1) * c];
        if let Some(dg) = dgrid.as_deref_mut() {
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for (ch, &gv) in g.iter().enumerate() {
                let p = &mut dg[ch * hw..(ch + 1) * hw];
                p[y0 * w + x0] += w00 * gv;
                p[y0 * w + x1] += w01 * gv;
                p[y1 * w + x0] += w10 * gv;
                p[y1 * w + x1] += w11 * gv;
            }
        }
        if let Some(dp) = dpoints.as_deref_mut() {
            let (mut gx, mut gy) = (0.0, 0.0);
            for (ch, &gv) in g.iter().enumerate() {
                let p = &grid[ch * hw..(ch + 1) * hw];
                let (v00, v01, v10, v11) = (p[y0 * w + x0], p[y0 * w + x1], p[y1 * w + x0], p[y1 * w + x1]);
                gx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                gy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            dp[2 * n] += gx * dfx;
            dp[2 * n + 1] += gy * dfy;
        }
    }
}

/// Half-pixel-centered linear resampling taps from `n_in` to `n_out` samples.
pub(crate) fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let f = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, f)
        })
        .collect()
}

pub(crate) fn resize_forward(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1];
                let bot = (1.0 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1];
                o[oy * ow + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
}

pub(crate) fn resize_backward(dy: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    for ch in 0..c {
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = g[oy * ow + ox];
                d[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                d[y0 * w + x1] += (1.0 - fy) * fx * gv;
                d[y1 * w + x0] += fy * (1.0 - fx) * gv;
                d[y1 * w + x1] += fy * fx * gv;
            }
        }
    }
}

/// One level of the orthonormal 2-D Haar analysis.
///
/// `[C, H, W]` maps to `[4C, H/2, W/2]` with channel blocks `LL, LH, HL, HH`.
pub(crate) fn haar_dwt(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (h2, w2) = (h / 2, w / 2);
    let band = c * h2 * w2;
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let a = p[2 * i * w + 2 * j];
                let b = p[2 * i * w + 2 * j + 1];
                let cc = p[(2 * i + 1) * w + 2 * j];
                let d = p[(2 * i + 1) * w + 2 * j + 1];
                let o = ch * h2 * w2 + i * w2 + j;
                out[o] = 0.5 * (a + b + cc + d);
                out[band + o] = 0.5 * (a + b - cc - d);
                out[2 * band + o] = 0.5 * (a - b + cc - d);
                out[3 * band + o] = 0.5 * (a - b - cc + d);
            }
        }
    }
}

/// Inverse of [`haar_dwt`]; `[4C, h, w]` maps to `[C, 2h, 2w]`.
pub(crate) fn haar_idwt(y: &[f64], c: usize, h2: usize, w2: usize, out: &mut [f64]) {
    let (h, w) = (2 * h2, 2 * w2);
    let band = c * h2 * w2;
    for ch in 0..c {
        let p = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let o = ch * h2 * w2 + i * w2 + j;
                let (ll, lh, hl, hh) = (y[o], y[band + o], y[2 * band + o], y[3 * band + o]);
                p[2 * i * w + 2 * j] = 0.5 * (ll + lh + hl + hh);
                p[2 * i * w + 2 * j + 1] = 0.5 * (ll + lh - hl - hh);
                p[(2 * i + 1) * w + 2 * j] = 0.5 * (ll - lh + hl - hh);
                p[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (ll - lh - hl + hh);
            }
        }
    }
}
