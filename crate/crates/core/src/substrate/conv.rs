//! 2-D convolution kernels over NCHW tensors.
//!
//! Kernels use the `(out_channels, in_channels / groups, kh, kw)` layout for
//! `conv2d` and `(in_channels, out_channels, kh, kw)` for `conv2d_transpose`.
//! Dense convolutions are lowered to matrix products (im2col); grouped and
//! depthwise ones run direct loops over contiguous output rows.

use super::tensor::{Shape4, Tensor4};
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups }
    }
}

/// Output shape of `conv2d`, validating the kernel against the input.
pub fn conv2d_shape(x: Shape4, k: Shape4, geo: ConvGeometry) -> Result<Shape4> {
    let [n, ci, h, w] = x;
    let [co, cig, kh, kw] = k;
    if geo.stride == 0 || geo.groups == 0 {
        return Err(config_err!("conv2d: stride and groups must be positive ({geo:?})"));
    }
    if ci % geo.groups != 0 || co % geo.groups != 0 || cig * geo.groups != ci {
        return Err(config_err!(
            "conv2d: input {x:?} and kernel {k:?} are inconsistent with groups={}",
            geo.groups
        ));
    }
    if h + 2 * geo.padding < kh || w + 2 * geo.padding < kw || kh == 0 || kw == 0 {
        return Err(config_err!("conv2d: kernel {k:?} larger than padded input {x:?}"));
    }
    let ho = (h + 2 * geo.padding - kh) / geo.stride + 1;
    let wo = (w + 2 * geo.padding - kw) / geo.stride + 1;
    Ok([n, co, ho, wo])
}

/// Range of output columns whose input column `ox*stride + kx - pad` lies in `[0, w)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ix = ox*stride + k - pad >= 0  <=>  ox >= ceil((pad - k) / stride)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // ix < in_len  <=>  ox*stride < in_len + pad - k
    let lim = in_len + pad;
    let hi = if lim > k { ((lim - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with split accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, ar) = a.split_at(a.len() / 4 * 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn is_pointwise(k: Shape4, geo: ConvGeometry) -> bool {
    k[2] == 1 && k[3] == 1 && geo.stride == 1 && geo.padding == 0 && geo.groups == 1
}

/// Geometry of one dense conv lowered to a matrix product.
struct Lowered {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Lowered {
    fn new(x: Shape4, k: Shape4, geo: ConvGeometry, ho: usize, wo: usize) -> Self {
        Self { ci: x[1], h: x[2], w: x[3], kh: k[2], kw: k[3], s: geo.stride, p: geo.padding, ho, wo }
    }

    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    /// Visits `(column row, output pixel, input pixel)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w, s, p) = (self.h, self.w, self.s, self.p);
        for ic in 0..self.ci {
            for ky in 0..self.kh {
                let (oy0, oy1) = valid_range(self.ho, h, ky, s, p);
                for kx in 0..self.kw {
                    let (ox0, ox1) = valid_range(self.wo, w, kx, s, p);
                    let r = (ic * self.kh + ky) * self.kw + kx;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        for ox in ox0..ox1 {
                            f(r, oy * self.wo + ox, (ic * h + iy) * w + ox * s + kx - p);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let npix = self.ho * self.wo;
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|r, o, i| cols[r * npix + o] = x[i]);
    }

    fn col2im_add(&self, cols: &[f64], gx: &mut [f64]) {
        let npix = self.ho * self.wo;
        self.for_each_tap(|r, o, i| gx[i] += cols[r * npix + o]);
    }
}

/// `out (co × n) += k (co × r) · cols (r × n)`.
fn gemm_forward(kd: &[f64], co: usize, r: usize, cols: &[f64], n: usize, out: &mut [f64]) {
    for oc in 0..co {
        let orow = &mut out[oc * n..(oc + 1) * n];
        for ri in 0..r {
            let wv = kd[oc * r + ri];
            if wv != 0.0 {
                axpy(orow, wv, &cols[ri * n..(ri + 1) * n]);
            }
        }
    }
}

/// Accumulates `gk += go · colsᵀ` and `gcols += kᵀ · go`.
#[allow(clippy::too_many_arguments)]
fn gemm_backward(
    kd: &[f64],
    co: usize,
    r: usize,
    cols: &[f64],
    n: usize,
    go: &[f64],
    gk: Option<&mut Vec<f64>>,
    gcols: Option<&mut [f64]>,
) {
    if let Some(gk) = gk {
        for oc in 0..co {
            let g = &go[oc * n..(oc + 1) * n];
            for ri in 0..r {
                gk[oc * r + ri] += dot(g, &cols[ri * n..(ri + 1) * n]);
            }
        }
    }
    if let Some(gc) = gcols {
        for oc in 0..co {
            let g = &go[oc * n..(oc + 1) * n];
            for ri in 0..r {
                axpy(&mut gc[ri * n..(ri + 1) * n], kd[oc * r + ri], g);
            }
        }
    }
}

/// Dense (`groups == 1`) convolution through im2col; pointwise convs use
/// the input planes directly as the column matrix.
fn dense_forward(x: &Tensor4, k: &Tensor4, geo: ConvGeometry, out: &mut Tensor4) {
    let [n, ci, h, w] = x.shape();
    let [_, co, ho, wo] = out.shape();
    let low = Lowered::new(x.shape(), k.shape(), geo, ho, wo);
    let (r, npix) = (low.rows(), ho * wo);
    let pointwise = is_pointwise(k.shape(), geo);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; r * npix] };
    let (xd, kd) = (x.data(), k.data());
    let od = out.data_mut();
    for b in 0..n {
        let xb = &xd[b * ci * h * w..(b + 1) * ci * h * w];
        let ob = &mut od[b * co * npix..(b + 1) * co * npix];
        if pointwise {
            gemm_forward(kd, co, r, xb, npix, ob);
        } else {
            low.im2col(xb, &mut cols);
            gemm_forward(kd, co, r, &cols, npix, ob);
        }
    }
}

fn dense_backward(
    x: &Tensor4,
    k: &Tensor4,
    geo: ConvGeometry,
    grad_out: &[f64],
    gx: &mut Option<Vec<f64>>,
    gk: &mut Option<Vec<f64>>,
) {
    let [n, ci, h, w] = x.shape();
    let co = k.shape()[0];
    let ho = (h + 2 * geo.padding - k.shape()[2]) / geo.stride + 1;
    let wo = (w + 2 * geo.padding - k.shape()[3]) / geo.stride + 1;
    let low = Lowered::new(x.shape(), k.shape(), geo, ho, wo);
    let (r, npix, plane) = (low.rows(), ho * wo, ci * h * w);
    let pointwise = is_pointwise(k.shape(), geo);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; r * npix] };
    let mut gcols = if pointwise || gx.is_none() { Vec::new() } else { vec![0.0; r * npix] };
    let (xd, kd) = (x.data(), k.data());
    for b in 0..n {
        let xb = &xd[b * plane..(b + 1) * plane];
        let go = &grad_out[b * co * npix..(b + 1) * co * npix];
        if pointwise {
            let gxb = gx.as_mut().map(|g| &mut g[b * plane..(b + 1) * plane]);
            gemm_backward(kd, co, r, xb, npix, go, gk.as_mut(), gxb);
        } else {
            low.im2col(xb, &mut cols);
            if let Some(gx) = gx.as_mut() {
                gcols.iter_mut().for_each(|v| *v = 0.0);
                gemm_backward(kd, co, r, &cols, npix, go, gk.as_mut(), Some(&mut gcols));
                low.col2im_add(&gcols, &mut gx[b * plane..(b + 1) * plane]);
            } else {
                gemm_backward(kd, co, r, &cols, npix, go, gk.as_mut(), None);
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor4, k: &Tensor4, geo: ConvGeometry) -> Result<Tensor4> {
    let out_shape = conv2d_shape(x.shape(), k.shape(), geo)?;
    let [n, ci, h, w] = x.shape();
    let [co, cig, kh, kw] = k.shape();
    let [_, _, ho, wo] = out_shape;
    let cog = co / geo.groups;
    let (s, p) = (geo.stride, geo.padding);
    let mut out = Tensor4::zeros(out_shape);
    if geo.groups == 1 {
        dense_forward(x, k, geo, &mut out);
        return Ok(out);
    }
    let xd = x.data();
    let kd = k.data();
    let cols: Vec<(usize, usize)> = (0..kw).map(|kx| valid_range(wo, w, kx, s, p)).collect();
    let rows: Vec<(usize, usize)> = (0..kh).map(|ky| valid_range(ho, h, ky, s, p)).collect();
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..co {
            let g = oc / cog;
            let obase = (b * co + oc) * ho * wo;
            for icg in 0..cig {
                let ic = g * cig + icg;
                let xbase = (b * ci + ic) * h * w;
                for ky in 0..kh {
                    let (oy0, oy1) = rows[ky];
                    for kx in 0..kw {
                        let wv = kd[((oc * cig + icg) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = cols[kx];
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let orow = &mut od[obase + oy * wo + ox0..obase + oy * wo + ox1];
                            let ix0 = ox0 * s + kx - p;
                            if s == 1 {
                                let xrow = &xd[xbase + iy * w + ix0..xbase + iy * w + ix0 + orow.len()];
                                for (o, xv) in orow.iter_mut().zip(xrow) {
                                    *o += wv * xv;
                                }
                            } else {
                                let xrow = &xd[xbase + iy * w..xbase + (iy + 1) * w];
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * xrow[ix0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input and kernel. Either side may be skipped.
pub fn conv2d_backward(
    x: &Tensor4,
    k: &Tensor4,
    geo: ConvGeometry,
    grad_out: &[f64],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let [n, ci, h, w] = x.shape();
    let [co, cig, kh, kw] = k.shape();
    let ho = (h + 2 * geo.padding - kh) / geo.stride + 1;
    let wo = (w + 2 * geo.padding - kw) / geo.stride + 1;
    let cog = co / geo.groups;
    let (s, p) = (geo.stride, geo.padding);
    let xd = x.data();
    let kd = k.data();
    let mut gx = want_x.then(|| vec![0.0; x.numel()]);
    let mut gk = want_k.then(|| vec![0.0; k.numel()]);
    if geo.groups == 1 {
        dense_backward(x, k, geo, grad_out, &mut gx, &mut gk);
        return (gx, gk);
    }
    let cols: Vec<(usize, usize)> = (0..kw).map(|kx| valid_range(wo, w, kx, s, p)).collect();
    let rows: Vec<(usize, usize)> = (0..kh).map(|ky| valid_range(ho, h, ky, s, p)).collect();
    for b in 0..n {
        for oc in 0..co {
            let g = oc / cog;
            let obase = (b * co + oc) * ho * wo;
            for icg in 0..cig {
                let ic = g * cig + icg;
                let xbase = (b * ci + ic) * h * w;
                for ky in 0..kh {
                    let (oy0, oy1) = rows[ky];
                    for kx in 0..kw {
                        let kidx = ((oc * cig + icg) * kh + ky) * kw + kx;
                        let wv = kd[kidx];
                        let (ox0, ox1) = cols[kx];
                        let len = ox1 - ox0;
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let gout = &grad_out[obase + oy * wo + ox0..obase + oy * wo + ox1];
                            let ix0 = ox0 * s + kx - p;
                            let xrow_start = xbase + iy * w;
                            if s == 1 {
                                if gk.is_some() {
                                    let xrow = &xd[xrow_start + ix0..xrow_start + ix0 + len];
                                    acc += dot(gout, xrow);
                                }
                                if let Some(gx) = gx.as_mut() {
                                    axpy(&mut gx[xrow_start + ix0..xrow_start + ix0 + len], wv, gout);
                                }
                            } else {
                                if gk.is_some() {
                                    for (j, go) in gout.iter().enumerate() {
                                        acc += go * xd[xrow_start + ix0 + j * s];
                                    }
                                }
                                if let Some(gx) = gx.as_mut() {
                                    for (j, go) in gout.iter().enumerate() {
                                        gx[xrow_start + ix0 + j * s] += wv * go;
                                    }
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

pub fn conv2d_transpose_shape(x: Shape4, k: Shape4, stride: usize) -> Result<Shape4> {
    let [n, ci, h, w] = x;
    let [kci, co, kh, kw] = k;
    if stride == 0 {
        return Err(config_err!("conv2d_transpose: stride must be >= 1"));
    }
    if n == 0 || ci == 0 || h == 0 || w == 0 {
        return Err(config_err!("conv2d_transpose: zero-size input {x:?}"));
    }
    if kci != ci || co == 0 || kh == 0 || kw == 0 {
        return Err(config_err!("conv2d_transpose: input {x:?} inconsistent with kernel {k:?}"));
    }
    Ok([n, co, (h - 1) * stride + kh, (w - 1) * stride + kw])
}

pub fn conv2d_transpose_forward(x: &Tensor4, k: &Tensor4, stride: usize) -> Result<Tensor4> {
    let out_shape = conv2d_transpose_shape(x.shape(), k.shape(), stride)?;
    let [n, ci, h, w] = x.shape();
    let [_, co, kh, kw] = k.shape();
    let [_, _, ho, wo] = out_shape;
    let mut out = Tensor4::zeros(out_shape);
    let xd = x.data();
    let kd = k.data();
    let od = out.data_mut();
    for b in 0..n {
        for ic in 0..ci {
            let xbase = (b * ci + ic) * h * w;
            for oc in 0..co {
                let obase = (b * co + oc) * ho * wo;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kd[((ic * co + oc) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for iy in 0..h {
                            let orow = obase + (iy * stride + ky) * wo + kx;
                            let xrow = &xd[xbase + iy * w..xbase + (iy + 1) * w];
                            for (ix, xv) in xrow.iter().enumerate() {
                                od[orow + ix * stride] += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_transpose_backward(
    x: &Tensor4,
    k: &Tensor4,
    stride: usize,
    grad_out: &[f64],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let [n, ci, h, w] = x.shape();
    let [_, co, kh, kw] = k.shape();
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    let xd = x.data();
    let kd = k.data();
    let mut gx = want_x.then(|| vec![0.0; x.numel()]);
    let mut gk = want_k.then(|| vec![0.0; k.numel()]);
    for b in 0..n {
        for ic in 0..ci {
            let xbase = (b * ci + ic) * h * w;
            for oc in 0..co {
                let obase = (b * co + oc) * ho * wo;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kidx = ((ic * co + oc) * kh + ky) * kw + kx;
                        let wv = kd[kidx];
                        let mut acc = 0.0;
                        for iy in 0..h {
                            let orow = obase + (iy * stride + ky) * wo + kx;
                            for ix in 0..w {
                                let go = grad_out[orow + ix * stride];
                                let xi = xbase + iy * w + ix;
                                acc += go * xd[xi];
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += wv * go;
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}
