//! Standard and modulated deformable 2-D convolution with full analytic
//! backward through inputs, weights, offsets, and masks.
//!
//! A deformable layer samples the input at `base + cell + offset` per sampling
//! cell via bilinear interpolation, multiplies each sample by a per-cell
//! modulation mask, and sums the results weighted by the kernel. Offsets are
//! stored as interleaved `(dy, dx)` pairs per grid cell, cells enumerated
//! row-major; sampling points outside the input contribute zero.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::parallel::{for_each_chunk_mut, for_each_chunk_mut4};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, TensorId};
use crate::tensor::Tensor;

/// Convolution geometry: channel counts, kernel extent, stride, dilation, padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Number of sampling cells N in the grid.
    pub fn cells(&self) -> usize {
        self.kh * self.kw
    }

    /// Sampling grid enumerated row-major, centered at the kernel center.
    /// A 3x3 kernel with dilation 1 yields (-1,-1), (-1,0), ..., (0,1), (1,1).
    pub fn grid(&self) -> Vec<(isize, isize)> {
        let cy = (self.dilation * (self.kh - 1) / 2) as isize;
        let cx = (self.dilation * (self.kw - 1) / 2) as isize;
        let mut cells = Vec::with_capacity(self.cells());
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                cells.push((
                    (ky * self.dilation) as isize - cy,
                    (kx * self.dilation) as isize - cx,
                ));
            }
        }
        cells
    }

    /// Output spatial extent under the standard convolution formula.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span_h = self.dilation * (self.kh - 1) + 1;
        let span_w = self.dilation * (self.kw - 1) + 1;
        let ih = h + 2 * self.padding;
        let iw = w + 2 * self.padding;
        if span_h > ih || span_w > iw || self.stride == 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "kernel span {span_h}x{span_w} exceeds padded input {ih}x{iw} (stride {})",
                self.stride
            )));
        }
        Ok(((ih - span_h) / self.stride + 1, (iw - span_w) / self.stride + 1))
    }
}

/// Convolution parameters: geometry plus the weight `[oc, ic, kh, kw]` and
/// optional per-output-channel bias registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub geom: ConvGeom,
    pub weight: TensorId,
    pub bias: Option<TensorId>,
}

/// Offsets `[B, 2N, Ho, Wo]` (interleaved dy,dx per cell, unconstrained range)
/// and modulation masks `[B, N, Ho, Wo]` in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct DeformField {
    pub offsets: TensorId,
    pub masks: TensorId,
}

// ── Bilinear sampling ───────────────────────────────────────────────

/// Corner indices and fractional weights for one sampling position.
/// `None` indices are outside the input and contribute zero.
struct CornerCtx<T> {
    i00: Option<usize>,
    i01: Option<usize>,
    i10: Option<usize>,
    i11: Option<usize>,
    ly: T,
    lx: T,
}

#[inline]
fn corner_ctx<T: Scalar>(py: T, px: T, h: usize, w: usize) -> Option<CornerCtx<T>> {
    let neg1 = -T::ONE;
    let hf = T::from_f64(h as f64);
    let wf = T::from_f64(w as f64);
    if !(py > neg1) || !(py < hf) || !(px > neg1) || !(px < wf) {
        return None;
    }
    let y0f = py.floor();
    let x0f = px.floor();
    let y0 = y0f.to_f64() as isize;
    let x0 = x0f.to_f64() as isize;
    let (y1, x1) = (y0 + 1, x0 + 1);
    let ok = |y: isize, x: isize| -> Option<usize> {
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            Some(y as usize * w + x as usize)
        } else {
            None
        }
    };
    Some(CornerCtx {
        i00: ok(y0, x0),
        i01: ok(y0, x1),
        i10: ok(y1, x0),
        i11: ok(y1, x1),
        ly: py - y0f,
        lx: px - x0f,
    })
}

#[inline]
fn fetch<T: Scalar>(plane: &[T], c: &CornerCtx<T>) -> [T; 4] {
    [
        c.i00.map_or(T::ZERO, |i| plane[i]),
        c.i01.map_or(T::ZERO, |i| plane[i]),
        c.i10.map_or(T::ZERO, |i| plane[i]),
        c.i11.map_or(T::ZERO, |i| plane[i]),
    ]
}

#[inline]
fn interp<T: Scalar>(v: &[T; 4], ly: T, lx: T) -> T {
    let hy = T::ONE - ly;
    let hx = T::ONE - lx;
    hy * (hx * v[0] + lx * v[1]) + ly * (hx * v[2] + lx * v[3])
}

#[inline]
fn interp_dy<T: Scalar>(v: &[T; 4], lx: T) -> T {
    let hx = T::ONE - lx;
    hx * (v[2] - v[0]) + lx * (v[3] - v[1])
}

#[inline]
fn interp_dx<T: Scalar>(v: &[T; 4], ly: T) -> T {
    let hy = T::ONE - ly;
    hy * (v[1] - v[0]) + ly * (v[3] - v[2])
}

#[inline]
fn scatter<T: Scalar>(plane: &mut [T], c: &CornerCtx<T>, g: T) {
    let hy = T::ONE - c.ly;
    let hx = T::ONE - c.lx;
    if let Some(i) = c.i00 {
        plane[i] += g * hy * hx;
    }
    if let Some(i) = c.i01 {
        plane[i] += g * hy * c.lx;
    }
    if let Some(i) = c.i10 {
        plane[i] += g * c.ly * hx;
    }
    if let Some(i) = c.i11 {
        plane[i] += g * c.ly * c.lx;
    }
}

/// Samples every channel of a `[C, H, W]` tensor at real-valued point
/// `(py, px)`. Out-of-bounds regions read as zero.
pub fn bilinear_sample<T: Scalar>(x: &Tensor<T>, py: T, px: T) -> Vec<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![T::ZERO; c];
    if let Some(ctx) = corner_ctx(py, px, h, w) {
        for (ci, o) in out.iter_mut().enumerate() {
            let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
            *o = interp(&fetch(plane, &ctx), ctx.ly, ctx.lx);
        }
    }
    out
}

// ── Fixed-order lane dot for contiguous rows ────────────────────────

#[inline]
fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut l = [T::ZERO; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        l[0] += x[0] * y[0];
        l[1] += x[1] * y[1];
        l[2] += x[2] * y[2];
        l[3] += x[3] * y[3];
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder().iter()) {
        l[0] += *x * *y;
    }
    (l[0] + l[1]) + (l[2] + l[3])
}

// ── Standard convolution kernels ────────────────────────────────────

type Dims4 = (usize, usize, usize, usize);

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    (b, ic, h, w): Dims4,
    wt: &[T],
    bias: Option<&[T]>,
    geom: &ConvGeom,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let oc = geom.out_channels;
    let (s, dil, pad) = (geom.stride, geom.dilation, geom.padding as isize);
    let mut out = vec![T::ZERO; b * oc * ho * wo];
    for_each_chunk_mut(&mut out, ho * wo, |plane_idx, plane| {
        let (bi, oci) = (plane_idx / oc, plane_idx % oc);
        if let Some(bias) = bias {
            plane.fill(bias[oci]);
        }
        for ici in 0..ic {
            let x_base = (bi * ic + ici) * h * w;
            for ky in 0..geom.kh {
                for kx in 0..geom.kw {
                    let wv = wt[((oci * ic + ici) * geom.kh + ky) * geom.kw + kx];
                    let shift = (kx * dil) as isize - pad;
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + (ky * dil) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x[x_base + iy as usize * w..x_base + (iy as usize + 1) * w];
                        let o_row = &mut plane[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let o0 = (-shift).max(0) as usize;
                            let o1 = ((w as isize - shift).min(wo as isize)).max(0) as usize;
                            if o1 > o0 {
                                let xs = &x_row[(o0 as isize + shift) as usize
                                    ..(o1 as isize + shift) as usize];
                                for (o, xv) in o_row[o0..o1].iter_mut().zip(xs.iter()) {
                                    *o += wv * *xv;
                                }
                            }
                        } else {
                            for (ox, o) in o_row.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + shift;
                                if ix >= 0 && ix < w as isize {
                                    *o += wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_dx<T: Scalar>(
    g: &[T],
    wt: &[T],
    geom: &ConvGeom,
    x_shape: &[usize],
    dx: &mut [T],
) {
    let (ic, h, w) = (x_shape[1], x_shape[2], x_shape[3]);
    let oc = geom.out_channels;
    let (ho, wo) = geom.output_hw(h, w).expect("validated at forward");
    let (s, dil, pad) = (geom.stride, geom.dilation, geom.padding as isize);
    for_each_chunk_mut(dx, h * w, |plane_idx, plane| {
        let (bi, ici) = (plane_idx / ic, plane_idx % ic);
        for oci in 0..oc {
            let g_base = (bi * oc + oci) * ho * wo;
            for ky in 0..geom.kh {
                for kx in 0..geom.kw {
                    let wv = wt[((oci * ic + ici) * geom.kh + ky) * geom.kw + kx];
                    let shift = (kx * dil) as isize - pad;
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + (ky * dil) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let g_row = &g[g_base + oy * wo..g_base + (oy + 1) * wo];
                        let d_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        if s == 1 {
                            let o0 = (-shift).max(0) as usize;
                            let o1 = ((w as isize - shift).min(wo as isize)).max(0) as usize;
                            if o1 > o0 {
                                let ds = &mut d_row[(o0 as isize + shift) as usize
                                    ..(o1 as isize + shift) as usize];
                                for (d, gv) in ds.iter_mut().zip(g_row[o0..o1].iter()) {
                                    *d += wv * *gv;
                                }
                            }
                        } else {
                            for (ox, gv) in g_row.iter().enumerate() {
                                let ix = (ox * s) as isize + shift;
                                if ix >= 0 && ix < w as isize {
                                    d_row[ix as usize] += wv * *gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn conv2d_backward_dw<T: Scalar>(
    g: &[T],
    x: &[T],
    geom: &ConvGeom,
    x_shape: &[usize],
    dw: &mut [T],
) {
    let (b, ic, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let oc = geom.out_channels;
    let (ho, wo) = geom.output_hw(h, w).expect("validated at forward");
    let (s, dil, pad) = (geom.stride, geom.dilation, geom.padding as isize);
    for_each_chunk_mut(dw, ic * geom.kh * geom.kw, |oci, dw_oc| {
        for bi in 0..b {
            let g_base = (bi * oc + oci) * ho * wo;
            for ici in 0..ic {
                let x_base = (bi * ic + ici) * h * w;
                for ky in 0..geom.kh {
                    for kx in 0..geom.kw {
                        let shift = (kx * dil) as isize - pad;
                        let mut acc = T::ZERO;
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + (ky * dil) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let g_row = &g[g_base + oy * wo..g_base + (oy + 1) * wo];
                            let x_row =
                                &x[x_base + iy as usize * w..x_base + (iy as usize + 1) * w];
                            if s == 1 {
                                let o0 = (-shift).max(0) as usize;
                                let o1 = ((w as isize - shift).min(wo as isize)).max(0) as usize;
                                if o1 > o0 {
                                    acc += dot4(
                                        &g_row[o0..o1],
                                        &x_row[(o0 as isize + shift) as usize
                                            ..(o1 as isize + shift) as usize],
                                    );
                                }
                            } else {
                                for (ox, gv) in g_row.iter().enumerate() {
                                    let ix = (ox * s) as isize + shift;
                                    if ix >= 0 && ix < w as isize {
                                        acc += *gv * x_row[ix as usize];
                                    }
                                }
                            }
                        }
                        dw_oc[(ici * geom.kh + ky) * geom.kw + kx] += acc;
                    }
                }
            }
        }
    });
}

pub(crate) fn conv_backward_db<T: Scalar>(
    g: &[T],
    geom: &ConvGeom,
    x_shape: &[usize],
    db: &mut [T],
) {
    let (b, h, w) = (x_shape[0], x_shape[2], x_shape[3]);
    let oc = geom.out_channels;
    let (ho, wo) = geom.output_hw(h, w).expect("validated at forward");
    for oci in 0..oc {
        let mut acc = T::ZERO;
        for bi in 0..b {
            let base = (bi * oc + oci) * ho * wo;
            acc += ops::lane_sum(&g[base..base + ho * wo]);
        }
        db[oci] += acc;
    }
}

// ── Deformable convolution kernels ──────────────────────────────────

pub(crate) fn deform_conv2d_forward<T: Scalar>(
    x: &[T],
    (b, ic, h, w): Dims4,
    wt: &[T],
    bias: Option<&[T]>,
    offsets: &[T],
    masks: &[T],
    geom: &ConvGeom,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let oc = geom.out_channels;
    let n = geom.cells();
    let (s, dil, pad) = (geom.stride, geom.dilation, geom.padding as isize);
    let mut out = vec![T::ZERO; b * oc * ho * wo];
    for_each_chunk_mut(&mut out, oc * ho * wo, |bi, out_b| {
        let mut col = vec![T::ZERO; ic * n];
        let off_b = &offsets[bi * 2 * n * ho * wo..(bi + 1) * 2 * n * ho * wo];
        let mask_b = &masks[bi * n * ho * wo..(bi + 1) * n * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let pos = oy * wo + ox;
                for ky in 0..geom.kh {
                    for kx in 0..geom.kw {
                        let cell = ky * geom.kw + kx;
                        let dy = off_b[(2 * cell) * ho * wo + pos];
                        let dx = off_b[(2 * cell + 1) * ho * wo + pos];
                        let m = mask_b[cell * ho * wo + pos];
                        let py = T::from_f64(((oy * s) as isize + (ky * dil) as isize - pad) as f64) + dy;
                        let px = T::from_f64(((ox * s) as isize + (kx * dil) as isize - pad) as f64) + dx;
                        match corner_ctx(py, px, h, w) {
                            Some(ctx) => {
                                for ici in 0..ic {
                                    let plane = &x[(bi * ic + ici) * h * w..(bi * ic + ici + 1) * h * w];
                                    col[ici * n + cell] =
                                        m * interp(&fetch(plane, &ctx), ctx.ly, ctx.lx);
                                }
                            }
                            None => {
                                for ici in 0..ic {
                                    col[ici * n + cell] = T::ZERO;
                                }
                            }
                        }
                    }
                }
                for oci in 0..oc {
                    let wrow = &wt[oci * ic * n..(oci + 1) * ic * n];
                    let mut v = dot4(wrow, &col);
                    if let Some(bias) = bias {
                        v += bias[oci];
                    }
                    out_b[oci * ho * wo + pos] = v;
                }
            }
        }
    });
    out
}

pub(crate) struct DeformGrads<T: Scalar> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub doffsets: Option<Vec<T>>,
    pub dmasks: Option<Vec<T>>,
}

/// Full backward for the deformable convolution. All four gradient streams are
/// computed in one pass over the sampled columns; the caller keeps the ones it
/// needs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_conv2d_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    x_shape: &[usize],
    wt: &[T],
    offsets: &[T],
    masks: &[T],
    geom: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_doffsets: bool,
    need_dmasks: bool,
) -> DeformGrads<T> {
    let (b, ic, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let oc = geom.out_channels;
    let n = geom.cells();
    let (ho, wo) = geom.output_hw(h, w).expect("validated at forward");
    let (s, dil, pad) = (geom.stride, geom.dilation, geom.padding as isize);

    let mut dx = vec![T::ZERO; b * ic * h * w];
    let mut doffs = vec![T::ZERO; b * 2 * n * ho * wo];
    let mut dmasks = vec![T::ZERO; b * n * ho * wo];
    // masked sample columns, retained for the weight gradient
    let mut cols = vec![T::ZERO; b * ho * wo * ic * n];

    for_each_chunk_mut4(
        (&mut dx, ic * h * w),
        (&mut doffs, 2 * n * ho * wo),
        (&mut dmasks, n * ho * wo),
        (&mut cols, ho * wo * ic * n),
        |bi, dx_b, doff_b, dmask_b, cols_b| {
            let mut dcol = vec![T::ZERO; ic * n];
            let off_b = &offsets[bi * 2 * n * ho * wo..(bi + 1) * 2 * n * ho * wo];
            let mask_b = &masks[bi * n * ho * wo..(bi + 1) * n * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let pos = oy * wo + ox;
                    // dL/dcol = sum_oc g * w_row
                    dcol.fill(T::ZERO);
                    for oci in 0..oc {
                        let gv = g[(bi * oc + oci) * ho * wo + pos];
                        if gv == T::ZERO {
                            continue;
                        }
                        let wrow = &wt[oci * ic * n..(oci + 1) * ic * n];
                        for (d, wv) in dcol.iter_mut().zip(wrow.iter()) {
                            *d += gv * *wv;
                        }
                    }
                    for ky in 0..geom.kh {
                        for kx in 0..geom.kw {
                            let cell = ky * geom.kw + kx;
                            let dy = off_b[(2 * cell) * ho * wo + pos];
                            let dxo = off_b[(2 * cell + 1) * ho * wo + pos];
                            let m = mask_b[cell * ho * wo + pos];
                            let py = T::from_f64(((oy * s) as isize + (ky * dil) as isize - pad) as f64) + dy;
                            let px = T::from_f64(((ox * s) as isize + (kx * dil) as isize - pad) as f64) + dxo;
                            let Some(ctx) = corner_ctx(py, px, h, w) else {
                                continue;
                            };
                            let mut dpy = T::ZERO;
                            let mut dpx = T::ZERO;
                            let mut dm = T::ZERO;
                            for ici in 0..ic {
                                let plane = &x[(bi * ic + ici) * h * w..(bi * ic + ici + 1) * h * w];
                                let v = fetch(plane, &ctx);
                                let sample = interp(&v, ctx.ly, ctx.lx);
                                cols_b[pos * ic * n + ici * n + cell] = m * sample;
                                let dc = dcol[ici * n + cell];
                                if dc == T::ZERO {
                                    continue;
                                }
                                dm += dc * sample;
                                let dsample = dc * m;
                                dpy += dsample * interp_dy(&v, ctx.lx);
                                dpx += dsample * interp_dx(&v, ctx.ly);
                                scatter(
                                    &mut dx_b[ici * h * w..(ici + 1) * h * w],
                                    &ctx,
                                    dsample,
                                );
                            }
                            dmask_b[cell * ho * wo + pos] += dm;
                            doff_b[(2 * cell) * ho * wo + pos] += dpy;
                            doff_b[(2 * cell + 1) * ho * wo + pos] += dpx;
                        }
                    }
                }
            }
        },
    );

    let dw = if need_dw {
        let mut dw = vec![T::ZERO; oc * ic * n];
        for_each_chunk_mut(&mut dw, ic * n, |oci, dw_oc| {
            for bi in 0..b {
                for pos in 0..ho * wo {
                    let gv = g[(bi * oc + oci) * ho * wo + pos];
                    if gv == T::ZERO {
                        continue;
                    }
                    let col = &cols[(bi * ho * wo + pos) * ic * n..(bi * ho * wo + pos + 1) * ic * n];
                    for (d, cv) in dw_oc.iter_mut().zip(col.iter()) {
                        *d += gv * *cv;
                    }
                }
            }
        });
        Some(dw)
    } else {
        None
    };

    DeformGrads {
        dx: need_dx.then_some(dx),
        dw,
        doffsets: need_doffsets.then_some(doffs),
        dmasks: need_dmasks.then_some(dmasks),
    }
}

// ── Point-sample backward (for the standalone bilinear op) ──────────

pub(crate) fn bilinear_point_backward_dx<T: Scalar>(
    g: &[T],
    p: &[T],
    x_shape: &[usize],
    dx: &mut [T],
) {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    if let Some(ctx) = corner_ctx(p[0], p[1], h, w) {
        for ci in 0..c {
            scatter(&mut dx[ci * h * w..(ci + 1) * h * w], &ctx, g[ci]);
        }
    }
}

pub(crate) fn bilinear_point_backward_dp<T: Scalar>(
    g: &[T],
    x: &[T],
    p: &[T],
    x_shape: &[usize],
    dp: &mut [T],
) {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    if let Some(ctx) = corner_ctx(p[0], p[1], h, w) {
        for ci in 0..c {
            let v = fetch(&x[ci * h * w..(ci + 1) * h * w], &ctx);
            dp[0] += g[ci] * interp_dy(&v, ctx.lx);
            dp[1] += g[ci] * interp_dx(&v, ctx.ly);
        }
    }
}

// ── Tape operations ─────────────────────────────────────────────────

impl<T: Scalar> Tape<T> {
    fn check_conv_inputs(&self, op: &'static str, x: TensorId, spec: &ConvSpec) -> Result<Dims4> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::ShapeExpected {
                op,
                expected: vec![0, spec.geom.in_channels, 0, 0],
                got: xs.to_vec(),
            });
        }
        if xs[1] != spec.geom.in_channels {
            return Err(Error::ShapeMismatch {
                op,
                lhs: xs.to_vec(),
                rhs: vec![spec.geom.in_channels],
            });
        }
        let g = &spec.geom;
        let expected_w = vec![g.out_channels, g.in_channels, g.kh, g.kw];
        if self.shape(spec.weight) != expected_w.as_slice() {
            return Err(Error::ShapeExpected {
                op,
                expected: expected_w,
                got: self.shape(spec.weight).to_vec(),
            });
        }
        if let Some(bias) = spec.bias {
            if self.shape(bias) != [g.out_channels] {
                return Err(Error::ShapeExpected {
                    op,
                    expected: vec![g.out_channels],
                    got: self.shape(bias).to_vec(),
                });
            }
        }
        Ok((xs[0], xs[1], xs[2], xs[3]))
    }

    /// Standard 2-D convolution: grid sampling over the input weighted by the
    /// kernel, plus bias.
    pub fn conv2d(&mut self, x: TensorId, spec: &ConvSpec) -> Result<TensorId> {
        let dims = self.check_conv_inputs("conv2d", x, spec)?;
        let (ho, wo) = spec.geom.output_hw(dims.2, dims.3)?;
        let out = conv2d_forward(
            self.data(x),
            dims,
            self.data(spec.weight),
            spec.bias.map(|b| self.data(b)),
            &spec.geom,
            (ho, wo),
        );
        let value = Tensor::from_vec(vec![dims.0, spec.geom.out_channels, ho, wo], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w: spec.weight,
                bias: spec.bias,
                geom: spec.geom,
            },
        )
    }

    /// Modulated deformable convolution: each sampling cell is shifted by its
    /// learned offset and scaled by its mask before the weighted sum.
    pub fn deform_conv2d(
        &mut self,
        x: TensorId,
        field: &DeformField,
        spec: &ConvSpec,
    ) -> Result<TensorId> {
        let dims = self.check_conv_inputs("deform_conv2d", x, spec)?;
        let (ho, wo) = spec.geom.output_hw(dims.2, dims.3)?;
        let n = spec.geom.cells();
        let expected_off = vec![dims.0, 2 * n, ho, wo];
        if self.shape(field.offsets) != expected_off.as_slice() {
            return Err(Error::ShapeExpected {
                op: "deform_conv2d offsets",
                expected: expected_off,
                got: self.shape(field.offsets).to_vec(),
            });
        }
        let expected_mask = vec![dims.0, n, ho, wo];
        if self.shape(field.masks) != expected_mask.as_slice() {
            return Err(Error::ShapeExpected {
                op: "deform_conv2d masks",
                expected: expected_mask,
                got: self.shape(field.masks).to_vec(),
            });
        }
        let out = deform_conv2d_forward(
            self.data(x),
            dims,
            self.data(spec.weight),
            spec.bias.map(|b| self.data(b)),
            self.data(field.offsets),
            self.data(field.masks),
            &spec.geom,
            (ho, wo),
        );
        let value = Tensor::from_vec(vec![dims.0, spec.geom.out_channels, ho, wo], out)?;
        self.push(
            "deform_conv2d",
            value,
            Op::DeformConv2d {
                x,
                w: spec.weight,
                bias: spec.bias,
                offsets: field.offsets,
                masks: field.masks,
                geom: spec.geom,
            },
        )
    }

    /// Offset/mask-generating branch: one convolution with the deformable
    /// layer's kernel geometry producing `3N` channels; the first `2N` are raw
    /// offsets, the last `N` pass through a sigmoid to form masks. Zero-
    /// initialized weights give zero offsets and masks of 0.5.
    pub fn offset_mask_branch(&mut self, guide: TensorId, spec: &ConvSpec) -> Result<DeformField> {
        if spec.geom.out_channels % 3 != 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "offset_mask_branch must produce 3N channels, got {}",
                spec.geom.out_channels
            )));
        }
        let n = spec.geom.out_channels / 3;
        let raw = self.conv2d(guide, spec)?;
        let offsets = self.slice_channels(raw, 0, 2 * n)?;
        let mask_logits = self.slice_channels(raw, 2 * n, n)?;
        let masks = self.sigmoid(mask_logits)?;
        Ok(DeformField { offsets, masks })
    }

    /// Differentiable point sample of a `[C, H, W]` tensor at `p = [py, px]`.
    pub fn bilinear_point(&mut self, x: TensorId, p: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::ShapeExpected {
                op: "bilinear_point",
                expected: vec![0, 0, 0],
                got: xs,
            });
        }
        if self.shape(p) != [2] {
            return Err(Error::ShapeExpected {
                op: "bilinear_point",
                expected: vec![2],
                got: self.shape(p).to_vec(),
            });
        }
        let pv = self.data(p);
        let out = bilinear_sample(self.value(x), pv[0], pv[1]);
        let value = Tensor::from_vec(vec![xs[0]], out)?;
        self.push("bilinear_point", value, Op::BilinearPoint { x, p })
    }
}
