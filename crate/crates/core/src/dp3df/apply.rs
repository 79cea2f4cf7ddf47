use rayon::prelude::*;

use super::{normalize_filters_backward, FilterField, FilterGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Gradients w.r.t. the normalized parts of a [`FilterField`].
#[derive(Clone, Debug)]
pub struct FilterGrads<S> {
    /// `[H, W, r*r, K]`
    pub weights: Tensor<S>,
    /// `[H, W, r*r]`
    pub luma: Tensor<S>,
}

/// Gradients w.r.t. the input clip and the raw (pre-activation) filters.
#[derive(Clone, Debug)]
pub struct Dp3dfGrads<S> {
    pub clip: Tensor<S>,
    pub raw: Tensor<S>,
}

#[derive(Clone, Copy)]
struct Dims {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
}

fn check_clip<S: Real>(op: &'static str, clip: &Tensor<S>, field: &FilterField<S>) -> Result<Dims> {
    if clip.rank() != 4 {
        return Err(Error::contract(op, format!("clip must be [T, H, W, C], got {:?}", clip.shape())));
    }
    let s = clip.shape();
    let g = field.geometry();
    if s[0] != g.frames {
        return Err(Error::contract(op, format!("clip has {} frames, geometry expects {}", s[0], g.frames)));
    }
    if s[1] != field.height() || s[2] != field.width() {
        return Err(Error::contract(
            op,
            format!("clip plane {}x{} vs filter field {}x{}", s[1], s[2], field.height(), field.width()),
        ));
    }
    if s[3] == 0 {
        return Err(Error::contract(op, "clip has no channels"));
    }
    Ok(Dims { t: s[0], h: s[1], w: s[2], c: s[3] })
}

#[inline(always)]
fn clamp_index(base: usize, delta: isize, extent: usize) -> usize {
    (base as isize + delta).clamp(0, extent as isize - 1) as usize
}

/// Reference evaluation: every tap of every kernel re-derives its clamped source.
pub fn apply_dp3df_naive<S: Real>(clip: &Tensor<S>, field: &FilterField<S>) -> Result<Tensor<S>> {
    let d = check_clip("apply_dp3df_naive", clip, field)?;
    let g = *field.geometry();
    let (sh, sw, st) = g.half_extents();
    let (sh, sw, st) = (sh as isize, sw as isize, st as isize);
    let (nk, taps, r) = (g.kernels(), g.taps(), g.r);
    let center = g.center();
    let x = clip.data();
    let wts = field.weights().data();
    let luma = field.luma().data();
    let (oh, ow) = (d.h * r, d.w * r);
    let mut out = Tensor::zeros(&[oh, ow, d.c]);
    let z = out.data_mut();
    for i in 0..d.h {
        for j in 0..d.w {
            for r1 in 0..r {
                for r2 in 0..r {
                    let b = r1 * r + r2;
                    let kernel = ((i * d.w + j) * nk + b) * taps;
                    for ch in 0..d.c {
                        let mut acc = 0.0f64;
                        for m in -sh..=sh {
                            for n in -sw..=sw {
                                for o in -st..=st {
                                    let tap = g.tap_index(m, n, o);
                                    let f = clamp_index(center, o, d.t);
                                    let y = clamp_index(i, m, d.h);
                                    let xx = clamp_index(j, n, d.w);
                                    let v = x[((f * d.h + y) * d.w + xx) * d.c + ch];
                                    acc += wts[kernel + tap].f64() * v.f64();
                                }
                            }
                        }
                        let l = luma[(i * d.w + j) * nk + b].f64();
                        z[((i * r + r1) * ow + j * r + r2) * d.c + ch] = S::of(acc * l);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Precomputed clamped source offsets shared by all kernels of a row.
struct RowPlan {
    /// Element offset of `(frame, row)` for each `(m, o)` pair, in tap order.
    row_offsets: Vec<usize>,
    /// Clamped column per `(j, n)`.
    cols: Vec<usize>,
}

impl RowPlan {
    fn new(g: &FilterGeometry, d: Dims, i: usize) -> Self {
        let (sh, sw, st) = g.half_extents();
        let (sh, sw, st) = (sh as isize, sw as isize, st as isize);
        let mut row_offsets = Vec::with_capacity(g.kh * g.kt);
        for m in -sh..=sh {
            for o in -st..=st {
                let f = clamp_index(g.center(), o, d.t);
                let y = clamp_index(i, m, d.h);
                row_offsets.push((f * d.h + y) * d.w * d.c);
            }
        }
        let mut cols = Vec::with_capacity(d.w * g.kw);
        for j in 0..d.w {
            for n in -sw..=sw {
                cols.push(clamp_index(j, n, d.w) * d.c);
            }
        }
        RowPlan { row_offsets, cols }
    }

    /// Gathers the `[K, C]` neighbourhood of pixel `j` in tap order.
    #[inline]
    fn gather<S: Real>(&self, g: &FilterGeometry, d: Dims, x: &[S], j: usize, patch: &mut [f64]) {
        let mut k = 0;
        for mi in 0..g.kh {
            for &col in &self.cols[j * g.kw..(j + 1) * g.kw] {
                for oi in 0..g.kt {
                    let base = self.row_offsets[mi * g.kt + oi] + col;
                    for (p, v) in patch[k..k + d.c].iter_mut().zip(&x[base..base + d.c]) {
                        *p = v.f64();
                    }
                    k += d.c;
                }
            }
        }
    }
}

/// Renders the `r` output rows produced by input row `i`.
fn render_row<S: Real>(clip: &[S], field: &FilterField<S>, d: Dims, i: usize, band: &mut [S]) {
    let g = field.geometry();
    let (nk, taps, r) = (g.kernels(), g.taps(), g.r);
    let ow = d.w * r;
    let plan = RowPlan::new(g, d, i);
    let mut patch = vec![0.0f64; taps * d.c];
    let mut acc = vec![0.0f64; d.c];
    let wts = field.weights().data();
    let luma = field.luma().data();
    for j in 0..d.w {
        plan.gather(g, d, clip, j, &mut patch);
        let px = i * d.w + j;
        for b in 0..nk {
            let kernel = &wts[(px * nk + b) * taps..(px * nk + b + 1) * taps];
            acc.fill(0.0);
            for (wt, vals) in kernel.iter().zip(patch.chunks_exact(d.c)) {
                let wt = wt.f64();
                for (a, v) in acc.iter_mut().zip(vals) {
                    *a += wt * v;
                }
            }
            let l = luma[px * nk + b].f64();
            let (r1, r2) = (b / r, b % r);
            let dst = (r1 * ow + j * r + r2) * d.c;
            for (o, a) in band[dst..dst + d.c].iter_mut().zip(&acc) {
                *o = S::of(a * l);
            }
        }
    }
}

/// Single-threaded evaluation with per-row index plans and one gather per pixel.
pub fn apply_dp3df_tiled<S: Real>(clip: &Tensor<S>, field: &FilterField<S>) -> Result<Tensor<S>> {
    let d = check_clip("apply_dp3df_tiled", clip, field)?;
    let r = field.geometry().r;
    let mut out = Tensor::zeros(&[d.h * r, d.w * r, d.c]);
    for (i, band) in out.data_mut().chunks_mut(r * d.w * r * d.c).enumerate() {
        render_row(clip.data(), field, d, i, band);
    }
    Ok(out)
}

/// Produces `Z_t` at `[rH, rW, C]`. Rows are distributed over the current rayon
/// pool; each output element is written by exactly one task, so the result does
/// not depend on the thread count.
pub fn apply_dp3df<S: Real>(clip: &Tensor<S>, field: &FilterField<S>) -> Result<Tensor<S>> {
    let d = check_clip("apply_dp3df", clip, field)?;
    clip.ensure_finite("clip")?;
    let r = field.geometry().r;
    let mut out = Tensor::zeros(&[d.h * r, d.w * r, d.c]);
    out.data_mut()
        .par_chunks_mut(r * d.w * r * d.c)
        .enumerate()
        .for_each(|(i, band)| render_row(clip.data(), field, d, i, band));
    Ok(out)
}

/// Gradients w.r.t. the normalized taps and multipliers only.
pub fn apply_dp3df_backward_filters<S: Real>(
    clip: &Tensor<S>,
    field: &FilterField<S>,
    upstream: &Tensor<S>,
) -> Result<FilterGrads<S>> {
    let op = "apply_dp3df_backward";
    let d = check_clip(op, clip, field)?;
    let g = *field.geometry();
    let (nk, taps, r) = (g.kernels(), g.taps(), g.r);
    let ow = d.w * r;
    upstream.ensure_shape(op, &[d.h * r, ow, d.c])?;
    let mut gw = Tensor::zeros(field.weights().shape());
    let mut gl = Tensor::zeros(field.luma().shape());
    let wts = field.weights().data();
    let luma = field.luma().data();
    let up = upstream.data();
    gw.data_mut()
        .par_chunks_mut(d.w * nk * taps)
        .zip(gl.data_mut().par_chunks_mut(d.w * nk))
        .enumerate()
        .for_each(|(i, (gw_row, gl_row))| {
            let plan = RowPlan::new(&g, d, i);
            let mut patch = vec![0.0f64; taps * d.c];
            for j in 0..d.w {
                plan.gather(&g, d, clip.data(), j, &mut patch);
                let px = i * d.w + j;
                for b in 0..nk {
                    let (r1, r2) = (b / r, b % r);
                    let u = &up[((i * r + r1) * ow + j * r + r2) * d.c..][..d.c];
                    let kernel = &wts[(px * nk + b) * taps..][..taps];
                    let l = luma[px * nk + b].f64();
                    let mut dl = 0.0;
                    let dst = &mut gw_row[(j * nk + b) * taps..][..taps];
                    for ((wt, vals), gwt) in kernel.iter().zip(patch.chunks_exact(d.c)).zip(dst.iter_mut()) {
                        let mut s = 0.0;
                        for (v, uc) in vals.iter().zip(u) {
                            s += v * uc.f64();
                        }
                        dl += wt.f64() * s;
                        *gwt = S::of(l * s);
                    }
                    gl_row[j * nk + b] = S::of(dl);
                }
            }
        });
    Ok(FilterGrads { weights: gw, luma: gl })
}

/// Full backward pass: gradients w.r.t. the clip and the raw filter logits.
pub fn apply_dp3df_backward<S: Real>(
    clip: &Tensor<S>,
    field: &FilterField<S>,
    upstream: &Tensor<S>,
) -> Result<Dp3dfGrads<S>> {
    let fg = apply_dp3df_backward_filters(clip, field, upstream)?;
    let raw = normalize_filters_backward(field, &fg)?;
    let d = check_clip("apply_dp3df_backward", clip, field)?;
    let g = *field.geometry();
    let (nk, taps, r) = (g.kernels(), g.taps(), g.r);
    let ow = d.w * r;
    let wts = field.weights().data();
    let luma = field.luma().data();
    let up = upstream.data();
    let mut gclip = vec![0.0f64; clip.len()];
    for i in 0..d.h {
        let plan = RowPlan::new(&g, d, i);
        for j in 0..d.w {
            let px = i * d.w + j;
            for b in 0..nk {
                let (r1, r2) = (b / r, b % r);
                let u = &up[((i * r + r1) * ow + j * r + r2) * d.c..][..d.c];
                let l = luma[px * nk + b].f64();
                let kernel = &wts[(px * nk + b) * taps..][..taps];
                let mut tap = 0;
                for mi in 0..g.kh {
                    for &col in &plan.cols[j * g.kw..(j + 1) * g.kw] {
                        for oi in 0..g.kt {
                            let base = plan.row_offsets[mi * g.kt + oi] + col;
                            let k = kernel[tap].f64() * l;
                            for (dst, uc) in gclip[base..base + d.c].iter_mut().zip(u) {
                                *dst += k * uc.f64();
                            }
                            tap += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(Dp3dfGrads {
        clip: Tensor::new(clip.shape().to_vec(), gclip.into_iter().map(S::of).collect())?,
        raw,
    })
}
