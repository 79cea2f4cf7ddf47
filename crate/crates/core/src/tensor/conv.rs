use crate::error::{Error, Result};

use super::{Real, Tensor};

/// How samples outside the input plane are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn check(
        op: &'static str,
        input: &[usize],
        weight: &[usize],
        stride: usize,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::contract(op, format!("input must be rank 4 [N,C,H,W], got {input:?}")));
        }
        if weight.len() != 4 {
            return Err(Error::contract(op, format!("weight must be rank 4 [O,C,kh,kw], got {weight:?}")));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c {
            return Err(Error::contract(op, format!("axis C: input has {c} channels, weight expects {wc}")));
        }
        if kh % 2 == 0 {
            return Err(Error::contract(op, format!("axis kh: kernel height {kh} must be odd")));
        }
        if kw % 2 == 0 {
            return Err(Error::contract(op, format!("axis kw: kernel width {kw} must be odd")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::contract(op, format!("stride {stride} not in {{1, 2}}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::contract(op, "axis H/W: empty plane"));
        }
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let ho = (h + 2 * ph - kh) / stride + 1;
        let wo = (w + 2 * pw - kw) / stride + 1;
        Ok(ConvDims { n, c, h, w, o, kh, kw, stride, ho, wo })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Source coordinate of an output tap, or `None` for a zero-padded sample.
#[inline(always)]
fn source(pos: usize, tap: usize, pad: usize, extent: usize, padding: Padding) -> Option<usize> {
    let p = pos as isize + tap as isize - pad as isize;
    if p >= 0 && (p as usize) < extent {
        Some(p as usize)
    } else {
        match padding {
            Padding::Zero => None,
            Padding::Replicate => Some(p.clamp(0, extent as isize - 1) as usize),
        }
    }
}

fn im2col<S: Real>(plane: &[S], d: &ConvDims, padding: Padding, col: &mut [S]) {
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let p = d.positions();
    let xs: Vec<Vec<Option<usize>>> = (0..d.kw)
        .map(|kj| (0..d.wo).map(|ox| source(ox * d.stride, kj, pw, d.w, padding)).collect())
        .collect();
    let mut row = 0;
    for ci in 0..d.c {
        let chan = &plane[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for xs_k in &xs {
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let out = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    match source(oy * d.stride, ki, ph, d.h, padding) {
                        None => out.fill(S::zero()),
                        Some(iy) => {
                            let src = &chan[iy * d.w..(iy + 1) * d.w];
                            for (o, x) in out.iter_mut().zip(xs_k) {
                                *o = x.map_or(S::zero(), |ix| src[ix]);
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<S: Real>(col: &[S], d: &ConvDims, padding: Padding, plane: &mut [S]) {
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let p = d.positions();
    let mut row = 0;
    for ci in 0..d.c {
        let chan = &mut plane[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let Some(iy) = source(oy * d.stride, ki, ph, d.h, padding) else {
                        continue;
                    };
                    for ox in 0..d.wo {
                        if let Some(ix) = source(ox * d.stride, kj, pw, d.w, padding) {
                            chan[iy * d.w + ix] += src[oy * d.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2D cross-correlation over `[N, C, H, W]` with an `[O, C, kh, kw]` kernel.
///
/// Padding is `(k - 1) / 2` per side so stride 1 preserves the plane size.
pub fn conv2d<S: Real>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<S>> {
    let d = ConvDims::check("conv2d", input.shape(), weight.shape(), stride)?;
    if let Some(b) = bias {
        if b.shape() != [d.o] {
            return Err(Error::contract("conv2d", format!("axis O: bias {:?} vs {} outputs", b.shape(), d.o)));
        }
    }
    let (ckk, p) = (d.ckk(), d.positions());
    let mut out = Tensor::zeros(&[d.n, d.o, d.ho, d.wo]);
    let mut col = vec![S::zero(); ckk * p];
    let plane = d.c * d.h * d.w;
    for ni in 0..d.n {
        im2col(&input.data()[ni * plane..(ni + 1) * plane], &d, padding, &mut col);
        let dst = &mut out.data_mut()[ni * d.o * p..(ni + 1) * d.o * p];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if bias.is_some() { S::one() } else { S::zero() };
        // SAFETY: weight is [O, ckk], col is [ckk, p], dst is [O, p], all row-major.
        unsafe {
            S::gemm(
                d.o,
                ckk,
                p,
                S::one(),
                weight.data().as_ptr(),
                ckk as isize,
                1,
                col.as_ptr(),
                p as isize,
                1,
                beta,
                dst.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<S> {
    /// Absent when the caller did not ask for it.
    pub input: Option<Tensor<S>>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn conv2d_backward<S: Real>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<S>,
    need_input: bool,
) -> Result<Conv2dGrads<S>> {
    let d = ConvDims::check("conv2d_backward", input.shape(), weight.shape(), stride)?;
    grad_out.ensure_shape("conv2d_backward", &[d.n, d.o, d.ho, d.wo])?;
    let (ckk, p) = (d.ckk(), d.positions());
    let plane = d.c * d.h * d.w;
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb_acc = vec![0.0f64; d.o];
    let mut gi = need_input.then(|| Tensor::zeros(input.shape()));
    let mut col = vec![S::zero(); ckk * p];
    let mut dcol = vec![S::zero(); if need_input { ckk * p } else { 0 }];
    for ni in 0..d.n {
        let gy = &grad_out.data()[ni * d.o * p..(ni + 1) * d.o * p];
        for (oc, chunk) in gy.chunks(p).enumerate() {
            gb_acc[oc] += chunk.iter().fold(0.0, |a, v| a + v.f64());
        }
        im2col(&input.data()[ni * plane..(ni + 1) * plane], &d, padding, &mut col);
        // SAFETY: gy is [O, p]; col^T is [p, ckk] via swapped strides; gw is [O, ckk].
        unsafe {
            S::gemm(
                d.o,
                p,
                ckk,
                S::one(),
                gy.as_ptr(),
                p as isize,
                1,
                col.as_ptr(),
                1,
                p as isize,
                S::one(),
                gw.data_mut().as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
        if let Some(gi) = gi.as_mut() {
            // SAFETY: weight^T is [ckk, O] via swapped strides; gy is [O, p]; dcol is [ckk, p].
            unsafe {
                S::gemm(
                    ckk,
                    d.o,
                    p,
                    S::one(),
                    weight.data().as_ptr(),
                    1,
                    ckk as isize,
                    gy.as_ptr(),
                    p as isize,
                    1,
                    S::zero(),
                    dcol.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            col2im(&dcol, &d, padding, &mut gi.data_mut()[ni * plane..(ni + 1) * plane]);
        }
    }
    Ok(Conv2dGrads {
        input: gi,
        weight: gw,
        bias: Tensor::from_fn(&[d.o], |i| S::of(gb_acc[i])),
    })
}
