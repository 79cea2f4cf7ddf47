//! The deep parametric 3D filter: per-pixel bundles of `r*r` spatiotemporal
//! kernels, each carrying a softmax-normalized `kh x kw x kt` tap volume and a
//! reciprocal-sigmoid luminance multiplier.
//!
//! Layout conventions:
//! - clips are `[T, H, W, C]` with the target frame at index `(T - 1) / 2`;
//! - raw filters are `[H, W, r*r*(K + 1)]` with `K = kh*kw*kt`; the first
//!   `r*r*K` channels hold the tap logits (kernel `b` at `b*K..(b+1)*K`), the
//!   last `r*r` channels hold the luminance logits;
//! - tap `(m, n, o)` of a kernel sits at `((m + s_h)*kw + (n + s_w))*kt + (o + s_t)`;
//! - kernel `b = r1*r + r2` writes output pixel `(i*r + r1, j*r + r2)`.

mod apply;

use crate::error::{Error, Result};
use crate::tensor::{softmax_axis, softmax_axis_backward, Real, Tensor};

pub use apply::{
    apply_dp3df, apply_dp3df_backward, apply_dp3df_backward_filters, apply_dp3df_naive,
    apply_dp3df_tiled, Dp3dfGrads, FilterGrads,
};

/// Shape of a filter bundle: upsampling factor, kernel extents and clip length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterGeometry {
    pub r: usize,
    pub kh: usize,
    pub kw: usize,
    pub kt: usize,
    /// Number of input frames `T = 2N + 1`.
    pub frames: usize,
}

impl FilterGeometry {
    pub fn new(r: usize, kh: usize, kw: usize, kt: usize, frames: usize) -> Result<Self> {
        let g = FilterGeometry { r, kh, kw, kt, frames };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let op = "FilterGeometry";
        if self.r == 0 {
            return Err(Error::contract(op, "r must be >= 1"));
        }
        for (name, k) in [("kh", self.kh), ("kw", self.kw), ("kt", self.kt)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::contract(op, format!("{name} = {k} must be odd and >= 1")));
            }
        }
        if self.frames == 0 || self.frames.is_multiple_of(2) {
            return Err(Error::contract(op, format!("frame count {} must be odd", self.frames)));
        }
        if self.kt > self.frames {
            return Err(Error::contract(op, format!("kt = {} exceeds {} frames", self.kt, self.frames)));
        }
        Ok(())
    }

    /// Taps per kernel, `kh * kw * kt`.
    pub fn taps(&self) -> usize {
        self.kh * self.kw * self.kt
    }

    /// Kernels per pixel, `r * r`.
    pub fn kernels(&self) -> usize {
        self.r * self.r
    }

    /// Channel extent of the raw network output.
    pub fn raw_channels(&self) -> usize {
        self.kernels() * (self.taps() + 1)
    }

    pub fn center(&self) -> usize {
        (self.frames - 1) / 2
    }

    pub fn half_extents(&self) -> (usize, usize, usize) {
        ((self.kh - 1) / 2, (self.kw - 1) / 2, (self.kt - 1) / 2)
    }

    pub fn tap_index(&self, m: isize, n: isize, o: isize) -> usize {
        let (sh, sw, st) = self.half_extents();
        (((m + sh as isize) as usize * self.kw + (n + sw as isize) as usize) * self.kt) + (o + st as isize) as usize
    }
}

/// Normalized filter bundle for an `H x W` frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterField<S = f32> {
    geom: FilterGeometry,
    /// `[H, W, r*r, K]`, each kernel positive and summing to one.
    weights: Tensor<S>,
    /// `[H, W, r*r]`, each entry `1 / sigmoid(logit) > 1`.
    luma: Tensor<S>,
}

impl<S: Real> FilterField<S> {
    /// Builds a field from already-activated parts (fixtures, reductions).
    pub fn from_parts(geom: FilterGeometry, weights: Tensor<S>, luma: Tensor<S>) -> Result<Self> {
        geom.validate()?;
        let op = "FilterField::from_parts";
        if weights.rank() != 4 || weights.shape()[2..] != [geom.kernels(), geom.taps()] {
            return Err(Error::contract(
                op,
                format!("weights must be [H, W, {}, {}], got {:?}", geom.kernels(), geom.taps(), weights.shape()),
            ));
        }
        luma.ensure_shape(op, &[weights.shape()[0], weights.shape()[1], geom.kernels()])?;
        Ok(FilterField { geom, weights, luma })
    }

    pub fn geometry(&self) -> &FilterGeometry {
        &self.geom
    }

    pub fn height(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor<S> {
        &self.weights
    }

    pub fn luma(&self) -> &Tensor<S> {
        &self.luma
    }

    /// Replaces every luminance multiplier by exactly one, bypassing the activation.
    pub fn with_unit_luma(mut self) -> Self {
        self.luma = Tensor::full(self.luma.shape(), S::one());
        self
    }
}

fn check_raw<S: Real>(op: &'static str, raw: &Tensor<S>, geom: &FilterGeometry) -> Result<(usize, usize)> {
    geom.validate()?;
    if raw.rank() != 3 {
        return Err(Error::contract(op, format!("raw filters must be [H, W, C], got {:?}", raw.shape())));
    }
    if raw.shape()[2] != geom.raw_channels() {
        return Err(Error::contract(
            op,
            format!(
                "raw channel extent {} != r^2*(kh*kw*kt+1) = {}",
                raw.shape()[2],
                geom.raw_channels()
            ),
        ));
    }
    Ok((raw.shape()[0], raw.shape()[1]))
}

/// Splits raw logits into softmax taps and reciprocal-sigmoid multipliers.
pub fn normalize_filters<S: Real>(raw: &Tensor<S>, geom: &FilterGeometry) -> Result<FilterField<S>> {
    let (h, w) = check_raw("normalize_filters", raw, geom)?;
    raw.ensure_finite("raw filters")?;
    let (nk, taps) = (geom.kernels(), geom.taps());
    let split = nk * taps;
    let channels = geom.raw_channels();
    let mut logits = Vec::with_capacity(h * w * split);
    let mut luma = Vec::with_capacity(h * w * nk);
    for px in raw.data().chunks(channels) {
        logits.extend_from_slice(&px[..split]);
        // 1 / sigmoid(x) = 1 + exp(-x)
        luma.extend(px[split..].iter().map(|&x| S::of(1.0 + (-x.f64()).exp())));
    }
    let logits = Tensor::new(vec![h, w, nk, taps], logits)?;
    let weights = softmax_axis(&logits, 3)?;
    let luma = Tensor::new(vec![h, w, nk], luma)?;
    luma.ensure_finite("luminance multipliers")?;
    Ok(FilterField { geom: *geom, weights, luma })
}

/// Pulls gradients w.r.t. the normalized parts back onto the raw logits.
pub fn normalize_filters_backward<S: Real>(field: &FilterField<S>, grads: &FilterGrads<S>) -> Result<Tensor<S>> {
    let op = "normalize_filters_backward";
    grads.weights.ensure_shape(op, field.weights.shape())?;
    grads.luma.ensure_shape(op, field.luma.shape())?;
    let geom = field.geom;
    let (h, w) = (field.height(), field.width());
    let (nk, taps) = (geom.kernels(), geom.taps());
    let dlogits = softmax_axis_backward(&field.weights, &grads.weights, 3)?;
    let mut raw = Vec::with_capacity(h * w * geom.raw_channels());
    for ((dw, l), dl) in dlogits
        .data()
        .chunks(nk * taps)
        .zip(field.luma.data().chunks(nk))
        .zip(grads.luma.data().chunks(nk))
    {
        raw.extend_from_slice(dw);
        // d(1 + e^-x)/dx = -e^-x = -(L - 1)
        raw.extend(l.iter().zip(dl).map(|(&l, &g)| S::of(-(l.f64() - 1.0) * g.f64())));
    }
    Tensor::new(vec![h, w, geom.raw_channels()], raw)
}

/// `Y = clamp(Z + R, 0, 1)`.
pub fn combine_residual<S: Real>(z: &Tensor<S>, residual: &Tensor<S>) -> Result<Tensor<S>> {
    residual.ensure_shape("combine_residual", z.shape())?;
    let data = z
        .data()
        .iter()
        .zip(residual.data())
        .map(|(&a, &b)| (a + b).max(S::zero()).min(S::one()))
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Gradient of [`combine_residual`]; identical for `Z` and `R`. Zero where the clamp is active.
pub fn combine_residual_backward<S: Real>(z: &Tensor<S>, residual: &Tensor<S>, grad_y: &Tensor<S>) -> Result<Tensor<S>> {
    residual.ensure_shape("combine_residual_backward", z.shape())?;
    grad_y.ensure_shape("combine_residual_backward", z.shape())?;
    let data = z
        .data()
        .iter()
        .zip(residual.data())
        .zip(grad_y.data())
        .map(|((&a, &b), &g)| {
            let s = a + b;
            if s >= S::zero() && s <= S::one() {
                g
            } else {
                S::zero()
            }
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Classical dynamic filters recovered by restricting the geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecialCase {
    /// 2D per-pixel upsampling kernels, no luminance term.
    SuperResolution,
    /// One 3D smoothing kernel per pixel, no upsampling, no luminance term.
    Denoise,
    /// One multiplier per pixel.
    Illumination,
}

impl std::str::FromStr for SpecialCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr" => Ok(SpecialCase::SuperResolution),
            "denoise" => Ok(SpecialCase::Denoise),
            "illum" => Ok(SpecialCase::Illumination),
            other => Err(Error::contract("SpecialCase", format!("unknown mode `{other}`"))),
        }
    }
}

/// Reduced geometry plus whether the luminance multipliers are pinned to one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reduction {
    pub geom: FilterGeometry,
    pub unit_luma: bool,
}

impl Reduction {
    /// Applies the luminance constraint to a field built for `self.geom`.
    pub fn constrain<S: Real>(&self, field: FilterField<S>) -> Result<FilterField<S>> {
        if field.geom != self.geom {
            return Err(Error::contract(
                "Reduction::constrain",
                format!("field geometry {:?} != reduced {:?}", field.geom, self.geom),
            ));
        }
        Ok(if self.unit_luma { field.with_unit_luma() } else { field })
    }
}

pub fn reduce_to_special_case(geom: &FilterGeometry, mode: SpecialCase) -> Reduction {
    let mut g = *geom;
    let unit_luma = match mode {
        SpecialCase::SuperResolution => {
            g.kt = 1;
            true
        }
        SpecialCase::Denoise => {
            g.r = 1;
            true
        }
        SpecialCase::Illumination => {
            g.r = 1;
            g.kh = 1;
            g.kw = 1;
            g.kt = 1;
            false
        }
    };
    Reduction { geom: g, unit_luma }
}
