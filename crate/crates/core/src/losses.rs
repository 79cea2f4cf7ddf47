//! Reconstruction, illumination-smoothness and combined training losses, each
//! returned together with its analytic gradient.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Guard added to the log-gradient magnitude in the smoothness weights.
pub const SMOOTHNESS_EPS: f64 = 1e-4;

/// Floor applied before taking the log of the guide frame.
pub const LOG_FLOOR: f64 = 1e-4;

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// On the filtered frame `Z`.
    pub recon: f64,
    /// On the luminance maps.
    pub smooth: f64,
    /// On the residual-refined output `Y`.
    pub enhance: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            smooth: 0.1,
            enhance: 1.0,
            eps: SMOOTHNESS_EPS,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.recon, self.smooth, self.enhance];
        if all.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::contract("LossWeights", format!("weights must be finite and >= 0, got {all:?}")));
        }
        if all.iter().all(|&l| l == 0.0) {
            return Err(Error::contract("LossWeights", "at least one weight must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::contract("LossWeights", "eps must be positive"));
        }
        Ok(())
    }
}

/// Per-channel horizontal (`v`) and vertical (`u`) smoothness weights, `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessWeights<S = f32> {
    pub v: Tensor<S>,
    pub u: Tensor<S>,
}

impl<S: Real> SmoothnessWeights<S> {
    /// Channel-averaged `(v, u)` planes, `H * W` each.
    pub fn channel_means(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.v.shape()[2];
        let mean = |t: &Tensor<S>| -> Vec<f64> {
            t.data()
                .chunks(c)
                .map(|px| px.iter().fold(0.0, |a, v| a + v.f64()) / c as f64)
                .collect()
        };
        (mean(&self.v), mean(&self.u))
    }

    /// Total channel-averaged weight over the neighbour pairs that exist:
    /// `v` without the last column, `u` without the last row.
    pub fn pair_weight_sum(&self) -> f64 {
        let (h, w) = (self.v.shape()[0], self.v.shape()[1]);
        let (vbar, ubar) = self.channel_means();
        let mut sum = 0.0;
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    sum += vbar[i * w + j];
                }
                if i + 1 < h {
                    sum += ubar[i * w + j];
                }
            }
        }
        sum
    }
}

#[inline]
fn unit_clamp(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Mean squared error between `pred` and `gt`, both clamped to `[0, 1]`.
/// The gradient is w.r.t. the unclamped `pred` and vanishes where the clamp is active.
pub fn recon_loss<S: Real>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    gt.ensure_shape("recon_loss", pred.shape())?;
    if pred.is_empty() {
        return Err(Error::contract("recon_loss", "empty tensors"));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (pf, gf) = (p.f64(), g.f64());
        let d = unit_clamp(pf) - unit_clamp(gf);
        sum += d * d;
        let inside = (0.0..=1.0).contains(&pf);
        grad.push(S::of(if inside { 2.0 * d / n } else { 0.0 }));
    }
    Ok((sum / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

fn hwc(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::contract(op, format!("expected [H, W, C], got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Inverse log-gradient weights of the guide frame; forward differences with a
/// replicated edge, so the last column (`v`) and last row (`u`) get `1 / eps`.
pub fn smoothness_weights<S: Real>(center: &Tensor<S>, eps: f64) -> Result<SmoothnessWeights<S>> {
    let (h, w, c) = hwc("smoothness_weights", center)?;
    if !(eps > 0.0) {
        return Err(Error::contract("smoothness_weights", "eps must be positive"));
    }
    let log: Vec<f64> = center.data().iter().map(|v| v.f64().max(LOG_FLOOR).ln()).collect();
    let at = |i: usize, j: usize, ch: usize| log[(i * w + j) * c + ch];
    let weight = |d: f64| S::of(1.0 / (d.abs().powf(1.2) + eps));
    let mut v = Vec::with_capacity(log.len());
    let mut u = Vec::with_capacity(log.len());
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let here = at(i, j, ch);
                let dx = if j + 1 < w { at(i, j + 1, ch) - here } else { 0.0 };
                let dy = if i + 1 < h { at(i + 1, j, ch) - here } else { 0.0 };
                v.push(weight(dx));
                u.push(weight(dy));
            }
        }
    }
    Ok(SmoothnessWeights {
        v: Tensor::new(vec![h, w, c], v)?,
        u: Tensor::new(vec![h, w, c], u)?,
    })
}

/// `sum_m sum_p [v_p (dx L_m)^2 + u_p (dy L_m)^2]` over `[H, W, M]` luminance maps.
pub fn smoothness_loss<S: Real>(luma: &Tensor<S>, weights: &SmoothnessWeights<S>) -> Result<(f64, Tensor<S>)> {
    let (h, w, maps) = hwc("smoothness_loss", luma)?;
    let (wh, ww, _) = hwc("smoothness_loss", &weights.v)?;
    if (wh, ww) != (h, w) || weights.u.shape() != weights.v.shape() {
        return Err(Error::contract(
            "smoothness_loss",
            format!("weights {:?} do not cover luminance maps {:?}", weights.v.shape(), luma.shape()),
        ));
    }
    let (vbar, ubar) = weights.channel_means();
    let l = luma.data();
    let at = |i: usize, j: usize, m: usize| (i * w + j) * maps + m;
    let mut grad = vec![0.0f64; l.len()];
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (vp, up) = (vbar[i * w + j], ubar[i * w + j]);
            for m in 0..maps {
                let here = l[at(i, j, m)].f64();
                if j + 1 < w {
                    let d = l[at(i, j + 1, m)].f64() - here;
                    total += vp * d * d;
                    grad[at(i, j + 1, m)] += 2.0 * vp * d;
                    grad[at(i, j, m)] -= 2.0 * vp * d;
                }
                if i + 1 < h {
                    let d = l[at(i + 1, j, m)].f64() - here;
                    total += up * d * d;
                    grad[at(i + 1, j, m)] += 2.0 * up * d;
                    grad[at(i, j, m)] -= 2.0 * up * d;
                }
            }
        }
    }
    Ok((total, Tensor::new(luma.shape().to_vec(), grad.into_iter().map(S::of).collect())?))
}

/// Per-term values and gradients of the weighted training objective.
#[derive(Clone, Debug)]
pub struct LossBreakdown<S> {
    pub recon: f64,
    /// Smoothness sum divided by the map count times [`SmoothnessWeights::pair_weight_sum`].
    pub smooth: f64,
    pub enhance: f64,
    pub total: f64,
    pub grad_z: Tensor<S>,
    pub grad_y: Tensor<S>,
    pub grad_luma: Tensor<S>,
}

/// Scalar values of the three terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub recon: f64,
    pub smooth: f64,
    pub enhance: f64,
    pub total: f64,
}

impl<S> LossBreakdown<S> {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            recon: self.recon,
            smooth: self.smooth,
            enhance: self.enhance,
            total: self.total,
        }
    }
}

/// `recon * L_r(Z) + smooth * L_s(L) / (M * sum(w)) + enhance * L_e(Y)`.
///
/// The smoothness sum is normalized to a weighted mean of squared differences
/// per map, so its scale matches the mean-squared reconstruction terms
/// independently of patch size, `r` and `eps`.
pub fn total_loss<S: Real>(
    z: &Tensor<S>,
    y: &Tensor<S>,
    gt: &Tensor<S>,
    luma: &Tensor<S>,
    smoothness: &SmoothnessWeights<S>,
    weights: &LossWeights,
) -> Result<LossBreakdown<S>> {
    weights.validate()?;
    let (recon, mut grad_z) = recon_loss(z, gt)?;
    let (enhance, mut grad_y) = recon_loss(y, gt)?;
    let (smooth_sum, mut grad_luma) = smoothness_loss(luma, smoothness)?;
    let pairs = smoothness.pair_weight_sum();
    let count = luma.shape()[2] as f64 * if pairs > 0.0 { pairs } else { 1.0 };
    let smooth = smooth_sum / count;
    grad_z.scale(S::of(weights.recon));
    grad_y.scale(S::of(weights.enhance));
    grad_luma.scale(S::of(weights.smooth / count));
    let total = weights.recon * recon + weights.smooth * smooth + weights.enhance * enhance;
    Ok(LossBreakdown {
        recon,
        smooth,
        enhance,
        total,
        grad_z,
        grad_y,
        grad_luma,
    })
}
