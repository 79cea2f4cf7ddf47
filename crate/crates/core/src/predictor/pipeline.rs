use super::net::{backward, forward};
use super::{ParamMap, PredictorConfig, PredictorWeights};
use crate::dp3df::{
    apply_dp3df, apply_dp3df_backward_filters, combine_residual, combine_residual_backward, normalize_filters,
    normalize_filters_backward, FilterField,
};
use crate::error::{Error, Result};
use crate::losses::{smoothness_weights, total_loss, LossTerms, LossWeights};
use crate::tensor::{Real, Tensor};

/// Everything the model produces for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S> {
    pub field: FilterField<S>,
    /// Filtered frame `[rH, rW, C]`.
    pub z: Tensor<S>,
    pub residual: Option<Tensor<S>>,
    /// `clamp(Z + R, 0, 1)`
    pub y: Tensor<S>,
}

fn center_frame<S: Real>(clip: &Tensor<S>) -> Result<Tensor<S>> {
    let s = clip.shape();
    let t = (s[0] - 1) / 2;
    let n = s[1] * s[2] * s[3];
    Tensor::new(s[1..].to_vec(), clip.data()[t * n..(t + 1) * n].to_vec())
}

pub fn predict<S: Real>(config: &PredictorConfig, weights: &PredictorWeights<S>, clip: &Tensor<S>) -> Result<Prediction<S>> {
    let (out, _) = forward(config, weights, clip)?;
    assemble(config, clip, out.raw, out.residual)
}

fn assemble<S: Real>(
    config: &PredictorConfig,
    clip: &Tensor<S>,
    raw: Tensor<S>,
    residual: Option<Tensor<S>>,
) -> Result<Prediction<S>> {
    let mut field = normalize_filters(&raw, &config.filter_geometry())?;
    if config.unit_luma {
        // L - 1 = 0 also zeroes the luminance-logit gradient in the backward pass
        field = field.with_unit_luma();
    }
    let z = apply_dp3df(clip, &field)?;
    let y = match &residual {
        Some(r) => combine_residual(&z, r)?,
        None => combine_residual(&z, &Tensor::zeros(z.shape()))?,
    };
    Ok(Prediction { field, z, residual, y })
}

/// Training objective for one `(clip, ground truth)` pair and its parameter gradients.
pub fn loss_and_gradients<S: Real>(
    config: &PredictorConfig,
    weights: &PredictorWeights<S>,
    clip: &Tensor<S>,
    gt: &Tensor<S>,
    lambdas: &LossWeights,
) -> Result<(LossTerms, ParamMap<S>)> {
    let (out, cache) = forward(config, weights, clip)?;
    let pred = assemble(config, clip, out.raw, out.residual)?;
    let guide = smoothness_weights(&center_frame(clip)?, lambdas.eps)?;
    let lb = total_loss(&pred.z, &pred.y, gt, pred.field.luma(), &guide, lambdas)?;
    if !lb.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", lb.total)));
    }
    let zero;
    let residual = match &pred.residual {
        Some(r) => r,
        None => {
            zero = Tensor::zeros(pred.z.shape());
            &zero
        }
    };
    let g_fused = combine_residual_backward(&pred.z, residual, &lb.grad_y)?;
    let mut g_z = lb.grad_z.clone();
    g_z.add_assign(&g_fused)?;
    let mut fg = apply_dp3df_backward_filters(clip, &pred.field, &g_z)?;
    fg.luma.add_assign(&lb.grad_luma)?;
    let g_raw = normalize_filters_backward(&pred.field, &fg)?;
    let g_res = pred.residual.as_ref().map(|_| g_fused);
    let grads = backward(config, weights, &cache, &g_raw, g_res.as_ref())?;
    Ok((lb.terms(), grads))
}
