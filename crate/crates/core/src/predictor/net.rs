use super::{ParamMap, PredictorConfig, PredictorWeights, LEAKY_SLOPE, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward, instance_norm, instance_norm_backward, leaky_relu, leaky_relu_backward,
    pixel_shuffle, pixel_unshuffle, InstanceNormCache, Padding, Real, Tensor,
};

/// Network outputs before any filter activation.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput<S> {
    /// `[H, W, r*r*(K + 1)]`
    pub raw: Tensor<S>,
    /// `[rH, rW, C]`; absent for the `no_residual` ablation.
    pub residual: Option<Tensor<S>>,
}

struct BlockRec<S> {
    prefix: String,
    x: Tensor<S>,
    norm1: InstanceNormCache<S>,
    n1: Tensor<S>,
    h1: Tensor<S>,
    norm2: InstanceNormCache<S>,
}

struct DownRec<S> {
    input: Tensor<S>,
    pre: Tensor<S>,
    blocks: Vec<BlockRec<S>>,
}

struct UpRec<S> {
    level: usize,
    input: Tensor<S>,
    shuffled: Tensor<S>,
    cat: Tensor<S>,
    pre: Tensor<S>,
}

/// Intermediate activations kept for [`backward`].
pub struct NetCache<S> {
    input: Tensor<S>,
    stem_pre: Tensor<S>,
    downs: Vec<DownRec<S>>,
    bottleneck: Vec<BlockRec<S>>,
    ups: Vec<UpRec<S>>,
    feat: Tensor<S>,
    head_pre1: Tensor<S>,
    head_h1: Tensor<S>,
    head_pre2: Tensor<S>,
    head_h2: Tensor<S>,
    plane: (usize, usize),
}

/// `[T, H, W, C]` clip to a `[1, T*C, H, W]` feature map.
pub fn fold_clip<S: Real>(clip: &Tensor<S>) -> Result<Tensor<S>> {
    if clip.rank() != 4 {
        return Err(Error::contract("fold_clip", format!("clip must be [T, H, W, C], got {:?}", clip.shape())));
    }
    let s = clip.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    clip.permute(&[0, 3, 1, 2])?.reshape(&[1, t * c, h, w])
}

fn conv<S: Real>(w: &PredictorWeights<S>, name: &str, x: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    let bias = w.params().get(&format!("{name}.bias"));
    conv2d(x, w.get(&format!("{name}.weight"))?, bias, stride, Padding::Zero)
}

fn accumulate<S: Real>(grads: &mut ParamMap<S>, name: String, g: &Tensor<S>) -> Result<()> {
    match grads.get_mut(&name) {
        Some(acc) => acc.add_assign(g),
        None => {
            grads.insert(name, g.clone());
            Ok(())
        }
    }
}

fn conv_back<S: Real>(
    w: &PredictorWeights<S>,
    grads: &mut ParamMap<S>,
    name: &str,
    x: &Tensor<S>,
    stride: usize,
    g: &Tensor<S>,
    need_input: bool,
) -> Result<Option<Tensor<S>>> {
    let wname = format!("{name}.weight");
    let r = conv2d_backward(x, w.get(&wname)?, stride, Padding::Zero, g, need_input)?;
    accumulate(grads, wname, &r.weight)?;
    let bname = format!("{name}.bias");
    if w.params().contains_key(&bname) {
        accumulate(grads, bname, &r.bias)?;
    }
    Ok(r.input)
}

fn norm<S: Real>(w: &PredictorWeights<S>, name: &str, x: &Tensor<S>) -> Result<(Tensor<S>, InstanceNormCache<S>)> {
    let gamma = w.get(&format!("{name}.gamma"))?;
    let beta = w.get(&format!("{name}.beta"))?;
    instance_norm(x, NORM_EPS, Some((gamma, beta)))
}

fn norm_back<S: Real>(
    w: &PredictorWeights<S>,
    grads: &mut ParamMap<S>,
    name: &str,
    cache: &InstanceNormCache<S>,
    g: &Tensor<S>,
) -> Result<Tensor<S>> {
    let r = instance_norm_backward(cache, Some(w.get(&format!("{name}.gamma"))?), g)?;
    if let (Some(gg), Some(gb)) = (r.gamma, r.beta) {
        accumulate(grads, format!("{name}.gamma"), &gg)?;
        accumulate(grads, format!("{name}.beta"), &gb)?;
    }
    Ok(r.input)
}

fn block_forward<S: Real>(w: &PredictorWeights<S>, prefix: String, x: Tensor<S>) -> Result<(Tensor<S>, BlockRec<S>)> {
    let a1 = conv(w, &format!("{prefix}.conv1"), &x, 1)?;
    let (n1, norm1) = norm(w, &format!("{prefix}.norm1"), &a1)?;
    let h1 = leaky_relu(&n1, LEAKY_SLOPE);
    let a2 = conv(w, &format!("{prefix}.conv2"), &h1, 1)?;
    let (mut out, norm2) = norm(w, &format!("{prefix}.norm2"), &a2)?;
    out.add_assign(&x)?;
    Ok((out, BlockRec { prefix, x, norm1, n1, h1, norm2 }))
}

fn block_backward<S: Real>(
    w: &PredictorWeights<S>,
    grads: &mut ParamMap<S>,
    rec: &BlockRec<S>,
    g_out: Tensor<S>,
) -> Result<Tensor<S>> {
    let p = &rec.prefix;
    let g_a2 = norm_back(w, grads, &format!("{p}.norm2"), &rec.norm2, &g_out)?;
    let g_h1 = conv_back(w, grads, &format!("{p}.conv2"), &rec.h1, 1, &g_a2, true)?.expect("input grad");
    let g_n1 = leaky_relu_backward(&rec.n1, &g_h1, LEAKY_SLOPE)?;
    let g_a1 = norm_back(w, grads, &format!("{p}.norm1"), &rec.norm1, &g_n1)?;
    let mut g_x = conv_back(w, grads, &format!("{p}.conv1"), &rec.x, 1, &g_a1, true)?.expect("input grad");
    g_x.add_assign(&g_out)?;
    Ok(g_x)
}

fn concat_channels<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != 1 || sb[0] != 1 || sa[2..] != sb[2..] {
        return Err(Error::contract("concat_channels", format!("{sa:?} vs {sb:?}")));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![1, sa[1] + sb[1], sa[2], sa[3]], data)
}

fn split_channels<S: Real>(g: &Tensor<S>, first: usize) -> Result<(Tensor<S>, Tensor<S>)> {
    let s = g.shape();
    let plane = s[2] * s[3];
    let (a, b) = g.data().split_at(first * plane);
    Ok((
        Tensor::new(vec![1, first, s[2], s[3]], a.to_vec())?,
        Tensor::new(vec![1, s[1] - first, s[2], s[3]], b.to_vec())?,
    ))
}

/// `[1, C, H, W]` to `[H, W, C]`.
fn to_hwc<S: Real>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape().to_vec();
    x.permute(&[0, 2, 3, 1])?.reshape(&[s[2], s[3], s[1]])
}

/// `[H, W, C]` to `[1, C, H, W]`.
fn from_hwc<S: Real>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape().to_vec();
    x.permute(&[2, 0, 1])?.reshape(&[1, s[2], s[0], s[1]])
}

/// Runs the trunk and both heads on a `[T, H, W, C]` clip.
pub fn forward<S: Real>(
    config: &PredictorConfig,
    weights: &PredictorWeights<S>,
    clip: &Tensor<S>,
) -> Result<(NetOutput<S>, NetCache<S>)> {
    config.validate()?;
    let s = clip.shape();
    if s.len() != 4 || s[0] != config.geom.frames || s[3] != config.color_channels {
        return Err(Error::contract(
            "predictor::forward",
            format!(
                "clip {:?} vs expected [{}, H, W, {}]",
                s, config.geom.frames, config.color_channels
            ),
        ));
    }
    let m = config.size_multiple();
    if !s[1].is_multiple_of(m) || !s[2].is_multiple_of(m) || s[1] == 0 || s[2] == 0 {
        return Err(Error::contract(
            "predictor::forward",
            format!("plane {}x{} must be a positive multiple of {m}", s[1], s[2]),
        ));
    }
    let input = fold_clip(clip)?;
    let stem_pre = conv(weights, "stem", &input, 1)?;
    let mut h = leaky_relu(&stem_pre, LEAKY_SLOPE);
    let mut skips = vec![h.clone()];
    let mut downs = Vec::with_capacity(config.levels);
    for l in 0..config.levels {
        let pre = conv(weights, &format!("enc{l}.down"), &h, 2)?;
        let mut x = leaky_relu(&pre, LEAKY_SLOPE);
        let mut blocks = Vec::with_capacity(config.blocks_per_level);
        for b in 0..config.blocks_per_level {
            let (out, rec) = block_forward(weights, format!("enc{l}.block{b}"), x)?;
            blocks.push(rec);
            x = out;
        }
        downs.push(DownRec { input: h, pre, blocks });
        if l + 1 < config.levels {
            skips.push(x.clone());
        }
        h = x;
    }
    let mut bottleneck = Vec::with_capacity(config.blocks_per_level);
    for b in 0..config.blocks_per_level {
        let (out, rec) = block_forward(weights, format!("bottleneck.block{b}"), h)?;
        bottleneck.push(rec);
        h = out;
    }
    let mut ups = Vec::with_capacity(config.levels);
    for l in (0..config.levels).rev() {
        let u = conv(weights, &format!("dec{l}.up"), &h, 1)?;
        let shuffled = pixel_shuffle(&u, 2)?;
        let cat = concat_channels(&leaky_relu(&shuffled, LEAKY_SLOPE), &skips[l])?;
        let pre = conv(weights, &format!("dec{l}.fuse"), &cat, 1)?;
        let next = leaky_relu(&pre, LEAKY_SLOPE);
        ups.push(UpRec { level: l, input: h, shuffled, cat, pre });
        h = next;
    }
    let feat = h;
    let head_pre1 = conv(weights, "filter_head.conv1", &feat, 1)?;
    let head_h1 = leaky_relu(&head_pre1, LEAKY_SLOPE);
    let head_pre2 = conv(weights, "filter_head.conv2", &head_h1, 1)?;
    let head_h2 = leaky_relu(&head_pre2, LEAKY_SLOPE);
    let raw = to_hwc(&conv(weights, "filter_head.out", &head_h2, 1)?)?;
    let residual = if config.has_residual() {
        let q = conv(weights, "residual_head.out", &feat, 1)?;
        Some(to_hwc(&pixel_shuffle(&q, config.geom.r)?)?)
    } else {
        None
    };
    raw.ensure_finite("filter logits")?;
    let cache = NetCache {
        input,
        stem_pre,
        downs,
        bottleneck,
        ups,
        feat,
        head_pre1,
        head_h1,
        head_pre2,
        head_h2,
        plane: (s[1], s[2]),
    };
    Ok((NetOutput { raw, residual }, cache))
}

/// Parameter gradients given upstream gradients of both outputs.
pub fn backward<S: Real>(
    config: &PredictorConfig,
    weights: &PredictorWeights<S>,
    cache: &NetCache<S>,
    grad_raw: &Tensor<S>,
    grad_residual: Option<&Tensor<S>>,
) -> Result<ParamMap<S>> {
    let (h, w) = cache.plane;
    let g = config.filter_geometry();
    grad_raw.ensure_shape("predictor::backward", &[h, w, g.raw_channels()])?;
    let mut grads = weights.zeros_like();

    let g_out = from_hwc(grad_raw)?;
    let g_h2 = conv_back(weights, &mut grads, "filter_head.out", &cache.head_h2, 1, &g_out, true)?.expect("input grad");
    let g_pre2 = leaky_relu_backward(&cache.head_pre2, &g_h2, LEAKY_SLOPE)?;
    let g_h1 = conv_back(weights, &mut grads, "filter_head.conv2", &cache.head_h1, 1, &g_pre2, true)?.expect("input grad");
    let g_pre1 = leaky_relu_backward(&cache.head_pre1, &g_h1, LEAKY_SLOPE)?;
    let mut g_feat = conv_back(weights, &mut grads, "filter_head.conv1", &cache.feat, 1, &g_pre1, true)?.expect("input grad");

    match (config.has_residual(), grad_residual) {
        (true, Some(gr)) => {
            gr.ensure_shape("predictor::backward", &[h * g.r, w * g.r, config.color_channels])?;
            let gq = pixel_unshuffle(&from_hwc(gr)?, g.r)?;
            let gf = conv_back(weights, &mut grads, "residual_head.out", &cache.feat, 1, &gq, true)?.expect("input grad");
            g_feat.add_assign(&gf)?;
        }
        (false, Some(_)) => {
            return Err(Error::contract("predictor::backward", "residual gradient given without a residual head"))
        }
        _ => {}
    }

    let mut skip_grads: Vec<Option<Tensor<S>>> = (0..config.levels).map(|_| None).collect();
    let mut g_h = g_feat;
    for up in cache.ups.iter().rev() {
        let l = up.level;
        let g_pre = leaky_relu_backward(&up.pre, &g_h, LEAKY_SLOPE)?;
        let g_cat = conv_back(weights, &mut grads, &format!("dec{l}.fuse"), &up.cat, 1, &g_pre, true)?.expect("input grad");
        let (g_act, g_skip) = split_channels(&g_cat, config.skip_channels(l))?;
        skip_grads[l] = Some(g_skip);
        let g_shuffled = leaky_relu_backward(&up.shuffled, &g_act, LEAKY_SLOPE)?;
        let g_u = pixel_unshuffle(&g_shuffled, 2)?;
        g_h = conv_back(weights, &mut grads, &format!("dec{l}.up"), &up.input, 1, &g_u, true)?.expect("input grad");
    }
    for rec in cache.bottleneck.iter().rev() {
        g_h = block_backward(weights, &mut grads, rec, g_h)?;
    }
    for l in (0..config.levels).rev() {
        if l + 1 < config.levels {
            if let Some(gs) = skip_grads[l + 1].take() {
                g_h.add_assign(&gs)?;
            }
        }
        let down = &cache.downs[l];
        for rec in down.blocks.iter().rev() {
            g_h = block_backward(weights, &mut grads, rec, g_h)?;
        }
        let g_pre = leaky_relu_backward(&down.pre, &g_h, LEAKY_SLOPE)?;
        g_h = conv_back(weights, &mut grads, &format!("enc{l}.down"), &down.input, 2, &g_pre, true)?.expect("input grad");
    }
    if let Some(gs) = skip_grads[0].take() {
        g_h.add_assign(&gs)?;
    }
    let g_stem = leaky_relu_backward(&cache.stem_pre, &g_h, LEAKY_SLOPE)?;
    conv_back(weights, &mut grads, "stem", &cache.input, 1, &g_stem, false)?;
    Ok(grads)
}
