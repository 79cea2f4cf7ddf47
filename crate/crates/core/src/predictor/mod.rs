//! Encoder-decoder predictor shared by a filter head and a residual head.
//!
//! The input window is folded into channels (`C_in = T * C`). The trunk is a
//! stem convolution, `levels` stride-2 stages with residual blocks, bottleneck
//! blocks, and a pixel-shuffle decoder with concatenated skips. The filter head
//! emits `r*r*(K + 1)` logits per low-resolution pixel and the residual head
//! emits an `r`-times upsampled correction frame.

mod net;
mod pipeline;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dp3df::FilterGeometry;
use crate::error::{Error, Result};
use crate::io::{format_kv, parse_kv, read_container, write_container};
use crate::tensor::{Real, Tensor};

pub use net::{backward, fold_clip, forward, NetCache, NetOutput};
pub use pipeline::{loss_and_gradients, predict, Prediction};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
/// Extra gain on the two output convolutions; keeps the initial luminance
/// multipliers near `1 + e^0` instead of spreading over orders of magnitude.
pub const HEAD_INIT_SCALE: f64 = 0.1;

/// Named parameter (or gradient) tensors.
pub type ParamMap<S = f32> = BTreeMap<String, Tensor<S>>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Ablation {
    #[default]
    Full,
    NoTemporal,
    NoSpatial,
    NoResidual,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoTemporal, Ablation::NoSpatial, Ablation::NoResidual];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTemporal => "no_temporal",
            Ablation::NoSpatial => "no_spatial",
            Ablation::NoResidual => "no_residual",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "none" => Ok(Ablation::Full),
            "no_temporal" => Ok(Ablation::NoTemporal),
            "no_spatial" => Ok(Ablation::NoSpatial),
            "no_residual" => Ok(Ablation::NoResidual),
            other => Err(Error::contract(
                "Ablation",
                format!("unknown ablation `{other}` (full|no_temporal|no_spatial|no_residual)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    /// Geometry before ablation edits.
    pub geom: FilterGeometry,
    pub color_channels: usize,
    pub ablation: Ablation,
    /// Pins every luminance multiplier to one, bypassing the activation.
    pub unit_luma: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { cin: usize, cout: usize, k: usize, bias: bool },
    Norm { c: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl PredictorConfig {
    pub fn desk(geom: FilterGeometry) -> Self {
        PredictorConfig {
            levels: 3,
            channels: vec![16, 32, 64],
            blocks_per_level: 2,
            geom,
            color_channels: 3,
            ablation: Ablation::Full,
            unit_luma: false,
        }
    }

    pub fn tiny(geom: FilterGeometry) -> Self {
        PredictorConfig {
            levels: 1,
            channels: vec![8],
            blocks_per_level: 1,
            geom,
            color_channels: 3,
            ablation: Ablation::Full,
            unit_luma: false,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let op = "PredictorConfig";
        if self.levels == 0 {
            return Err(Error::contract(op, "levels must be >= 1"));
        }
        if self.channels.len() != self.levels {
            return Err(Error::contract(
                op,
                format!("{} channel entries for {} levels", self.channels.len(), self.levels),
            ));
        }
        if self.channels.contains(&0) || self.color_channels == 0 {
            return Err(Error::contract(op, "channel counts must be positive"));
        }
        self.geom.validate()?;
        self.filter_geometry().validate()
    }

    /// Geometry actually predicted, after ablation edits.
    pub fn filter_geometry(&self) -> FilterGeometry {
        let mut g = self.geom;
        match self.ablation {
            Ablation::NoTemporal => g.kt = 1,
            Ablation::NoSpatial => {
                g.kh = 1;
                g.kw = 1;
            }
            Ablation::Full | Ablation::NoResidual => {}
        }
        g
    }

    pub fn has_residual(&self) -> bool {
        self.ablation != Ablation::NoResidual
    }

    pub fn input_channels(&self) -> usize {
        self.geom.frames * self.color_channels
    }

    /// Input planes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    /// Channels of the skip tensor at resolution `H / 2^l`.
    fn skip_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.channels[0]
        } else {
            self.channels[l - 1]
        }
    }

    /// Every parameterized layer, in a fixed order.
    pub fn layers(&self) -> Vec<Layer> {
        let conv = |name: String, cin, cout, k, bias| Layer { name, kind: LayerKind::Conv { cin, cout, k, bias } };
        let norm = |name: String, c| Layer { name, kind: LayerKind::Norm { c } };
        let block = |out: &mut Vec<Layer>, prefix: String, c: usize| {
            out.push(conv(format!("{prefix}.conv1"), c, c, 3, false));
            out.push(norm(format!("{prefix}.norm1"), c));
            out.push(conv(format!("{prefix}.conv2"), c, c, 3, false));
            out.push(norm(format!("{prefix}.norm2"), c));
        };
        let c0 = self.channels[0];
        let mut out = vec![conv("stem".into(), self.input_channels(), c0, 3, true)];
        let mut prev = c0;
        for (l, &c) in self.channels.iter().enumerate() {
            out.push(conv(format!("enc{l}.down"), prev, c, 3, true));
            for b in 0..self.blocks_per_level {
                block(&mut out, format!("enc{l}.block{b}"), c);
            }
            prev = c;
        }
        for b in 0..self.blocks_per_level {
            block(&mut out, format!("bottleneck.block{b}"), prev);
        }
        for l in (0..self.levels).rev() {
            let target = self.skip_channels(l);
            out.push(conv(format!("dec{l}.up"), self.channels[l], 4 * target, 3, true));
            out.push(conv(format!("dec{l}.fuse"), 2 * target, target, 3, true));
        }
        let g = self.filter_geometry();
        out.push(conv("filter_head.conv1".into(), c0, c0, 3, true));
        out.push(conv("filter_head.conv2".into(), c0, c0, 3, true));
        out.push(conv("filter_head.out".into(), c0, g.raw_channels(), 1, true));
        if self.has_residual() {
            out.push(conv("residual_head.out".into(), c0, g.r * g.r * self.color_channels, 3, true));
        }
        out
    }

    /// Expected `(name, shape)` of every parameter tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in self.layers() {
            match layer.kind {
                LayerKind::Conv { cin, cout, k, bias } => {
                    out.push((format!("{}.weight", layer.name), vec![cout, cin, k, k]));
                    if bias {
                        out.push((format!("{}.bias", layer.name), vec![cout]));
                    }
                }
                LayerKind::Norm { c } => {
                    out.push((format!("{}.gamma", layer.name), vec![c]));
                    out.push((format!("{}.beta", layer.name), vec![c]));
                }
            }
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format_kv([
            ("levels", self.levels.to_string()),
            ("channels", channels.join(",")),
            ("blocks_per_level", self.blocks_per_level.to_string()),
            ("r", self.geom.r.to_string()),
            ("kh", self.geom.kh.to_string()),
            ("kw", self.geom.kw.to_string()),
            ("kt", self.geom.kt.to_string()),
            ("frames", self.geom.frames.to_string()),
            ("color_channels", self.color_channels.to_string()),
            ("ablation", self.ablation.to_string()),
            ("unit_luma", self.unit_luma.to_string()),
        ])
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format { kind: "predictor config", detail: format!("missing `{key}`") })
        };
        let num = |key: &str| -> Result<usize> {
            let v = get(key)?;
            v.parse().map_err(|_| Error::Format {
                kind: "predictor config",
                detail: format!("`{key}` = `{v}` is not an integer"),
            })
        };
        let channels = get("channels")?
            .split(',')
            .map(|c| {
                c.trim().parse().map_err(|_| Error::Format {
                    kind: "predictor config",
                    detail: format!("bad channel entry `{c}`"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        let cfg = PredictorConfig {
            levels: num("levels")?,
            channels,
            blocks_per_level: num("blocks_per_level")?,
            geom: FilterGeometry {
                r: num("r")?,
                kh: num("kh")?,
                kw: num("kw")?,
                kt: num("kt")?,
                frames: num("frames")?,
            },
            color_channels: num("color_channels")?,
            ablation: get("ablation")?.parse()?,
            unit_luma: match get("unit_luma").unwrap_or("false") {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::Format {
                        kind: "predictor config",
                        detail: format!("`unit_luma` = `{other}` is not a boolean"),
                    })
                }
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Kaiming gain for a leaky ReLU with negative slope `a`.
pub fn kaiming_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Draws `N(0, (gain / sqrt(fan_in))^2)` entries.
pub fn kaiming_normal<S: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let std = gain / (fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| S::of(dist.sample(rng)))
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so each tensor's stream depends only on its own name
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorWeights<S = f32> {
    params: ParamMap<S>,
}

impl<S: Real> PredictorWeights<S> {
    /// Kaiming-normal convolutions (output heads scaled by [`HEAD_INIT_SCALE`]),
    /// zero biases, unit-gamma zero-beta norms.
    pub fn init(config: &PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let gain = kaiming_gain(LEAKY_SLOPE);
        let mut params = ParamMap::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".weight") {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
                let g = if name.ends_with("head.out.weight") { gain * HEAD_INIT_SCALE } else { gain };
                kaiming_normal(&shape, shape[1] * shape[2] * shape[3], g, &mut rng)
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, S::one())
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Ok(PredictorWeights { params })
    }

    /// Validates names and shapes against `config`.
    pub fn from_params(config: &PredictorConfig, params: ParamMap<S>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::contract("PredictorWeights", format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(
                    "PredictorWeights",
                    format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            t.ensure_finite(name)?;
        }
        if params.len() != expected.len() {
            let extra: Vec<_> = params.keys().filter(|k| !expected.iter().any(|(n, _)| n == *k)).collect();
            return Err(Error::contract("PredictorWeights", format!("unexpected parameters {extra:?}")));
        }
        Ok(PredictorWeights { params })
    }

    pub fn params(&self) -> &ParamMap<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap<S> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamMap<S> {
        self.params
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract("PredictorWeights", format!("no parameter `{name}`")))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamMap<S> {
        self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect()
    }

    pub fn cast<T: Real>(&self) -> PredictorWeights<T> {
        PredictorWeights {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Zeroes the gradients of every parameter whose name starts with one of `frozen`.
pub fn mask_gradients<S: Real>(grads: &mut ParamMap<S>, frozen: &[&str]) {
    for (name, g) in grads.iter_mut() {
        if frozen.iter().any(|p| name.starts_with(p)) {
            g.data_mut().fill(S::zero());
        }
    }
}

/// Sidecar holding the predictor configuration of a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}

pub fn save_checkpoint(path: &Path, config: &PredictorConfig, weights: &PredictorWeights<f32>) -> Result<()> {
    write_container(path, weights.params())?;
    let cfg = config_path(path);
    std::fs::write(&cfg, config.to_kv()).map_err(|e| Error::io(&cfg, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(PredictorConfig, PredictorWeights<f32>)> {
    let cfg_path = config_path(path);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config = PredictorConfig::from_kv(&text)?;
    let weights = PredictorWeights::from_params(&config, read_container(path)?)?;
    Ok((config, weights))
}
