//! Procedural stand-in for captured low-light video: clean high-resolution
//! sequences with global and local motion, their degraded low-resolution
//! counterparts, windowing, and the on-disk dataset layout.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{format_kv, parse_kv, quantize_value, read_ppm, write_ppm};
use crate::tensor::Tensor;

/// Degradation model: box downsample, exposure and gamma, then shot + read noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeParams {
    pub r: usize,
    pub exposure: f64,
    pub gamma: f64,
    pub read_noise: f64,
    pub shot_noise: f64,
    pub seed: u64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            r: 4,
            exposure: 0.2,
            gamma: 2.0,
            read_noise: 0.01,
            shot_noise: 0.02,
            seed: 0,
        }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        let op = "DegradeParams";
        if self.r == 0 {
            return Err(Error::contract(op, "r must be >= 1"));
        }
        if !(self.exposure > 0.0 && self.exposure <= 1.0) {
            return Err(Error::contract(op, format!("exposure {} not in (0, 1]", self.exposure)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::contract(op, "gamma must be positive"));
        }
        if !(self.read_noise >= 0.0 && self.shot_noise >= 0.0) {
            return Err(Error::contract(op, "noise sigmas must be >= 0"));
        }
        Ok(())
    }

    pub fn noiseless(&self) -> Self {
        DegradeParams {
            read_noise: 0.0,
            shot_noise: 0.0,
            ..*self
        }
    }
}

/// Average over non-overlapping `r x r` blocks of an `[H, W, C]` frame.
pub fn box_downsample(frame: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = hwc("box_downsample", frame)?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::contract("box_downsample", format!("{h}x{w} not divisible by r = {r}")));
    }
    let (lh, lw) = (h / r, w / r);
    let norm = 1.0 / (r * r) as f64;
    let mut out = Vec::with_capacity(lh * lw * c);
    for i in 0..lh {
        for j in 0..lw {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for a in 0..r {
                    for b in 0..r {
                        acc += frame.data()[((i * r + a) * w + j * r + b) * c + ch] as f64;
                    }
                }
                out.push((acc * norm) as f32);
            }
        }
    }
    Tensor::new(vec![lh, lw, c], out)
}

fn hwc(op: &'static str, t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::contract(op, format!("expected [H, W, C], got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Applies the tone curve `(exposure * x)^gamma`.
pub fn darken(x: f64, params: &DegradeParams) -> f64 {
    (params.exposure * x).max(0.0).powf(params.gamma)
}

/// Degrades a clean frame into a low-resolution, dark, noisy one.
pub fn degrade<R: Rng>(hnn: &Tensor<f32>, params: &DegradeParams, rng: &mut R) -> Result<Tensor<f32>> {
    params.validate()?;
    let small = box_downsample(hnn, params.r)?;
    let noisy = params.read_noise > 0.0 || params.shot_noise > 0.0;
    Ok(small.map(|x| {
        let y = darken(x as f64, params);
        let v = if noisy {
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            y + params.shot_noise * y.sqrt() * n1 + params.read_noise * n2
        } else {
            y
        };
        v.clamp(0.0, 1.0) as f32
    }))
}

/// Stream seed for one frame of one sequence.
pub fn frame_seed(seed: u64, sequence: usize, frame: usize) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(sequence as u64 + 1) ^ ((frame as u64) << 32);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frame indices `t - n ..= t + n`, clamped to the sequence.
pub fn window_indices(len: usize, t: usize, n: usize) -> Vec<usize> {
    (0..=2 * n)
        .map(|k| (t + k).saturating_sub(n).min(len.saturating_sub(1)))
        .collect()
}

/// Stacks the `2n + 1` frames around `t` into a `[T, H, W, C]` clip.
pub fn window(frames: &[Tensor<f32>], t: usize, n: usize) -> Result<Tensor<f32>> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if t >= frames.len() {
        return Err(Error::contract("window", format!("t = {t} outside {} frames", frames.len())));
    }
    let shape = frames[0].shape().to_vec();
    let idx = window_indices(frames.len(), t, n);
    let mut data = Vec::with_capacity(idx.len() * frames[0].len());
    for &i in &idx {
        frames[i].ensure_shape("window", &shape)?;
        data.extend_from_slice(frames[i].data());
    }
    let mut clip_shape = vec![idx.len()];
    clip_shape.extend(shape);
    Tensor::new(clip_shape, data)
}

/// One paired sequence held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub lln: Vec<Tensor<f32>>,
    pub hnn: Vec<Tensor<f32>>,
    pub fps: f64,
    pub params: DegradeParams,
    /// Global scene motion in high-resolution pixels per frame `(dx, dy)`.
    pub velocity: (i64, i64),
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.hnn.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hnn.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lln.len() != self.hnn.len() {
            return Err(Error::contract(
                "Sequence",
                format!("{} LLN frames vs {} HNN frames", self.lln.len(), self.hnn.len()),
            ));
        }
        let r = self.params.r;
        for (l, h) in self.lln.iter().zip(&self.hnn) {
            let (lh, lw, lc) = hwc("Sequence", l)?;
            if h.shape() != [lh * r, lw * r, lc] {
                return Err(Error::contract(
                    "Sequence",
                    format!("HNN {:?} is not r = {r} times LLN {:?}", h.shape(), l.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Shape of a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub sequences: usize,
    pub frames: usize,
    /// High-resolution frame side; must be divisible by `params.r`.
    pub size: usize,
    pub params: DegradeParams,
}

fn hash2(x: i64, y: i64, salt: u64) -> f64 {
    let mut z = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ salt.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Lattice value noise on the infinite plane, `cell` pixels per lattice step.
fn value_noise(x: f64, y: f64, cell: f64, salt: u64) -> f64 {
    let (fx, fy) = (x / cell, y / cell);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (smooth(fx - x0), smooth(fy - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = hash2(ix, iy, salt);
    let b = hash2(ix + 1, iy, salt);
    let c = hash2(ix, iy + 1, salt);
    let d = hash2(ix + 1, iy + 1, salt);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

#[derive(Clone, Debug)]
struct Blob {
    disc: bool,
    center: (f64, f64),
    half: f64,
    velocity: (f64, f64),
    color: [f64; 3],
}

#[derive(Clone, Debug)]
struct Scene {
    salt: u64,
    base: [f64; 3],
    tint: [f64; 3],
    ramp: (f64, f64),
    texture: f64,
    velocity: (i64, i64),
    blobs: Vec<Blob>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let color = |rng: &mut ChaCha8Rng| [rng.random_range(0.15..0.9), rng.random_range(0.15..0.9), rng.random_range(0.15..0.9)];
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let s = size as f64;
        let blobs = (0..rng.random_range(1..=3))
            .map(|_| Blob {
                disc: rng.random_bool(0.5),
                center: (rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s)),
                half: rng.random_range(0.04 * s..0.09 * s),
                velocity: (rng.random_range(-3..=3) as f64, rng.random_range(-3..=3) as f64),
                color: color(rng),
            })
            .collect();
        Scene {
            salt: rng.random(),
            base: color(rng),
            tint: color(rng),
            ramp: (angle.cos() / s, angle.sin() / s),
            texture: rng.random_range(0.25..0.45),
            velocity: (rng.random_range(-2..=2), rng.random_range(-2..=2)),
            blobs,
        }
    }

    fn pixel(&self, x: f64, y: f64, t: f64) -> [f64; 3] {
        // scene coordinates move with the global velocity
        let (sx, sy) = (x - self.velocity.0 as f64 * t, y - self.velocity.1 as f64 * t);
        let ramp = (sx * self.ramp.0 + sy * self.ramp.1).clamp(-1.0, 1.0) * 0.5 + 0.5;
        let tex = value_noise(sx, sy, 20.0, self.salt) * 0.4
            + value_noise(sx, sy, 6.0, self.salt ^ 1) * 0.35
            + value_noise(sx, sy, 2.0, self.salt ^ 2) * 0.25;
        let mut px = [0.0; 3];
        for c in 0..3 {
            let bg = self.base[c] + (self.tint[c] - self.base[c]) * ramp;
            px[c] = bg * (1.0 - self.texture) + self.texture * tex * (0.5 + 0.5 * bg);
        }
        for b in &self.blobs {
            let cx = b.center.0 + b.velocity.0 * t;
            let cy = b.center.1 + b.velocity.1 * t;
            let (dx, dy) = (sx - cx, sy - cy);
            let dist = if b.disc {
                (dx * dx + dy * dy).sqrt() - b.half
            } else {
                dx.abs().max(dy.abs()) - b.half
            };
            let cover = (0.5 - dist).clamp(0.0, 1.0);
            if cover > 0.0 {
                let shade = 0.85 + 0.15 * value_noise(dx, dy, 5.0, self.salt ^ 3);
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - cover) + b.color[c] * shade * cover;
                }
            }
        }
        px.map(|v| v.clamp(0.02, 0.98))
    }

    fn render(&self, size: usize, t: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let px = self.pixel(x as f64 + 0.5, y as f64 + 0.5, t as f64);
                data.extend(px.iter().map(|&v| quantize_value(v as f32)));
            }
        }
        Tensor::new(vec![size, size, 3], data).expect("render shape")
    }
}

/// Generates paired sequences. Frames are quantized to 8 bits so that the PPM
/// files written by [`save_dataset`] reproduce them exactly.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Vec<Sequence>> {
    spec.params.validate()?;
    if spec.sequences == 0 || spec.frames == 0 {
        return Err(Error::EmptyDataset);
    }
    if spec.size == 0 || !spec.size.is_multiple_of(spec.params.r) {
        return Err(Error::contract(
            "make_dataset",
            format!("size {} not divisible by r = {}", spec.size, spec.params.r),
        ));
    }
    (0..spec.sequences)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.params.seed, s, usize::MAX >> 1));
            let scene = Scene::random(&mut rng, spec.size);
            let mut hnn = Vec::with_capacity(spec.frames);
            let mut lln = Vec::with_capacity(spec.frames);
            for t in 0..spec.frames {
                let clean = scene.render(spec.size, t);
                let mut frng = ChaCha8Rng::seed_from_u64(frame_seed(spec.params.seed, s, t));
                let dark = degrade(&clean, &spec.params, &mut frng)?.map(quantize_value);
                hnn.push(clean);
                lln.push(dark);
            }
            Ok(Sequence {
                lln,
                hnn,
                fps: 30.0,
                params: spec.params,
                velocity: scene.velocity,
            })
        })
        .collect()
}

fn frame_path(dir: &Path, kind: &str, t: usize) -> std::path::PathBuf {
    dir.join(kind).join(format!("frame_{t:04}.ppm"))
}

/// Writes `seq_XXXX/{lln,hnn}/frame_NNNN.ppm` and `seq_XXXX/meta.txt`.
pub fn save_dataset(root: &Path, sequences: &[Sequence]) -> Result<()> {
    for (s, seq) in sequences.iter().enumerate() {
        seq.validate()?;
        let dir = root.join(format!("seq_{s:04}"));
        for kind in ["lln", "hnn"] {
            fs::create_dir_all(dir.join(kind)).map_err(|e| Error::io(dir.join(kind), e))?;
        }
        for (t, (l, h)) in seq.lln.iter().zip(&seq.hnn).enumerate() {
            write_ppm(&frame_path(&dir, "lln", t), l)?;
            write_ppm(&frame_path(&dir, "hnn", t), h)?;
        }
        let p = &seq.params;
        let meta = format_kv([
            ("r", p.r.to_string()),
            ("fps", seq.fps.to_string()),
            ("frames", seq.len().to_string()),
            ("exposure", p.exposure.to_string()),
            ("gamma", p.gamma.to_string()),
            ("read_noise", p.read_noise.to_string()),
            ("shot_noise", p.shot_noise.to_string()),
            ("seed", p.seed.to_string()),
            ("velocity", format!("{},{}", seq.velocity.0, seq.velocity.1)),
        ]);
        let path = dir.join("meta.txt");
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn meta_value<T: std::str::FromStr>(kv: &[(String, String)], key: &str, path: &Path) -> Result<T> {
    let raw = kv
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format {
            kind: "meta.txt",
            detail: format!("{}: missing `{key}`", path.display()),
        })?;
    raw.parse().map_err(|_| Error::Format {
        kind: "meta.txt",
        detail: format!("{}: bad value `{raw}` for `{key}`", path.display()),
    })
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let path = dir.join("meta.txt");
    let kv = parse_kv(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let frames: usize = meta_value(&kv, "frames", &path)?;
    let velocity: String = meta_value(&kv, "velocity", &path).unwrap_or_else(|_| "0,0".into());
    let (vx, vy) = velocity.split_once(',').unwrap_or(("0", "0"));
    let params = DegradeParams {
        r: meta_value(&kv, "r", &path)?,
        exposure: meta_value(&kv, "exposure", &path)?,
        gamma: meta_value(&kv, "gamma", &path)?,
        read_noise: meta_value(&kv, "read_noise", &path)?,
        shot_noise: meta_value(&kv, "shot_noise", &path)?,
        seed: meta_value(&kv, "seed", &path)?,
    };
    let mut lln = Vec::with_capacity(frames);
    let mut hnn = Vec::with_capacity(frames);
    for t in 0..frames {
        lln.push(read_ppm(&frame_path(dir, "lln", t))?);
        hnn.push(read_ppm(&frame_path(dir, "hnn", t))?);
    }
    let seq = Sequence {
        lln,
        hnn,
        fps: meta_value(&kv, "fps", &path)?,
        params,
        velocity: (vx.trim().parse().unwrap_or(0), vy.trim().parse().unwrap_or(0)),
    };
    seq.validate()?;
    Ok(seq)
}

/// Loads every `seq_*` directory under `root` in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seq_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

fn cubic(x: f64) -> f64 {
    // Keys kernel, a = -0.5
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic upsampling of an `[H, W, C]` frame by `r`, replicate borders.
pub fn bicubic_upsample(frame: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = hwc("bicubic_upsample", frame)?;
    if r == 0 {
        return Err(Error::contract("bicubic_upsample", "r must be >= 1"));
    }
    let taps = |out: usize, extent: usize| -> [(usize, f64); 4] {
        let src = (out as f64 + 0.5) / r as f64 - 0.5;
        let base = src.floor();
        let mut t = [(0usize, 0.0f64); 4];
        for (k, slot) in t.iter_mut().enumerate() {
            let p = base as i64 - 1 + k as i64;
            *slot = (p.clamp(0, extent as i64 - 1) as usize, cubic(src - p as f64));
        }
        t
    };
    let rows: Vec<_> = (0..h * r).map(|y| taps(y, h)).collect();
    let cols: Vec<_> = (0..w * r).map(|x| taps(x, w)).collect();
    let mut out = Vec::with_capacity(h * r * w * r * c);
    for ry in &rows {
        for cx in &cols {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(y, wy) in ry {
                    for &(x, wx) in cx {
                        acc += wy * wx * frame.data()[(y * w + x) * c + ch] as f64;
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Tensor::new(vec![h * r, w * r, c], out)
}

/// Reference restoration: bicubic upsampling followed by inverting the known
/// exposure and gamma of the degradation.
pub fn baseline_restore(lln: &Tensor<f32>, params: &DegradeParams) -> Result<Tensor<f32>> {
    params.validate()?;
    let up = bicubic_upsample(lln, params.r)?;
    Ok(up.map(|y| ((y.clamp(0.0, 1.0) as f64).powf(1.0 / params.gamma) / params.exposure).clamp(0.0, 1.0) as f32))
}
