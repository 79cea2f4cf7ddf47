//! Adam with a cosine schedule, paired patch sampling with rotation/flip
//! augmentation, and the deterministic training loop.
//!
//! All randomness is drawn serially from one seeded stream before a batch is
//! dispatched; per-sample gradients are computed in parallel and summed in
//! sample order, so results do not depend on the thread count.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{format_kv, parse_kv};
use crate::losses::{LossTerms, LossWeights};
use crate::metrics::EvalReport;
use crate::predictor::{loss_and_gradients, predict, save_checkpoint, ParamMap, PredictorConfig, PredictorWeights};
use crate::synth::{baseline_restore, window, window_indices, Sequence};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch: usize,
    /// Low-resolution patch side.
    pub patch: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub lambdas: LossWeights,
    /// Worker threads; `0` uses the ambient pool.
    pub threads: usize,
    /// Extra checkpoints every this many steps; `0` writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 4e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch: 4,
            patch: 64,
            total_steps: 2000,
            seed: 0,
            grad_clip: 10.0,
            lambdas: LossWeights::default(),
            threads: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, predictor: &PredictorConfig) -> Result<()> {
        let op = "TrainConfig";
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::contract(op, format!("lr0 = {} must be positive", self.lr0)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::contract(op, "betas must lie in [0, 1)"));
        }
        if self.batch == 0 || self.total_steps == 0 {
            return Err(Error::contract(op, "batch and total_steps must be >= 1"));
        }
        let m = predictor.size_multiple();
        if self.patch == 0 || !self.patch.is_multiple_of(m) {
            return Err(Error::contract(op, format!("patch {} must be a positive multiple of 2^levels = {m}", self.patch)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::contract(op, "grad_clip must be >= 0"));
        }
        self.lambdas.validate()
    }

    pub fn to_kv(&self) -> String {
        format_kv([
            ("lr0", self.lr0.to_string()),
            ("beta1", self.betas.0.to_string()),
            ("beta2", self.betas.1.to_string()),
            ("batch", self.batch.to_string()),
            ("patch", self.patch.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("lambda_recon", self.lambdas.recon.to_string()),
            ("lambda_smooth", self.lambdas.smooth.to_string()),
            ("lambda_enhance", self.lambdas.enhance.to_string()),
        ])
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S = f32> {
    pub step: u64,
    pub m: ParamMap<S>,
    pub v: ParamMap<S>,
}

impl<S: Real> OptimizerState<S> {
    pub fn new(params: &ParamMap<S>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        OptimizerState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter changes.
pub fn adam_step<S: Real>(
    params: &mut ParamMap<S>,
    grads: &ParamMap<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract("adam_step", format!("no gradient for `{name}`")))?;
        g.ensure_shape("adam_step", p.shape())?;
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("moments mirror params");
        let v = state.v.get_mut(name).expect("moments mirror params");
        for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gf = g.f64();
            let mf = b1 * m.f64() + (1.0 - b1) * gf;
            let vf = b2 * v.f64() + (1.0 - b2) * gf * gf;
            *m = S::of(mf);
            *v = S::of(vf);
            *w = S::of(w.f64() - lr * (mf / bc1) / ((vf / bc2).sqrt() + eps));
        }
    }
    Ok(())
}

pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let s = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

pub fn global_norm<S: Real>(grads: &ParamMap<S>) -> f64 {
    grads.values().map(|g| g.dot_f64(g)).sum::<f64>().sqrt()
}

/// Rescales `grads` to at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients<S: Real>(grads: &mut ParamMap<S>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = S::of(max_norm / norm);
        for g in grads.values_mut() {
            g.scale(k);
        }
    }
    norm
}

/// A horizontal flip followed by `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Augment {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Augment {
            quarter_turns: rng.random_range(0..4),
            flip: rng.random_bool(0.5),
        }
    }

    /// Transforms one `[H, W, C]` frame.
    pub fn frame<S: Real>(&self, frame: &Tensor<S>) -> Result<Tensor<S>> {
        if frame.rank() != 3 {
            return Err(Error::contract("Augment", format!("expected [H, W, C], got {:?}", frame.shape())));
        }
        let mut out = frame.clone();
        if self.flip {
            let (h, w, c) = (out.shape()[0], out.shape()[1], out.shape()[2]);
            let src = out.clone();
            for i in 0..h {
                for j in 0..w {
                    let (a, b) = ((i * w + j) * c, (i * w + (w - 1 - j)) * c);
                    out.data_mut()[a..a + c].copy_from_slice(&src.data()[b..b + c]);
                }
            }
        }
        for _ in 0..self.quarter_turns % 4 {
            out = rotate_ccw(&out);
        }
        Ok(out)
    }

    /// Transforms every frame of a `[T, H, W, C]` clip identically.
    pub fn clip<S: Real>(&self, clip: &Tensor<S>) -> Result<Tensor<S>> {
        if clip.rank() != 4 {
            return Err(Error::contract("Augment", format!("expected [T, H, W, C], got {:?}", clip.shape())));
        }
        let s = clip.shape();
        let n = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(clip.len());
        let mut plane = vec![0, 0, s[3]];
        for t in 0..s[0] {
            let f = Tensor::new(s[1..].to_vec(), clip.data()[t * n..(t + 1) * n].to_vec())?;
            let g = self.frame(&f)?;
            plane = g.shape().to_vec();
            data.extend_from_slice(g.data());
        }
        Tensor::new(vec![s[0], plane[0], plane[1], plane[2]], data)
    }
}

fn rotate_ccw<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut data = Vec::with_capacity(x.len());
    // out(i, j) = in(j, w - 1 - i), out is [w, h]
    for i in 0..w {
        for j in 0..h {
            let o = (j * w + (w - 1 - i)) * c;
            data.extend_from_slice(&x.data()[o..o + c]);
        }
    }
    Tensor::new(vec![w, h, c], data).expect("rotation shape")
}

/// Applies the same draw to the low-resolution clip and the ground truth.
pub fn augment<S: Real, R: Rng>(clip: &Tensor<S>, gt: &Tensor<S>, rng: &mut R) -> Result<(Tensor<S>, Tensor<S>)> {
    let a = Augment::sample(rng);
    Ok((a.clip(clip)?, a.frame(gt)?))
}

fn crop<S: Real>(frame: &Tensor<S>, y: usize, x: usize, size: usize) -> Vec<S> {
    let (w, c) = (frame.shape()[1], frame.shape()[2]);
    let mut out = Vec::with_capacity(size * size * c);
    for i in y..y + size {
        out.extend_from_slice(&frame.data()[(i * w + x) * c..(i * w + x + size) * c]);
    }
    out
}

/// A random aligned `(clip, ground truth)` patch pair, before augmentation.
pub fn sample_patch<R: Rng>(
    sequences: &[Sequence],
    frames: usize,
    patch: usize,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seq = &sequences[rng.random_range(0..sequences.len())];
    if seq.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let r = seq.params.r;
    let (h, w, c) = (seq.lln[0].shape()[0], seq.lln[0].shape()[1], seq.lln[0].shape()[2]);
    if h < patch || w < patch {
        return Err(Error::contract("sample_patch", format!("{h}x{w} frames are smaller than patch {patch}")));
    }
    let t = rng.random_range(0..seq.len());
    let y = rng.random_range(0..=h - patch);
    let x = rng.random_range(0..=w - patch);
    let mut data = Vec::with_capacity(frames * patch * patch * c);
    for i in window_indices(seq.len(), t, (frames - 1) / 2) {
        data.extend(crop(&seq.lln[i], y, x, patch));
    }
    let clip = Tensor::new(vec![frames, patch, patch, c], data)?;
    let gt = Tensor::new(vec![patch * r, patch * r, c], crop(&seq.hnn[t], y * r, x * r, patch * r))?;
    Ok((clip, gt))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub terms: LossTerms,
}

pub fn loss_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,L_r,L_s,L_e,total\n");
    for e in log {
        let t = e.terms;
        let _ = writeln!(s, "{},{},{},{},{}", e.step, t.recon, t.smooth, t.enhance, t.total);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: PredictorWeights<f32>,
    pub log: Vec<StepLog>,
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::contract("train", format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains from a fresh initialization. When `out` is given, writes
/// `model.dpt` (+ `model.cfg`), `losses.csv`, `train.cfg` and optional
/// periodic checkpoints into it.
pub fn train(
    predictor: &PredictorConfig,
    config: &TrainConfig,
    sequences: &[Sequence],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let weights = PredictorWeights::<f32>::init(predictor, config.seed)?;
    train_from(predictor, config, sequences, weights, out)
}

pub fn train_from(
    predictor: &PredictorConfig,
    config: &TrainConfig,
    sequences: &[Sequence],
    mut weights: PredictorWeights<f32>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate(predictor)?;
    if sequences.is_empty() || sequences.iter().any(Sequence::is_empty) {
        return Err(Error::EmptyDataset);
    }
    for s in sequences {
        s.validate()?;
        if s.params.r != predictor.geom.r {
            return Err(Error::contract(
                "train",
                format!("dataset r = {} but predictor r = {}", s.params.r, predictor.geom.r),
            ));
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("train.cfg");
        std::fs::write(&p, config.to_kv()).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_DA7A);
    let mut state = OptimizerState::new(weights.params());
    let mut log = Vec::with_capacity(config.total_steps);
    let frames = predictor.geom.frames;
    in_pool(config.threads, || -> Result<()> {
        for step in 0..config.total_steps {
            let batch = (0..config.batch)
                .map(|_| {
                    let (clip, gt) = sample_patch(sequences, frames, config.patch, &mut rng)?;
                    augment(&clip, &gt, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let results = batch
                .par_iter()
                .map(|(clip, gt)| loss_and_gradients(predictor, &weights, clip, gt, &config.lambdas))
                .collect::<Vec<_>>();
            let mut terms = LossTerms::default();
            let mut grads = weights.zeros_like();
            for r in results {
                let (t, g) = r.map_err(|e| match e {
                    Error::NonFinite(detail) => Error::Divergence { step, detail },
                    other => other,
                })?;
                terms.recon += t.recon;
                terms.smooth += t.smooth;
                terms.enhance += t.enhance;
                terms.total += t.total;
                for (name, acc) in grads.iter_mut() {
                    acc.add_assign(&g[name])?;
                }
            }
            let n = config.batch as f64;
            terms = LossTerms {
                recon: terms.recon / n,
                smooth: terms.smooth / n,
                enhance: terms.enhance / n,
                total: terms.total / n,
            };
            if !terms.total.is_finite() {
                return Err(Error::Divergence { step, detail: format!("loss terms {terms:?}") });
            }
            for g in grads.values_mut() {
                g.scale(1.0 / config.batch as f32);
            }
            let grad_norm = clip_gradients(&mut grads, config.grad_clip);
            let lr = cosine_lr(step, config.total_steps, config.lr0);
            adam_step(weights.params_mut(), &grads, &mut state, lr, config.betas, config.adam_eps).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Divergence { step, detail },
                other => other,
            })?;
            log.push(StepLog { step, lr, grad_norm, terms });
            if let Some(dir) = out {
                if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                    save_checkpoint(&dir.join(format!("model_step{:06}.dpt", step + 1)), predictor, &weights)?;
                }
            }
        }
        Ok(())
    })??;
    if let Some(dir) = out {
        save_checkpoint(&dir.join("model.dpt"), predictor, &weights)?;
        let p = dir.join("losses.csv");
        std::fs::write(&p, loss_csv(&log)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome { weights, log })
}

/// Restores every frame of every sequence and scores it against the clean frame.
pub fn evaluate(predictor: &PredictorConfig, weights: &PredictorWeights<f32>, sequences: &[Sequence]) -> Result<EvalReport> {
    let n = (predictor.geom.frames - 1) / 2;
    let pairs = sequences
        .iter()
        .map(|s| {
            (0..s.len())
                .into_par_iter()
                .map(|t| Ok((predict(predictor, weights, &window(&s.lln, t, n)?)?.y, s.hnn[t].clone())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::evaluate(&pairs)
}

/// Scores the bicubic + inverse tone curve reference.
pub fn evaluate_baseline(sequences: &[Sequence]) -> Result<EvalReport> {
    let pairs = sequences
        .iter()
        .map(|s| {
            s.lln
                .iter()
                .zip(&s.hnn)
                .map(|(l, h)| Ok((baseline_restore(l, &s.params)?, h.clone())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::evaluate(&pairs)
}

/// Reads `TrainConfig` fields from `key = value` text over `base`.
pub fn train_config_from_kv(text: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut c = base;
    for (k, v) in parse_kv(text)? {
        let num = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Format { kind: "train config", detail: format!("`{k}` = `{v}`") })
        };
        let int = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Format { kind: "train config", detail: format!("`{k}` = `{v}`") })
        };
        match k.as_str() {
            "lr0" => c.lr0 = num(&v)?,
            "beta1" => c.betas.0 = num(&v)?,
            "beta2" => c.betas.1 = num(&v)?,
            "batch" => c.batch = int(&v)?,
            "patch" => c.patch = int(&v)?,
            "total_steps" => c.total_steps = int(&v)?,
            "seed" => c.seed = int(&v)? as u64,
            "grad_clip" => c.grad_clip = num(&v)?,
            "lambda_recon" => c.lambdas.recon = num(&v)?,
            "lambda_smooth" => c.lambdas.smooth = num(&v)?,
            "lambda_enhance" => c.lambdas.enhance = num(&v)?,
            _ => {}
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp3df::FilterGeometry;
    use crate::synth::{make_dataset, DatasetSpec, DegradeParams};

    fn scalar(v: f64) -> ParamMap<f64> {
        [("w".to_string(), Tensor::full(&[1], v))].into_iter().collect()
    }

    #[test]
    fn adam_zero_grads_leave_weights() {
        let mut p = scalar(0.7);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &scalar(0.0), &mut st, 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(p["w"].data()[0], 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = scalar(0.0);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &scalar(1.0), &mut st, 0.01, (0.9, 0.999), 1e-8).unwrap();
        assert!((p["w"].data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_a_parabola() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p);
        for _ in 0..100 {
            let w = p["w"].data()[0];
            adam_step(&mut p, &scalar(2.0 * w), &mut st, 0.1, (0.9, 0.999), 1e-8).unwrap();
        }
        assert!(p["w"].data()[0].abs() < 0.05, "{}", p["w"].data()[0]);
    }

    #[test]
    fn adam_rejects_nan_before_updating() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p);
        let err = adam_step(&mut p, &scalar(f64::NAN), &mut st, 0.1, (0.9, 0.999), 1e-8).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(p["w"].data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 4e-4), 4e-4);
        assert!(cosine_lr(100, 100, 4e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 4e-4) - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn gradient_clipping_bounds_the_norm() {
        let mut g = scalar(30.0);
        g.insert("b".into(), Tensor::full(&[1], 40.0));
        assert_eq!(clip_gradients(&mut g, 10.0), 50.0);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
    }

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, 2], |i| i as f64)
    }

    #[test]
    fn augment_identity_and_group_laws() {
        let x = ramp(3, 5);
        assert_eq!(Augment::default().frame(&x).unwrap(), x);
        let r1 = Augment { quarter_turns: 1, flip: false };
        let r2 = Augment { quarter_turns: 2, flip: false };
        assert_eq!(r1.frame(&r1.frame(&x).unwrap()).unwrap(), r2.frame(&x).unwrap());
        let r4 = Augment { quarter_turns: 4, flip: false };
        assert_eq!(r4.frame(&x).unwrap(), x);
        let f = Augment { quarter_turns: 0, flip: true };
        assert_eq!(f.frame(&f.frame(&x).unwrap()).unwrap(), x);
        assert_eq!(r1.frame(&x).unwrap().shape(), &[5, 3, 2]);
    }

    #[test]
    fn augment_commutes_with_integer_upscaling() {
        let r = 3;
        let up = |x: &Tensor<f64>| {
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            Tensor::from_fn(&[h * r, w * r, c], |k| {
                let (i, j, ch) = (k / (w * r * c), (k / c) % (w * r), k % c);
                x.at(&[i / r, j / r, ch])
            })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..16 {
            let a = Augment::sample(&mut rng);
            let x = Tensor::from_fn(&[4, 6, 2], |_| rng.random::<f64>());
            assert_eq!(a.frame(&up(&x)).unwrap(), up(&a.frame(&x).unwrap()), "{a:?}");
        }
    }

    #[test]
    fn clip_augment_applies_the_same_transform_to_each_frame() {
        let a = Augment { quarter_turns: 3, flip: true };
        let clip = Tensor::from_fn(&[3, 4, 6, 2], |i| i as f64);
        let out = a.clip(&clip).unwrap();
        assert_eq!(out.shape(), &[3, 6, 4, 2]);
        for t in 0..3 {
            let f = Tensor::new(vec![4, 6, 2], clip.data()[t * 48..(t + 1) * 48].to_vec()).unwrap();
            assert_eq!(&out.data()[t * 48..(t + 1) * 48], a.frame(&f).unwrap().data());
        }
    }

    fn tiny_setup() -> (PredictorConfig, Vec<Sequence>) {
        let geom = FilterGeometry::new(2, 3, 3, 3, 3).unwrap();
        let p = PredictorConfig::tiny(geom);
        let spec = DatasetSpec {
            sequences: 2,
            frames: 4,
            size: 32,
            params: DegradeParams { r: 2, seed: 3, ..DegradeParams::default() },
        };
        (p, make_dataset(&spec).unwrap())
    }

    #[test]
    fn patches_are_aligned() {
        let (_, data) = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clip, gt) = sample_patch(&data, 3, 8, &mut rng).unwrap();
        assert_eq!(clip.shape(), &[3, 8, 8, 3]);
        assert_eq!(gt.shape(), &[16, 16, 3]);
        assert!(sample_patch(&data, 3, 32, &mut rng).is_err());
        assert!(matches!(sample_patch(&[], 3, 8, &mut rng), Err(Error::EmptyDataset)));
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let (p, data) = tiny_setup();
        let cfg = TrainConfig { total_steps: 4, batch: 3, patch: 8, ..TrainConfig::default() };
        let a = train(&p, &TrainConfig { threads: 1, ..cfg.clone() }, &data, None).unwrap();
        let b = train(&p, &TrainConfig { threads: 3, ..cfg }, &data, None).unwrap();
        assert_eq!(loss_csv(&a.log), loss_csv(&b.log));
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn no_residual_checkpoint_has_no_head() {
        let (p, data) = tiny_setup();
        let p = p.with_ablation(crate::predictor::Ablation::NoResidual);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { total_steps: 2, batch: 1, patch: 8, ..TrainConfig::default() };
        let out = train(&p, &cfg, &data, Some(dir.path())).unwrap();
        assert!(out.weights.params().keys().all(|k| !k.starts_with("residual_head")));
        let saved = crate::io::read_container(&dir.path().join("model.dpt")).unwrap();
        assert!(saved.keys().all(|k| !k.starts_with("residual_head")));
        assert!(std::fs::read_to_string(dir.path().join("losses.csv")).unwrap().starts_with("step,L_r,L_s,L_e,total\n"));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (p, _) = tiny_setup();
        let cfg = TrainConfig { total_steps: 1, patch: 8, ..TrainConfig::default() };
        assert!(matches!(train(&p, &cfg, &[], None), Err(Error::EmptyDataset)));
    }

    #[test]
    fn config_kv_round_trip() {
        let c = TrainConfig { lr0: 1e-3, batch: 2, seed: 9, ..TrainConfig::default() };
        assert_eq!(train_config_from_kv(&c.to_kv(), TrainConfig::default()).unwrap(), c);
        assert!(train_config_from_kv("lr0 = fast", TrainConfig::default()).is_err());
    }
}
