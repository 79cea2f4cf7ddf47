//! Run configuration: one flat `key = value` file covering data, model and
//! training, with command-line overrides applied on top.

use crate::dp3df::FilterGeometry;
use crate::error::{Error, Result};
use crate::io::{format_kv, parse_kv};
use crate::predictor::{Ablation, PredictorConfig};
use crate::synth::{DatasetSpec, DegradeParams};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    pub test_sequences: usize,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let geom = FilterGeometry { r: 4, kh: 3, kw: 3, kt: 3, frames: 3 };
        RunConfig {
            seed: 0,
            data: DatasetSpec {
                sequences: 8,
                frames: 16,
                size: 320,
                params: DegradeParams::default(),
            },
            test_sequences: 2,
            predictor: PredictorConfig::desk(geom),
            train: TrainConfig::default(),
        }
    }
}

/// Seed offset separating the held-out sequences from the training ones.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.predictor.validate()?;
        self.data.params.validate()?;
        if self.data.params.r != self.predictor.geom.r {
            return Err(Error::contract("RunConfig", "dataset and predictor disagree on r"));
        }
        self.train.validate(&self.predictor)
    }

    /// Sets the seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.params.seed = seed;
        self.train.seed = seed;
    }

    pub fn set_r(&mut self, r: usize) {
        self.predictor.geom.r = r;
        self.data.params.r = r;
    }

    pub fn test_spec(&self) -> DatasetSpec {
        DatasetSpec {
            sequences: self.test_sequences,
            params: DegradeParams {
                seed: self.data.params.seed.wrapping_add(TEST_SEED_OFFSET),
                ..self.data.params
            },
            ..self.data
        }
    }

    /// Applies `key = value` text over the current values; unknown keys are errors.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let bad = |detail: String| Error::Config { line: n + 1, detail };
            let pairs = parse_kv(line).map_err(|e| match e {
                Error::Config { detail, .. } => bad(detail),
                other => other,
            })?;
            for (k, v) in pairs {
                self.set(&k, &v).map_err(|e| match e {
                    Error::Config { detail, .. } => bad(detail),
                    other => bad(other.to_string()),
                })?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config { line: 0, detail: format!("`{key}` = `{value}` is not valid") };
        let int = || value.parse::<usize>().map_err(|_| bad());
        let num = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "seed" => self.set_seed(value.parse().map_err(|_| bad())?),
            "sequences" => self.data.sequences = int()?,
            "sequence_length" => self.data.frames = int()?,
            "hr_size" => self.data.size = int()?,
            "test_sequences" => self.test_sequences = int()?,
            "exposure" => self.data.params.exposure = num()?,
            "gamma" => self.data.params.gamma = num()?,
            "read_noise" => self.data.params.read_noise = num()?,
            "shot_noise" => self.data.params.shot_noise = num()?,
            "r" => self.set_r(int()?),
            "kh" => self.predictor.geom.kh = int()?,
            "kw" => self.predictor.geom.kw = int()?,
            "kt" => self.predictor.geom.kt = int()?,
            "frames" => self.predictor.geom.frames = int()?,
            "levels" => self.predictor.levels = int()?,
            "channels" => {
                self.predictor.channels = value
                    .split(',')
                    .map(|c| c.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            }
            "blocks_per_level" => self.predictor.blocks_per_level = int()?,
            "ablation" => self.predictor.ablation = value.parse::<Ablation>().map_err(|_| bad())?,
            "lr0" => self.train.lr0 = num()?,
            "beta1" => self.train.betas.0 = num()?,
            "beta2" => self.train.betas.1 = num()?,
            "batch" => self.train.batch = int()?,
            "patch" => self.train.patch = int()?,
            "total_steps" => self.train.total_steps = int()?,
            "grad_clip" => self.train.grad_clip = num()?,
            "lambda_recon" => self.train.lambdas.recon = num()?,
            "lambda_smooth" => self.train.lambdas.smooth = num()?,
            "lambda_enhance" => self.train.lambdas.enhance = num()?,
            "checkpoint_every" => self.train.checkpoint_every = int()?,
            "threads" => self.train.threads = int()?,
            _ => return Err(Error::Config { line: 0, detail: format!("unknown key `{key}`") }),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let p = &self.predictor;
        let d = &self.data;
        let t = &self.train;
        let channels: Vec<String> = p.channels.iter().map(|c| c.to_string()).collect();
        format_kv([
            ("seed", self.seed.to_string()),
            ("sequences", d.sequences.to_string()),
            ("sequence_length", d.frames.to_string()),
            ("hr_size", d.size.to_string()),
            ("test_sequences", self.test_sequences.to_string()),
            ("exposure", d.params.exposure.to_string()),
            ("gamma", d.params.gamma.to_string()),
            ("read_noise", d.params.read_noise.to_string()),
            ("shot_noise", d.params.shot_noise.to_string()),
            ("r", p.geom.r.to_string()),
            ("kh", p.geom.kh.to_string()),
            ("kw", p.geom.kw.to_string()),
            ("kt", p.geom.kt.to_string()),
            ("frames", p.geom.frames.to_string()),
            ("levels", p.levels.to_string()),
            ("channels", channels.join(",")),
            ("blocks_per_level", p.blocks_per_level.to_string()),
            ("ablation", p.ablation.to_string()),
            ("lr0", t.lr0.to_string()),
            ("beta1", t.betas.0.to_string()),
            ("beta2", t.betas.1.to_string()),
            ("batch", t.batch.to_string()),
            ("patch", t.patch.to_string()),
            ("total_steps", t.total_steps.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("lambda_recon", t.lambdas.recon.to_string()),
            ("lambda_smooth", t.lambdas.smooth.to_string()),
            ("lambda_enhance", t.lambdas.enhance.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("threads", t.threads.to_string()),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let mut d = RunConfig::default();
        d.apply_kv(&c.to_kv()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn overrides_and_comments() {
        let mut c = RunConfig::default();
        c.apply_kv("# desk run\nseed = 7\nr = 2  # smaller\nchannels = 8, 8\nlevels = 2\nablation = no_spatial\n")
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.data.params.r, 2);
        assert_eq!(c.predictor.channels, vec![8, 8]);
        assert_eq!(c.predictor.ablation, Ablation::NoSpatial);
        c.validate().unwrap();
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut c = RunConfig::default();
        match c.apply_kv("seed = 1\n\nlearning_rate = 3\n") {
            Err(Error::Config { line, detail }) => {
                assert_eq!(line, 3);
                assert!(detail.contains("learning_rate"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(c.apply_kv("r = four"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(c.apply_kv("no equals sign"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn test_split_uses_a_distinct_seed() {
        let c = RunConfig::default();
        assert_ne!(c.test_spec().params.seed, c.data.params.seed);
        assert_eq!(c.test_spec().sequences, c.test_sequences);
    }
}
