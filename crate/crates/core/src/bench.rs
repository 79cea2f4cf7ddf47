//! Timing of the three filter-application variants against the naive oracle.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dp3df::{apply_dp3df, apply_dp3df_naive, apply_dp3df_tiled, normalize_filters, FilterField, FilterGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EQUALITY_GATE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchInstance {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub r: usize,
    pub k: usize,
    pub channels: usize,
}

impl BenchInstance {
    pub fn geometry(&self) -> Result<FilterGeometry> {
        FilterGeometry::new(self.r, self.k, self.k, self.k.min(self.frames), self.frames)
    }

    pub fn output_pixels(&self) -> usize {
        self.height * self.width * self.r * self.r
    }

    pub fn label(&self) -> String {
        format!("{}x{}xT{}xr{}xk{}", self.height, self.width, self.frames, self.r, self.k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Naive,
    Tiled,
    Parallel,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Naive, Variant::Tiled, Variant::Parallel];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Tiled => "tiled",
            Variant::Parallel => "parallel",
        }
    }

    pub fn run(self, clip: &Tensor<f32>, field: &FilterField<f32>) -> Result<Tensor<f32>> {
        match self {
            Variant::Naive => apply_dp3df_naive(clip, field),
            Variant::Tiled => apply_dp3df_tiled(clip, field),
            Variant::Parallel => apply_dp3df(clip, field),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub variant: &'static str,
    pub instance: BenchInstance,
    pub threads: usize,
    /// Best wall time over the repeats, seconds; `None` when the gate failed.
    pub wall: Option<f64>,
    /// Output pixels per second.
    pub throughput: Option<f64>,
    pub max_diff: f64,
    /// Wall time of filter normalization, reported separately.
    pub normalize_wall: f64,
}

impl BenchResult {
    pub fn passed_gate(&self) -> bool {
        self.max_diff <= EQUALITY_GATE
    }
}

/// Random clip and normalized field for an instance.
pub fn make_instance(inst: &BenchInstance, seed: u64) -> Result<(Tensor<f32>, FilterField<f32>, f64)> {
    let geom = inst.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = Tensor::from_fn(&[inst.frames, inst.height, inst.width, inst.channels], |_| rng.random::<f32>());
    let raw = Tensor::from_fn(&[inst.height, inst.width, geom.raw_channels()], |_| rng.random_range(-2.0f32..2.0));
    let start = Instant::now();
    let field = normalize_filters(&raw, &geom)?;
    Ok((clip, field, start.elapsed().as_secs_f64()))
}

/// Times every variant on every instance after checking it against the naive
/// output. Variants failing the gate are reported without timings.
pub fn bench(instances: &[BenchInstance], threads: usize, repeats: usize, seed: u64) -> Result<Vec<BenchResult>> {
    if repeats == 0 {
        return Err(Error::contract("bench", "repeats must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::contract("bench", format!("thread pool: {e}")))?;
    let mut out = Vec::new();
    for inst in instances {
        let (clip, field, normalize_wall) = make_instance(inst, seed)?;
        let reference = apply_dp3df_naive(&clip, &field)?;
        for v in Variant::ALL {
            let got = pool.install(|| v.run(&clip, &field))?;
            let max_diff = got.max_abs_diff(&reference);
            let mut result = BenchResult {
                variant: v.name(),
                instance: *inst,
                threads: if v == Variant::Parallel { threads.max(1) } else { 1 },
                wall: None,
                throughput: None,
                max_diff,
                normalize_wall,
            };
            if result.passed_gate() {
                let mut best = f64::INFINITY;
                for _ in 0..repeats {
                    let start = Instant::now();
                    let y = pool.install(|| v.run(&clip, &field))?;
                    best = best.min(start.elapsed().as_secs_f64());
                    std::hint::black_box(y);
                }
                result.wall = Some(best);
                result.throughput = Some(inst.output_pixels() as f64 / best);
            }
            out.push(result);
        }
    }
    Ok(out)
}

pub fn results_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("variant,instance,threads,wall_s,throughput_px_per_s,max_abs_diff,gate,normalize_s\n");
    for r in results {
        let wall = r.wall.map_or("".into(), |w| format!("{w:.6}"));
        let tp = r.throughput.map_or("".into(), |t| format!("{t:.1}"));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e},{},{:.6}",
            r.variant,
            r.instance.label(),
            r.threads,
            wall,
            tp,
            r.max_diff,
            if r.passed_gate() { "pass" } else { "FAIL" },
            r.normalize_wall
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_variants_pass_the_gate_on_a_small_grid() {
        let inst = [
            BenchInstance { height: 9, width: 7, frames: 3, r: 2, k: 3, channels: 3 },
            BenchInstance { height: 4, width: 4, frames: 1, r: 1, k: 1, channels: 3 },
        ];
        let res = bench(&inst, 2, 1, 0).unwrap();
        assert_eq!(res.len(), 6);
        assert!(res.iter().all(|r| r.passed_gate() && r.wall.is_some()));
        let csv = results_csv(&res);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().skip(1).all(|l| l.contains(",pass,")));
    }
}
