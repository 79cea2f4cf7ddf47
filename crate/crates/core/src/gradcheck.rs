//! Finite-difference verification of every hand-written backward pass, in f64.
//!
//! Each probe perturbs one scalar and compares a central difference with the
//! analytic gradient. The difference is taken at two step sizes. A probe is
//! unresolved and redrawn when either step straddles a kink (leaky ReLU, clamp)
//! or the two estimates disagree; redraws are counted.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dp3df::{apply_dp3df, apply_dp3df_backward, normalize_filters, FilterGeometry};
use crate::error::{Error, Result};
use crate::losses::{recon_loss, smoothness_loss, smoothness_weights, total_loss, LossWeights, SMOOTHNESS_EPS};
use crate::predictor::{loss_and_gradients, PredictorConfig, PredictorWeights};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
/// Second step of the two-scale consistency screen.
pub const COARSE_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;
const KINK_RATIO: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` at offset zero, or `None` on a kink.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> Option<f64> {
    let (fp, f0, fm) = (f(h), f(0.0), f(-h));
    let fwd = (fp - f0) / h;
    let bwd = (f0 - fm) / h;
    let scale = fwd.abs().max(bwd.abs()).max(REL_FLOOR);
    if (fwd - bwd).abs() > KINK_RATIO * scale.max(1e-6) {
        return None;
    }
    Some((fp - fm) / (2.0 * h))
}

/// Central difference at [`COARSE_STEP`], provided it agrees with the one at
/// [`STEP`] to within [`TOLERANCE`]; `None` when unresolved.
pub fn resolved_difference(f: impl Fn(f64) -> f64) -> Option<f64> {
    let fine = central_difference(&f, STEP)?;
    let coarse = central_difference(&f, COARSE_STEP)?;
    (relative_error(fine, coarse) <= TOLERANCE).then_some(coarse)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub samples: usize,
    pub kinks: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel <= TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn total_samples(&self) -> usize {
        self.checks.iter().map(|c| c.samples).sum()
    }

    pub fn max_rel(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("check                         samples  kinks     max rel  worst\n");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<28} {:>8} {:>6} {:>11.3e}  {}{}",
                c.name,
                c.samples,
                c.kinks,
                c.max_rel,
                c.worst,
                if c.passed() { "" } else { "  FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "total {} samples, max rel {:.3e}, tolerance {:.0e}: {}",
            self.total_samples(),
            self.max_rel(),
            TOLERANCE,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }
}

type Objective<'a> = Box<dyn Fn(f64) -> f64 + 'a>;

/// One scalar slot of a tensor to probe.
struct Probe {
    label: String,
    analytic: f64,
}

/// Probes `samples` scalars drawn by `pick`, redrawing kinks.
fn run_check<'a>(
    name: &str,
    samples: usize,
    rng: &mut ChaCha8Rng,
    mut pick: impl FnMut(&mut ChaCha8Rng) -> (Probe, Objective<'a>),
) -> Result<CheckResult> {
    let mut result = CheckResult { name: name.into(), samples: 0, kinks: 0, max_rel: 0.0, worst: String::new() };
    let mut attempts = 0;
    while result.samples < samples {
        attempts += 1;
        if attempts > samples * 20 {
            return Err(Error::contract("gradcheck", format!("{name}: too many kinks ({})", result.kinks)));
        }
        let (probe, f) = pick(rng);
        let Some(numeric) = resolved_difference(&*f) else {
            result.kinks += 1;
            continue;
        };
        let rel = relative_error(probe.analytic, numeric);
        if rel >= result.max_rel {
            result.max_rel = rel;
            result.worst = format!("{} (analytic {:.6e}, numeric {:.6e})", probe.label, probe.analytic, numeric);
        }
        result.samples += 1;
    }
    Ok(result)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn perturbed(t: &Tensor<f64>, k: usize, d: f64) -> Tensor<f64> {
    let mut out = t.clone();
    out.data_mut()[k] += d;
    out
}

fn check_apply(rng: &mut ChaCha8Rng, samples: usize) -> Result<Vec<CheckResult>> {
    let geom = FilterGeometry::new(2, 3, 3, 3, 3)?;
    let clip = uniform(&[3, 5, 6, 3], 0.0, 1.0, rng);
    let raw = uniform(&[5, 6, geom.raw_channels()], -1.5, 1.5, rng);
    let upstream = uniform(&[10, 12, 3], -1.0, 1.0, rng);
    let objective = |c: &Tensor<f64>, r: &Tensor<f64>| -> f64 {
        let field = normalize_filters(r, &geom).expect("valid raw");
        apply_dp3df(c, &field).expect("valid clip").dot_f64(&upstream)
    };
    let field = normalize_filters(&raw, &geom)?;
    let grads = apply_dp3df_backward(&clip, &field, &upstream)?;
    let (clip, raw, grads) = (&clip, &raw, &grads);
    let clip_check = run_check("apply_dp3df / clip", samples, rng, |rng| {
        let k = rng.random_range(0..clip.len());
        let f: Objective = Box::new(move |d: f64| objective(&perturbed(clip, k, d), raw));
        (Probe { label: format!("clip[{k}]"), analytic: grads.clip.data()[k] }, f)
    })?;
    let raw_check = run_check("apply_dp3df / raw filters", samples, rng, |rng| {
        // bias toward the luminance logits, which are a small share of the channels
        let k = if rng.random_bool(0.3) {
            let px = rng.random_range(0..30);
            px * geom.raw_channels() + geom.kernels() * geom.taps() + rng.random_range(0..geom.kernels())
        } else {
            rng.random_range(0..raw.len())
        };
        let f: Objective = Box::new(move |d: f64| objective(clip, &perturbed(raw, k, d)));
        (Probe { label: format!("raw[{k}]"), analytic: grads.raw.data()[k] }, f)
    })?;
    Ok(vec![clip_check, raw_check])
}

fn check_losses(rng: &mut ChaCha8Rng, samples: usize) -> Result<Vec<CheckResult>> {
    let shape = [6, 5, 3];
    // keep predictions away from the clamp boundaries at 0 and 1
    let pred = uniform(&shape, -0.3, 1.3, rng).map(|v| if v.abs() < 0.01 || (v - 1.0).abs() < 0.01 { 0.5 } else { v });
    let gt = uniform(&shape, 0.0, 1.0, rng);
    let (_, g_recon) = recon_loss(&pred, &gt)?;
    let (pred, gt) = (&pred, &gt);
    let recon = run_check("recon_loss", samples, rng, |rng| {
        let k = rng.random_range(0..pred.len());
        let f: Objective = Box::new(move |d: f64| recon_loss(&perturbed(pred, k, d), gt).expect("shapes").0);
        (Probe { label: format!("pred[{k}]"), analytic: g_recon.data()[k] }, f)
    })?;

    let guide = uniform(&shape, 0.02, 1.0, rng);
    let sw = smoothness_weights(&guide, SMOOTHNESS_EPS)?;
    let luma = uniform(&[6, 5, 4], 1.0, 6.0, rng);
    let (_, g_smooth) = smoothness_loss(&luma, &sw)?;
    let smooth = run_check("smoothness_loss", samples, rng, |rng| {
        let k = rng.random_range(0..luma.len());
        let (sw, luma) = (&sw, &luma);
        let f: Objective = Box::new(move |d: f64| smoothness_loss(&perturbed(luma, k, d), sw).expect("shapes").0);
        (Probe { label: format!("luma[{k}]"), analytic: g_smooth.data()[k] }, f)
    })?;

    let z = uniform(&[12, 10, 3], 0.05, 0.95, rng);
    let y = uniform(&[12, 10, 3], 0.05, 0.95, rng);
    let gt = uniform(&[12, 10, 3], 0.0, 1.0, rng);
    let luma = uniform(&[6, 5, 4], 1.0, 6.0, rng);
    let lam = LossWeights::default();
    let lb = total_loss(&z, &y, &gt, &luma, &sw, &lam)?;
    let total = |z: &Tensor<f64>, y: &Tensor<f64>, l: &Tensor<f64>| total_loss(z, y, &gt, l, &sw, &lam).expect("shapes").total;
    let (z, y, luma, total, lb) = (&z, &y, &luma, &total, &lb);
    let combined = run_check("total_loss", samples, rng, |rng| {
        let which = rng.random_range(0..3);
        match which {
            0 => {
                let k = rng.random_range(0..z.len());
                let f: Objective = Box::new(move |d: f64| total(&perturbed(z, k, d), y, luma));
                (Probe { label: format!("z[{k}]"), analytic: lb.grad_z.data()[k] }, f)
            }
            1 => {
                let k = rng.random_range(0..y.len());
                let f: Objective = Box::new(move |d: f64| total(z, &perturbed(y, k, d), luma));
                (Probe { label: format!("y[{k}]"), analytic: lb.grad_y.data()[k] }, f)
            }
            _ => {
                let k = rng.random_range(0..luma.len());
                let f: Objective = Box::new(move |d: f64| total(z, y, &perturbed(luma, k, d)));
                (Probe { label: format!("luma[{k}]"), analytic: lb.grad_luma.data()[k] }, f)
            }
        }
    })?;
    Ok(vec![recon, smooth, combined])
}

/// The tiny predictor (one level, eight channels, 8x8 input) end to end through
/// filtering, fusion and the full loss.
fn check_predictor(rng: &mut ChaCha8Rng, samples: usize, seed: u64) -> Result<CheckResult> {
    let geom = FilterGeometry::new(2, 3, 3, 3, 3)?;
    let cfg = PredictorConfig::tiny(geom);
    let weights = PredictorWeights::<f64>::init(&cfg, seed)?;
    let clip = uniform(&[3, 8, 8, 3], 0.02, 0.3, rng);
    let gt = uniform(&[16, 16, 3], 0.0, 1.0, rng);
    let lam = LossWeights::default();
    let (_, grads) = loss_and_gradients(&cfg, &weights, &clip, &gt, &lam)?;
    let (cfg, weights, clip, gt, lam, grads) = (&cfg, &weights, &clip, &gt, &lam, &grads);
    let names: Vec<String> = weights.params().keys().cloned().collect();
    let mut next = 0usize;
    run_check("predictor (tiny, full loss)", samples, rng, |rng| {
        // round-robin over tensors so every layer is covered
        let name = names[next % names.len()].clone();
        next += 1;
        let k = rng.random_range(0..weights.get(&name).expect("known").len());
        let analytic = grads[&name].data()[k];
        let label = format!("{name}[{k}]");
        let f: Objective = Box::new(move |d: f64| {
            let mut w = weights.clone();
            w.params_mut().get_mut(&name).expect("known").data_mut()[k] += d;
            loss_and_gradients(cfg, &w, clip, gt, lam).expect("forward").0.total
        });
        (Probe { label, analytic }, f)
    })
}

/// Runs every check; at least 250 probes in total.
pub fn run_suite(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = check_apply(&mut rng, 30)?;
    checks.extend(check_losses(&mut rng, 30)?);
    checks.push(check_predictor(&mut rng, 100, seed)?);
    Ok(GradCheckReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_smooth_and_kinked_functions() {
        let d = central_difference(|x| (1.0 + x).powi(3), 1e-6).unwrap();
        assert!((d - 3.0).abs() < 1e-8);
        assert!(central_difference(|x: f64| x.abs(), 1e-6).is_none());
    }

    #[test]
    fn resolved_difference_rejects_kinks_inside_the_coarse_step() {
        let d = resolved_difference(|x| (0.5 + x).exp()).unwrap();
        assert!((d - 0.5f64.exp()).abs() < 1e-9);
        assert!(resolved_difference(|x: f64| (x - 3e-6).abs()).is_none());
    }

    #[test]
    fn suite_passes_on_default_seed() {
        let report = run_suite(0).unwrap();
        assert!(report.total_samples() >= 200);
        assert!(report.passed(), "{}", report.to_table());
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
