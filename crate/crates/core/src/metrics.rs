//! PSNR and SSIM over `[H, W, C]` frames, plus a per-frame report.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.rank() != 3 {
        return Err(Error::contract(op, format!("expected [H, W, C], got {:?}", a.shape())));
    }
    b.ensure_shape(op, a.shape())?;
    if a.is_empty() {
        return Err(Error::contract(op, "empty frame"));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical inputs give [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = win.iter().enumerate().map(|(i, &g)| g * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win.iter().enumerate().map(|(i, &g)| g * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM, per channel then averaged, with an 11x11 Gaussian window over
/// the valid region. Frames smaller than the window use the largest odd
/// window that fits.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (h, w, ch) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * ch + c] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * ch + c] as f64).collect();
        let sq = |p: &[f64]| p.iter().map(|v| v * v).collect::<Vec<_>>();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let e_aa = filter_valid(&sq(&pa), h, w, &win);
        let e_bb = filter_valid(&sq(&pb), h, w, &win);
        let e_ab = filter_valid(&ab, h, w, &win);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / ch as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub sequence: usize,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
}

impl EvalReport {
    /// Scores `(prediction, ground truth)` frame pairs grouped by sequence.
    pub fn evaluate(sequences: &[Vec<(Tensor<f32>, Tensor<f32>)>]) -> Result<Self> {
        let jobs: Vec<_> = sequences
            .iter()
            .enumerate()
            .flat_map(|(s, frames)| frames.iter().enumerate().map(move |(t, pair)| (s, t, pair)))
            .collect();
        let frames = jobs
            .par_iter()
            .map(|&(sequence, frame, (pred, gt))| {
                Ok(FrameScore {
                    sequence,
                    frame,
                    psnr: psnr(pred, gt, 1.0)?,
                    ssim: ssim(pred, gt)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport { frames })
    }

    pub fn sequence_ids(&self) -> Vec<usize> {
        let mut ids: Vec<_> = self.frames.iter().map(|f| f.sequence).collect();
        ids.dedup();
        ids
    }

    /// `(mean PSNR, mean SSIM)` of one sequence.
    pub fn sequence_mean(&self, sequence: usize) -> Option<(f64, f64)> {
        mean(self.frames.iter().filter(|f| f.sequence == sequence))
    }

    /// `(mean PSNR, mean SSIM)` over all frames.
    pub fn mean(&self) -> Option<(f64, f64)> {
        mean(self.frames.iter())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# metrics computed on RGB in [0,1]\nsequence,frame,psnr,ssim\n");
        for f in &self.frames {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", f.sequence, f.frame, f.psnr, f.ssim);
        }
        for id in self.sequence_ids() {
            if let Some((p, q)) = self.sequence_mean(id) {
                let _ = writeln!(s, "{id},mean,{p:.6},{q:.6}");
            }
        }
        if let Some((p, q)) = self.mean() {
            let _ = writeln!(s, "all,mean,{p:.6},{q:.6}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("RGB metrics\n sequence | frames |   PSNR (dB) |   SSIM\n----------+--------+-------------+--------\n");
        for id in self.sequence_ids() {
            let n = self.frames.iter().filter(|f| f.sequence == id).count();
            if let Some((p, q)) = self.sequence_mean(id) {
                let _ = writeln!(s, " {id:>8} | {n:>6} | {p:>11.3} | {q:.4}");
            }
        }
        if let Some((p, q)) = self.mean() {
            let _ = writeln!(s, " {:>8} | {:>6} | {p:>11.3} | {q:.4}", "all", self.frames.len());
        }
        s
    }
}

fn mean<'a>(it: impl Iterator<Item = &'a FrameScore>) -> Option<(f64, f64)> {
    let (mut p, mut q, mut n) = (0.0, 0.0, 0usize);
    for f in it {
        p += f.psnr;
        q += f.ssim;
        n += 1;
    }
    (n > 0).then(|| (p / n as f64, q / n as f64))
}
