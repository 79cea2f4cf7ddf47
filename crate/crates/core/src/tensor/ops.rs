use crate::error::{Error, Result};

use super::{Real, Tensor};

fn shuffle_dims(op: &'static str, shape: &[usize], r: usize) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::contract(op, format!("expected [N,C,H,W], got {shape:?}")));
    }
    if r == 0 {
        return Err(Error::contract(op, "factor r must be >= 1"));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

/// `[N, C*r*r, H, W] -> [N, C, rH, rW]` with
/// `out(n, c, i*r + a, j*r + b) = in(n, c*r*r + a*r + b, i, j)`.
pub fn pixel_shuffle<S: Real>(input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let [n, cr, h, w] = shuffle_dims("pixel_shuffle", input.shape(), r)?;
    let rr = r * r;
    if cr % rr != 0 {
        return Err(Error::contract(
            "pixel_shuffle",
            format!("axis C: {cr} channels not divisible by r^2 = {rr}"),
        ));
    }
    let c = cr / rr;
    let (oh, ow) = (h * r, w * r);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            for a in 0..r {
                for b in 0..r {
                    let plane = ((ni * cr) + ci * rr + a * r + b) * h * w;
                    for i in 0..h {
                        let row = ((ni * c + ci) * oh + i * r + a) * ow;
                        for j in 0..w {
                            dst[row + j * r + b] = src[plane + i * w + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<S: Real>(input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let [n, c, oh, ow] = shuffle_dims("pixel_unshuffle", input.shape(), r)?;
    if oh % r != 0 || ow % r != 0 {
        return Err(Error::contract(
            "pixel_unshuffle",
            format!("axis H/W: {oh}x{ow} not divisible by r = {r}"),
        ));
    }
    let (h, w, rr) = (oh / r, ow / r, r * r);
    let mut out = Tensor::zeros(&[n, c * rr, h, w]);
    let src = input.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            for a in 0..r {
                for b in 0..r {
                    let plane = ((ni * c * rr) + ci * rr + a * r + b) * h * w;
                    for i in 0..h {
                        let row = ((ni * c + ci) * oh + i * r + a) * ow;
                        for j in 0..w {
                            dst[plane + i * w + j] = src[row + j * r + b];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `(outer, extent, inner)` view of a tensor around `axis`.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::contract(op, format!("axis {axis} out of range for rank {}", shape.len())));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax_axis<S: Real>(input: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, extent, inner) = axis_split("softmax_axis", input.shape(), axis)?;
    let mut out = input.clone();
    let x = input.data();
    let y = out.data_mut();
    let mut exps = vec![0.0f64; extent];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * extent + k) * inner + i;
            let max = (0..extent).map(|k| x[at(k)].f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, e) in exps.iter_mut().enumerate() {
                *e = (x[at(k)].f64() - max).exp();
                sum += *e;
            }
            for (k, e) in exps.iter().enumerate() {
                y[at(k)] = S::of(e / sum);
            }
        }
    }
    out.ensure_finite("softmax_axis")?;
    Ok(out)
}

/// Given softmax output `y` and upstream `dy`: `dx = y * (dy - sum(y * dy))`.
pub fn softmax_axis_backward<S: Real>(output: &Tensor<S>, grad: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    grad.ensure_shape("softmax_axis_backward", output.shape())?;
    let (outer, extent, inner) = axis_split("softmax_axis_backward", output.shape(), axis)?;
    let mut out = Tensor::zeros(output.shape());
    let (y, g) = (output.data(), grad.data());
    let dx = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * extent + k) * inner + i;
            let dot = (0..extent).fold(0.0, |a, k| a + y[at(k)].f64() * g[at(k)].f64());
            for k in 0..extent {
                dx[at(k)] = S::of(y[at(k)].f64() * (g[at(k)].f64() - dot));
            }
        }
    }
    Ok(out)
}

/// Normalized activations and per-plane inverse standard deviations.
#[derive(Clone, Debug)]
pub struct InstanceNormCache<S> {
    pub normalized: Tensor<S>,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct InstanceNormGrads<S> {
    pub input: Tensor<S>,
    pub gamma: Option<Tensor<S>>,
    pub beta: Option<Tensor<S>>,
}

fn norm_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::contract(op, format!("expected [N,C,H,W], got {shape:?}")));
    }
    let plane = shape[2] * shape[3];
    if plane < 2 {
        return Err(Error::contract(op, format!("axis H/W: plane of {plane} values, need >= 2")));
    }
    Ok((shape[0], shape[1], plane))
}

/// Per-(n, c) standardization with population variance and an optional
/// per-channel affine `(gamma, beta)`.
pub fn instance_norm<S: Real>(
    input: &Tensor<S>,
    eps: f64,
    affine: Option<(&Tensor<S>, &Tensor<S>)>,
) -> Result<(Tensor<S>, InstanceNormCache<S>)> {
    let (n, c, plane) = norm_dims("instance_norm", input.shape())?;
    if let Some((g, b)) = affine {
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::contract("instance_norm", format!("axis C: affine params must be [{c}]")));
        }
    }
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for (p, (src, (xh, dst))) in input
        .data()
        .chunks(plane)
        .zip(normalized.data_mut().chunks_mut(plane).zip(out.data_mut().chunks_mut(plane)))
        .enumerate()
    {
        let mean = src.iter().fold(0.0, |a, v| a + v.f64()) / plane as f64;
        let var = src.iter().fold(0.0, |a, v| a + (v.f64() - mean).powi(2)) / plane as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let (g, b) = affine.map_or((1.0, 0.0), |(g, b)| (g.data()[p % c].f64(), b.data()[p % c].f64()));
        for ((s, x), d) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
            let v = (s.f64() - mean) * istd;
            *x = S::of(v);
            *d = S::of(g * v + b);
        }
    }
    out.ensure_finite("instance_norm")?;
    Ok((out, InstanceNormCache { normalized, inv_std }))
}

pub fn instance_norm_backward<S: Real>(
    cache: &InstanceNormCache<S>,
    gamma: Option<&Tensor<S>>,
    grad_out: &Tensor<S>,
) -> Result<InstanceNormGrads<S>> {
    let shape = cache.normalized.shape();
    grad_out.ensure_shape("instance_norm_backward", shape)?;
    let (_, c, plane) = norm_dims("instance_norm_backward", shape)?;
    let mut gi = Tensor::zeros(shape);
    let mut gg = vec![0.0f64; c];
    let mut gb = vec![0.0f64; c];
    let m = plane as f64;
    for (p, ((xh, dy), dx)) in cache
        .normalized
        .data()
        .chunks(plane)
        .zip(grad_out.data().chunks(plane))
        .zip(gi.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let ch = p % c;
        let g = gamma.map_or(1.0, |g| g.data()[ch].f64());
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for (x, d) in xh.iter().zip(dy) {
            gg[ch] += d.f64() * x.f64();
            gb[ch] += d.f64();
            let dxh = d.f64() * g;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * x.f64();
        }
        let istd = cache.inv_std[p];
        for ((x, d), o) in xh.iter().zip(dy).zip(dx.iter_mut()) {
            let dxh = d.f64() * g;
            *o = S::of(istd / m * (m * dxh - sum_dxh - x.f64() * sum_dxh_xh));
        }
    }
    let affine = gamma.is_some();
    Ok(InstanceNormGrads {
        input: gi,
        gamma: affine.then(|| Tensor::from_fn(&[c], |i| S::of(gg[i]))),
        beta: affine.then(|| Tensor::from_fn(&[c], |i| S::of(gb[i]))),
    })
}

pub fn leaky_relu<S: Real>(input: &Tensor<S>, slope: f64) -> Tensor<S> {
    let k = S::of(slope);
    input.map(|v| if v > S::zero() { v } else { v * k })
}

/// Gradient of [`leaky_relu`], keyed on the pre-activation input.
pub fn leaky_relu_backward<S: Real>(input: &Tensor<S>, grad: &Tensor<S>, slope: f64) -> Result<Tensor<S>> {
    grad.ensure_shape("leaky_relu_backward", input.shape())?;
    let k = S::of(slope);
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > S::zero() { g } else { g * k })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pixel_shuffle_fixed_example() {
        let x = Tensor::<f32>::new(vec![1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_r1_is_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| i as f32);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn pixel_shuffle_matches_index_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn(&[1, 8, 3, 3], |_| rng.random());
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    for a in 0..2 {
                        for b in 0..2 {
                            assert_eq!(y.at(&[0, c, i * 2 + a, j * 2 + b]), x.at(&[0, c * 4 + a * 2 + b, i, j]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let x = Tensor::<f32>::zeros(&[1, 6, 2, 2]);
        assert!(pixel_shuffle(&x, 2).is_err());
    }

    proptest! {
        #[test]
        fn pixel_shuffle_is_a_bijection(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, r in 1usize..4) {
            let x = Tensor::<f32>::from_fn(&[n, c * r * r, h, w], |i| i as f32 * 0.5 - 3.0);
            let y = pixel_shuffle(&x, r).unwrap();
            prop_assert_eq!(pixel_unshuffle(&y, r).unwrap(), x);
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 27), shift in -50.0f64..50.0) {
            let x = Tensor::new(vec![27], v.clone()).unwrap();
            let y = softmax_axis(&x, 0).unwrap();
            prop_assert!((y.sum_f64() - 1.0).abs() <= 1e-6);
            prop_assert!(y.data().iter().all(|&p| p > 0.0));
            let xs = Tensor::new(vec![27], v.iter().map(|a| a + shift).collect()).unwrap();
            let ys = softmax_axis(&xs, 0).unwrap();
            prop_assert!(y.max_abs_diff(&ys) <= 1e-12);
        }
    }

    #[test]
    fn softmax_fixed_examples() {
        let y = softmax_axis(&Tensor::<f64>::zeros(&[3]), 0).unwrap();
        for p in y.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let y = softmax_axis(&Tensor::new(vec![2], vec![0.0f64, 3f64.ln()]).unwrap(), 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_along_middle_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_fn(&[2, 5, 3], |_| rng.random_range(-3.0..3.0));
        let y = softmax_axis(&x, 1).unwrap();
        for a in 0..2 {
            for c in 0..3 {
                let s: f64 = (0..5).map(|k| y.at(&[a, k, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax_axis(&x, 3).is_err());
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(&[3, 4], |_| rng.random_range(-2.0..2.0));
        let g = Tensor::<f64>::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        let y = softmax_axis(&x, 1).unwrap();
        let dx = softmax_axis_backward(&y, &g, 1).unwrap();
        let h = 1e-3;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let num = (softmax_axis(&xp, 1).unwrap().dot_f64(&g) - softmax_axis(&xm, 1).unwrap().dot_f64(&g)) / (2.0 * h);
            let rel = (num - dx.data()[i]).abs() / num.abs().max(dx.data()[i].abs()).max(1e-6);
            assert!(rel <= 1e-4);
        }
    }

    #[test]
    fn instance_norm_constant_plane_is_zero() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let (y, _) = instance_norm(&x, 1e-5, None).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn instance_norm_two_values() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let (y, _) = instance_norm(&x, 0.0, None).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn instance_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-3.0..3.0));
        let (y, _) = instance_norm(&x, 1e-5, None).unwrap();
        for plane in y.data().chunks(64) {
            let mean: f64 = plane.iter().sum::<f64>() / 64.0;
            let var: f64 = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn instance_norm_needs_two_values() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        assert!(instance_norm(&x, 1e-5, None).is_err());
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |_| rng.random_range(-2.0..2.0));
        let gamma = Tensor::<f64>::from_fn(&[2], |_| rng.random_range(0.5..1.5));
        let beta = Tensor::<f64>::from_fn(&[2], |_| rng.random_range(-0.5..0.5));
        let g = Tensor::<f64>::from_fn(x.shape(), |_| rng.random_range(-1.0..1.0));
        let obj = |x: &Tensor<f64>, gm: &Tensor<f64>, bt: &Tensor<f64>| {
            instance_norm(x, 1e-5, Some((gm, bt))).unwrap().0.dot_f64(&g)
        };
        let (_, cache) = instance_norm(&x, 1e-5, Some((&gamma, &beta))).unwrap();
        let grads = instance_norm_backward(&cache, Some(&gamma), &g).unwrap();
        let h = 1e-3;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (obj(&p, &gamma, &beta) - obj(&m, &gamma, &beta)) / (2.0 * h);
            assert!(rel(grads.input.data()[i], num) <= 1e-4);
        }
        for i in 0..2 {
            let (mut p, mut m) = (gamma.clone(), gamma.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (obj(&x, &p, &beta) - obj(&x, &m, &beta)) / (2.0 * h);
            assert!(rel(grads.gamma.as_ref().unwrap().data()[i], num) <= 1e-4);
            let (mut p, mut m) = (beta.clone(), beta.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (obj(&x, &gamma, &p) - obj(&x, &gamma, &m)) / (2.0 * h);
            assert!(rel(grads.beta.as_ref().unwrap().data()[i], num) <= 1e-4);
        }
    }

    #[test]
    fn leaky_relu_and_backward() {
        let x = Tensor::<f64>::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[-0.2, 0.5, 2.0]);
        let g = leaky_relu_backward(&x, &Tensor::full(&[3], 1.0), 0.2).unwrap();
        assert_eq!(g.data(), &[0.2, 1.0, 1.0]);
    }
}
