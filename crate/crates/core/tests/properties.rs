use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dp3df::dp3df::{apply_dp3df, apply_dp3df_naive, apply_dp3df_tiled, normalize_filters, FilterGeometry};
use dp3df::io::{decode_container, decode_ppm, encode_container, encode_ppm, quantize_value};
use dp3df::metrics::{psnr, ssim};
use dp3df::synth::{darken, degrade, DegradeParams};
use dp3df::trainer::Augment;
use dp3df::Tensor;

fn geometry() -> impl Strategy<Value = FilterGeometry> {
    (prop::sample::select(vec![1usize, 3, 5]), 1usize..=3, prop::bool::ANY, prop::bool::ANY, prop::bool::ANY)
        .prop_filter_map("kt <= frames", |(t, r, a, b, c)| {
            let k = |x: bool| if x { 3 } else { 1 };
            FilterGeometry::new(r, k(a), k(b), k(c), t).ok()
        })
}

fn random<S: dp3df::Real>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| S::of(rng.random_range(lo..hi)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernels_are_normalized(g in geometry(), h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let raw = random::<f64>(&[h, w, g.raw_channels()], -8.0, 8.0, seed);
        let f = normalize_filters(&raw, &g).unwrap();
        for kernel in f.weights().data().chunks(g.taps()) {
            prop_assert!(kernel.iter().all(|&v| v > 0.0));
            prop_assert!((kernel.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(f.luma().data().iter().all(|&l| l > 1.0));
    }

    #[test]
    fn constant_clip_is_scaled_by_luma(g in geometry(), h in 1usize..6, w in 1usize..6, c in 0.0f64..1.0, seed in any::<u64>()) {
        let raw = random::<f64>(&[h, w, g.raw_channels()], -4.0, 4.0, seed);
        let f = normalize_filters(&raw, &g).unwrap();
        let clip = Tensor::full(&[g.frames, h, w, 2], c);
        let z = apply_dp3df(&clip, &f).unwrap();
        let r = g.r;
        for i in 0..h * r {
            for j in 0..w * r {
                let l = f.luma().at(&[i / r, j / r, (i % r) * r + j % r]);
                for ch in 0..2 {
                    prop_assert!((z.at(&[i, j, ch]) - c * l).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn variants_agree_with_naive(g in geometry(), h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let raw = random::<f32>(&[h, w, g.raw_channels()], -3.0, 3.0, seed);
        let clip = random::<f32>(&[g.frames, h, w, 3], 0.0, 1.0, seed ^ 1);
        let f = normalize_filters(&raw, &g).unwrap();
        let naive = apply_dp3df_naive(&clip, &f).unwrap();
        prop_assert!(apply_dp3df_tiled(&clip, &f).unwrap().max_abs_diff(&naive) <= 1e-6);
        prop_assert!(apply_dp3df(&clip, &f).unwrap().max_abs_diff(&naive) <= 1e-6);
        prop_assert!(naive.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), h in 3usize..20, w in 3usize..20) {
        let a = random::<f32>(&[h, w, 3], 0.0, 1.0, seed);
        let b = random::<f32>(&[h, w, 3], 0.0, 1.0, seed ^ 7);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(s <= 1.0 + 1e-9);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn darkening_is_monotone_in_exposure(x in 0.0f64..1.0, e1 in 0.05f64..1.0, e2 in 0.05f64..1.0, gamma in 1.5f64..3.0) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let p = |exposure| DegradeParams { exposure, gamma, ..DegradeParams::default() };
        prop_assert!(darken(x, &p(lo)) <= darken(x, &p(hi)));
        let frame = Tensor::full(&[4, 4, 3], x as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = degrade(&frame, &p(lo).noiseless(), &mut rng).unwrap();
        let b = degrade(&frame, &p(hi).noiseless(), &mut rng).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x <= y));
    }

    #[test]
    fn augmentations_commute_with_upscaling(seed in any::<u64>(), turns in 0u8..4, flip in prop::bool::ANY) {
        let aug = Augment { quarter_turns: turns, flip };
        let lr = random::<f32>(&[3, 5, 4, 2], 0.0, 1.0, seed);
        let hr = Tensor::from_fn(&[15, 12, 2], |k| {
            let (i, j, c) = (k / 24, (k / 2) % 12, k % 2);
            lr.at(&[1, i / 3, j / 3, c])
        });
        let a_lr = aug.clip(&lr).unwrap();
        let a_hr = aug.frame(&hr).unwrap();
        let s = a_lr.shape().to_vec();
        prop_assert_eq!(a_hr.shape(), &[s[1] * 3, s[2] * 3, 2][..]);
        for i in 0..s[1] * 3 {
            for j in 0..s[2] * 3 {
                for c in 0..2 {
                    prop_assert_eq!(a_hr.at(&[i, j, c]), a_lr.at(&[1, i / 3, j / 3, c]));
                }
            }
        }
    }

    #[test]
    fn ppm_round_trips_quantized_frames(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let f = random::<f32>(&[h, w, 3], -0.2, 1.2, seed).map(quantize_value);
        prop_assert_eq!(decode_ppm(&encode_ppm(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn container_round_trips(seed in any::<u64>(), n in 1usize..4) {
        let sections = (0..n)
            .map(|k| (format!("t{k}"), random::<f32>(&[k + 1, 3], -1e3, 1e3, seed + k as u64)))
            .collect::<std::collections::BTreeMap<_, _>>();
        prop_assert_eq!(decode_container(&encode_container(&sections)).unwrap(), sections);
    }
}

#[test]
fn rotating_four_times_is_identity() {
    let x = random::<f32>(&[5, 7, 3], 0.0, 1.0, 3);
    let once = Augment { quarter_turns: 1, flip: false };
    let twice = Augment { quarter_turns: 2, flip: false };
    let mut y = x.clone();
    for _ in 0..4 {
        y = once.frame(&y).unwrap();
    }
    assert_eq!(y, x);
    assert_eq!(once.frame(&once.frame(&x).unwrap()).unwrap(), twice.frame(&x).unwrap());
}
