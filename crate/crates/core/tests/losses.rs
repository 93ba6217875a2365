use alignvtoff_core::gradcheck::{check_inputs, GradCheckConfig};
use alignvtoff_core::losses::{ldm_loss, perceptual_loss, total_loss, total_loss_value, FeatureNet};
use alignvtoff_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], std: f32, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn ldm(a: &Tensor, b: &Tensor) -> f32 {
    let mut g = Graph::inference();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = ldm_loss(&mut g, x, y).unwrap();
    g.value(l).item()
}

fn lpips(net: &FeatureNet, a: &Tensor, b: &Tensor) -> f32 {
    let mut g = Graph::inference();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = perceptual_loss(&mut g, x, y, net).unwrap();
    g.value(l).item()
}

/// Diagonal stripes plus mild noise, `[1, 3, 32, 32]` in `[-1, 1]`.
fn texture(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::randn(&[3 * 32 * 32], 0.05, &mut rng);
    let mut data = vec![0.0; 3 * 32 * 32];
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let i = (c * 32 + y) * 32 + x;
                let stripe = if ((x + y) / 3) % 2 == 0 { 0.6 } else { -0.4 };
                data[i] = (stripe + 0.1 * c as f32 + noise.data()[i]).clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(&[1, 3, 32, 32], data).unwrap()
}

fn shift_right(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                out.data_mut()[(c * 32 + y) * 32 + x] = t.data()[(c * 32 + y) * 32 + (x + 31) % 32];
            }
        }
    }
    out
}

fn scramble(t: &Tensor, seed: u64) -> Tensor {
    let mut idx: Vec<usize> = (0..32 * 32).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = t.clone();
    for c in 0..3 {
        for (dst, &src) in idx.iter().enumerate() {
            out.data_mut()[c * 1024 + dst] = t.data()[c * 1024 + src];
        }
    }
    out
}

#[test]
fn ldm_loss_examples() {
    let e = rand_t(&[2, 4, 8, 8], 1.0, 1);
    assert_eq!(ldm(&e, &e), 0.0);
    assert!((ldm(&e.map(|v| v + 1.0), &e) - 1.0).abs() < 1e-6);
    let p = rand_t(&[1, 4, 8, 8], 1.0, 2);
    let q = rand_t(&[1, 4, 8, 8], 1.0, 3);
    let oracle: f64 = p.data().iter().zip(q.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 256.0;
    assert!((ldm(&p, &q) as f64 - oracle).abs() < 1e-6 * oracle);
    let mut g = Graph::inference();
    let (a, b) = (g.constant(p), g.constant(Tensor::zeros(&[1, 4, 8, 9])));
    assert!(ldm_loss(&mut g, a, b).is_err());
}

#[test]
fn perceptual_loss_identity_and_symmetry() {
    let net = FeatureNet::new();
    let x = texture(4);
    let y = rand_t(&[1, 3, 32, 32], 0.5, 5);
    assert_eq!(lpips(&net, &x, &x), 0.0);
    let (d1, d2) = (lpips(&net, &x, &y), lpips(&net, &y, &x));
    assert!(d1 > 0.0);
    assert_eq!(d1, d2);
}

#[test]
fn scrambled_texture_is_farther_than_shifted() {
    let net = FeatureNet::new();
    for seed in 0..5 {
        let x = texture(10 + seed);
        let shifted = lpips(&net, &x, &shift_right(&x));
        let scrambled = lpips(&net, &x, &scramble(&x, seed));
        assert!(scrambled > shifted, "seed {seed}: scrambled {scrambled} vs shifted {shifted}");
    }
}

#[test]
fn feature_net_is_fixed() {
    let a = FeatureNet::new();
    let b = FeatureNet::new();
    assert_eq!(a.store.checksums(), b.store.checksums());
    assert_eq!(a.store.trainable_count(), 0);
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss_value(1.0, 2.0, 0.0).unwrap(), 1.0);
    assert!((total_loss_value(1.0, 2.0, 0.05).unwrap() - 1.1).abs() < 1e-7);
    assert!(total_loss_value(f32::NAN, 1.0, 0.05).is_err());
    let mut g = Graph::inference();
    let (a, b) = (g.constant(Tensor::scalar(1.0)), g.constant(Tensor::scalar(2.0)));
    let t = total_loss(&mut g, a, b, 0.05).unwrap();
    assert!((g.value(t).item() - 1.1).abs() < 1e-7);
}

#[test]
fn ldm_gradient_matches_finite_differences() {
    let reps = check_inputs(&[rand_t(&[2, 4, 8, 8], 1.0, 6), rand_t(&[2, 4, 8, 8], 1.0, 7)], GradCheckConfig::default(), |g, v| {
        ldm_loss(g, v[0], v[1])
    })
    .unwrap();
    for r in &reps {
        assert!(r.quantile(0.9) < 1e-3, "ldm p90 {:.2e}", r.quantile(0.9));
    }
}

#[test]
fn perceptual_gradient_matches_finite_differences() {
    let net = FeatureNet::new();
    let y = rand_t(&[1, 3, 16, 16], 0.5, 9);
    let reps = check_inputs(&[rand_t(&[1, 3, 16, 16], 0.5, 8)], GradCheckConfig::default(), |g, v| {
        let yc = g.constant(y.clone());
        perceptual_loss(g, v[0], yc, &net)
    })
    .unwrap();
    let r = &reps[0];
    assert!(r.quantile(0.9) < 1e-3, "perceptual p90 {:.2e} (max {:.2e})", r.quantile(0.9), r.max());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn perceptual_loss_is_nonnegative(seed in 0u64..1000) {
        let net = FeatureNet::new();
        let a = rand_t(&[1, 3, 16, 16], 0.5, seed);
        let b = rand_t(&[1, 3, 16, 16], 0.5, seed + 1);
        prop_assert!(lpips(&net, &a, &b) >= 0.0);
        prop_assert_eq!(lpips(&net, &a, &a), 0.0);
    }

    #[test]
    fn total_loss_is_affine_in_weight(l in 0.0f32..10.0, p in 0.0f32..10.0, w in 0.0f32..1.0) {
        let t0 = total_loss_value(l, p, 0.0).unwrap();
        let t1 = total_loss_value(l, p, 1.0).unwrap();
        let tw = total_loss_value(l, p, w).unwrap();
        prop_assert!((tw - (t0 + w * (t1 - t0))).abs() <= 1e-5 * (1.0 + tw.abs()));
    }
}
