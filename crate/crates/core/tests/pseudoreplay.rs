mod common;

use common::random_tensor;
use ncdwf_core::nn::{Activation, DenseNet, Layer};
use ncdwf_core::pseudoreplay::{
    compute_class_means, generate_pseudo_dataset, invert_latents, invert_latents_traced, mix_with_class_mean,
    sample_alpha, InversionConfig,
};
use ncdwf_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear(weight: Tensor) -> DenseNet {
    let bias = Tensor::zeros(1, weight.rows());
    DenseNet::from_layers(vec![Layer { weight, bias }], Activation::Identity).unwrap()
}

#[test]
fn linear_inversion_closed_form_is_exact_on_dyadic_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let (m, h) = (rng.random_range(2..6), rng.random_range(2..8));
        // Multiples of 1/8 in a small range keep every intermediate exact.
        let dyadic = |rng: &mut ChaCha8Rng| rng.random_range(-16i32..16) as f64 / 8.0;
        let w = Tensor::from_vec(m, h, (0..m * h).map(|_| dyadic(&mut rng)).collect()).unwrap();
        let z1 = Tensor::from_vec(3, h, (0..3 * h).map(|_| dyadic(&mut rng)).collect()).unwrap();
        let (c, l, step) = (rng.random_range(0..m), rng.random_range(1..30), 0.25);
        let z = invert_latents(&linear(w.clone()), c, z1.clone(), l, step).unwrap();
        for r in 0..3 {
            for j in 0..h {
                assert_eq!(z.get(r, j), z1.get(r, j) + (l as f64) * step * w.get(c, j));
            }
        }
    }
}

#[test]
fn linear_inversion_closed_form_on_random_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..50 {
        let (m, h) = (rng.random_range(2..6), rng.random_range(2..8));
        let w = random_tensor(m, h, 1.0, &mut rng);
        let z1 = random_tensor(2, h, 1.0, &mut rng);
        let (c, l, step) = (rng.random_range(0..m), 20, 0.1);
        let (z, trace) = invert_latents_traced(&linear(w.clone()), c, z1.clone(), l, step).unwrap();
        let wn2: f64 = w.row_slice(c).iter().map(|v| v * v).sum();
        for r in 0..2 {
            for j in 0..h {
                let want = z1.get(r, j) + l as f64 * step * w.get(c, j);
                assert!((z.get(r, j) - want).abs() < 1e-12);
            }
            for s in trace.windows(2) {
                assert!((s[1][r] - s[0][r] - step * wn2).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn nonlinear_ascent_never_decreases() {
    let cfg = InversionConfig::default();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = DenseNet::new(&[8, 16, 5], Activation::Identity, &mut rng);
        let init = random_tensor(4, 8, 1.0, &mut rng);
        let c = rng.random_range(0..5);
        let (_, trace) = invert_latents_traced(&head, c, init, cfg.iterations, cfg.step_size).unwrap();
        // Individual steps may cross a ReLU kink and dip; the run as a whole
        // must not lose ground.
        for r in 0..4 {
            let (first, last) = (trace[0][r], trace.last().unwrap()[r]);
            assert!(last >= first, "seed {seed}: {first} -> {last}");
        }
    }
}

#[test]
fn relu_head_seed_seven_strictly_ascends() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let head = DenseNet::new(&[8, 16, 5], Activation::Identity, &mut rng);
    let init = ncdwf_core::pseudoreplay::standard_normal(1, 8, &mut rng);
    let (_, trace) = invert_latents_traced(&head, 2, init, 20, InversionConfig::default().step_size).unwrap();
    assert_eq!(trace.len(), 21);
    for s in trace.windows(2) {
        assert!(s[1][0] > s[0][0], "{} -> {}", s[0][0], s[1][0]);
    }
}

#[test]
fn generation_leaves_head_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let head = DenseNet::new(&[6, 12, 4], Activation::Identity, &mut rng);
    let z = random_tensor(40, 6, 1.0, &mut rng);
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let store = compute_class_means(&z, &labels, 4).unwrap();
    let before = head.checksum();
    let set = generate_pseudo_dataset(&head, &store, &InversionConfig::default(), &mut rng).unwrap();
    assert_eq!(head.checksum(), before);
    assert_eq!(set.len(), 4 * InversionConfig::default().per_class);
}

#[test]
fn beta_sample_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for (g, r) in [(1.0, 100.0), (100.0, 1.0), (2.0, 5.0), (1.0, 1.0)] {
        let n = 20_000;
        let mean = (0..n).map(|_| sample_alpha(g, r, &mut rng).unwrap()).sum::<f64>() / n as f64;
        let want = g / (g + r);
        // Beta variance is at most 1/12; four standard errors.
        assert!((mean - want).abs() < 4.0 * (1.0f64 / 12.0 / n as f64).sqrt(), "Beta({g},{r}) mean {mean}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mixed_latent_lies_on_segment(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rng.random_range(1..8);
        let zl = random_tensor(1, h, 5.0, &mut rng);
        let means = random_tensor(2, h, 5.0, &mut rng);
        let store = ncdwf_core::pseudoreplay::ClassMeanStore::from_parts(means.clone(), vec![1, 1]).unwrap();
        let zp = mix_with_class_mean(zl.data(), &store, 1, alpha).unwrap();
        for j in 0..h {
            let (a, b) = (zl.get(0, j), means.get(1, j));
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(zp[j] >= lo - 1e-12 && zp[j] <= hi + 1e-12);
            prop_assert_eq!(zp[j], alpha * a + (1.0 - alpha) * b);
        }
    }
}
