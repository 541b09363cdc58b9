use disentangle::adam::{adam_step, AdamConfig, AdamState};
use disentangle::mask::{compute_mask, compute_mask_with_noise, split_features, MaskMode, MaskNet};
use disentangle::mlp::{MlpGrads, MlpParams, OutputActivation, PROB_CLAMP};
use disentangle::noise::{sample_gumbel, Distribution};
use disentangle::objective::{
    adversary_loss, bce, classifier_objective, kl_consistency, sample_drop_mask, LossParts, LossWeights,
    total_loss,
};
use disentangle::{DenseMatrix, NoiseSource};
use proptest::prelude::*;

fn probs(noise: &mut NoiseSource, n: usize) -> Vec<f64> {
    (0..n).map(|_| noise.uniform_range(0.01, 0.99)).collect()
}

fn labels(noise: &mut NoiseSource, n: usize) -> Vec<f64> {
    (0..n).map(|_| noise.bernoulli(0.5) as u8 as f64).collect()
}

fn permute<T: Copy>(v: &[T], p: &[usize]) -> Vec<T> {
    p.iter().map(|&i| v[i]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_reconstructs_exactly(n in 1usize..20, d in 1usize..12, seed in any::<u64>(), scale in -20i32..20) {
        let mut noise = NoiseSource::new(seed);
        let s = 2f64.powi(scale);
        let e = DenseMatrix::from_fn(n, d, |_, _| s * noise.normal());
        let net = MaskNet::new(d, noise.uniform_range(0.1, 5.0), 1.0, &mut noise).unwrap();
        let (m, _) = compute_mask(&e, &net, MaskMode::Stochastic, &mut noise).unwrap();
        let split = split_features(&e, &m).unwrap();
        for i in 0..n * d {
            prop_assert_eq!(split.z_c.data()[i] + split.z_nc.data()[i], e.data()[i]);
        }
    }

    #[test]
    fn mask_is_monotone_in_temperature(d in 1usize..8, seed in any::<u64>(), t1 in 0.1f64..5.0, t2 in 0.1f64..5.0) {
        let mut noise = NoiseSource::new(seed);
        let e = noise.sample(Distribution::StandardNormal, 6, d);
        let g = sample_gumbel(&mut noise, 6, d);
        let mut net = MaskNet::new(d, 1.0, 1.0, &mut noise).unwrap();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let logits = net.net.forward(&e).unwrap().0;
        net.temperature = lo;
        let m_lo = compute_mask_with_noise(&e, &net, Some(g.clone())).unwrap().0;
        net.temperature = hi;
        let m_hi = compute_mask_with_noise(&e, &net, Some(g.clone())).unwrap().0;
        for i in 0..6 * d {
            let x = logits.data()[i] + g.data()[i];
            if x > 0.0 {
                prop_assert!(m_hi.data()[i] <= m_lo.data()[i]);
            } else if x < 0.0 {
                prop_assert!(m_hi.data()[i] >= m_lo.data()[i]);
            }
        }
    }

    #[test]
    fn deterministic_mode_is_zero_noise(d in 1usize..8, seed in any::<u64>()) {
        let mut noise = NoiseSource::new(seed);
        let e = noise.sample(Distribution::StandardNormal, 5, d);
        let net = MaskNet::new(d, 0.7, 1.0, &mut noise).unwrap();
        let a = compute_mask(&e, &net, MaskMode::Deterministic, &mut noise).unwrap().0;
        let b = compute_mask_with_noise(&e, &net, Some(DenseMatrix::zeros(5, d))).unwrap().0;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mlp_is_deterministic_and_clamped(d in 1usize..10, seed in any::<u64>(), big in 1.0f64..1e4) {
        let mut noise = NoiseSource::new(seed);
        let net = MlpParams::xavier(&[d, 3, 2], OutputActivation::Sigmoid, &mut noise).unwrap();
        let x = noise.sample(Distribution::StandardNormal, 7, d).scale(big);
        let a = net.forward(&x).unwrap().0;
        let b = net.forward(&x).unwrap().0;
        prop_assert_eq!(&a, &b);
        for &p in a.data() {
            prop_assert!((PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p));
        }
    }

    #[test]
    fn adam_with_zero_gradient_is_a_fixed_point(seed in any::<u64>(), steps in 0usize..5, lr in 1e-5f64..1.0) {
        let mut noise = NoiseSource::new(seed);
        let mut p = MlpParams::xavier(&[4, 3, 1], OutputActivation::Sigmoid, &mut noise).unwrap();
        let mut state = AdamState::new(&p, AdamConfig::default());
        for _ in 0..steps {
            let mut g = MlpGrads::zeros_like(&p);
            for l in &mut g.layers {
                l.weight.data_mut().iter_mut().for_each(|w| *w = noise.normal());
            }
            adam_step(&mut p, &g, &mut state, lr).unwrap();
        }
        let before = p.clone();
        let zero = MlpGrads::zeros_like(&p);
        adam_step(&mut p, &zero, &mut state, lr).unwrap();
        prop_assert_eq!(p, before);
    }

    #[test]
    fn losses_are_permutation_invariant(n in 1usize..30, seed in any::<u64>()) {
        let mut noise = NoiseSource::new(seed);
        let (p, q, y) = (probs(&mut noise, n), probs(&mut noise, n), labels(&mut noise, n));
        let perm = noise.permutation(n);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        prop_assert!(close(bce(&p, &y).unwrap(), bce(&permute(&p, &perm), &permute(&y, &perm)).unwrap()));
        prop_assert!(close(
            adversary_loss(&p, &y).unwrap().total(),
            adversary_loss(&permute(&p, &perm), &permute(&y, &perm)).unwrap().total()
        ));
        prop_assert!(close(
            kl_consistency(&p, &q).unwrap(),
            kl_consistency(&permute(&p, &perm), &permute(&q, &perm)).unwrap()
        ));
    }

    #[test]
    fn kl_is_zero_on_the_diagonal_and_non_negative(n in 1usize..30, seed in any::<u64>()) {
        let mut noise = NoiseSource::new(seed);
        let (p, q) = (probs(&mut noise, n), probs(&mut noise, n));
        prop_assert_eq!(kl_consistency(&p, &p).unwrap(), 0.0);
        prop_assert!(kl_consistency(&p, &q).unwrap() >= 0.0);
    }

    #[test]
    fn total_recomposes_from_parts(seed in any::<u64>()) {
        let mut noise = NoiseSource::new(seed);
        let mut u = || noise.uniform_range(0.0, 3.0);
        let parts = LossParts { cls: u(), adv: u(), mask_l1: u(), mask_hsic: u(), inv: u() };
        let w = LossWeights { alpha: u(), beta: u(), lambda1: u(), lambda2: u(), drop_p: 0.1 };
        let b = total_loss(parts, &w).unwrap();
        prop_assert!((b.recompose(&w) - b.total).abs() <= 1e-12);
    }

    #[test]
    fn no_drop_means_no_invariance_gradient(n in 2usize..12, d in 1usize..6, seed in any::<u64>()) {
        let mut noise = NoiseSource::new(seed);
        let z = noise.sample(Distribution::StandardNormal, n, d);
        let y = labels(&mut noise, n);
        let h = MlpParams::xavier(&[d, 1], OutputActivation::Sigmoid, &mut noise).unwrap();
        let drop = sample_drop_mask(n, d, 0.0, &mut noise);
        let (_, inv, with_inv) = classifier_objective(&h, &z, &drop, &y, 1.0).unwrap();
        let (_, _, without) = classifier_objective(&h, &z, &drop, &y, 0.0).unwrap();
        prop_assert_eq!(inv, 0.0);
        prop_assert_eq!(with_inv.to_flat(), without.to_flat());
    }
}
