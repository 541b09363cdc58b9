use disentangle::dataset::LabeledBatch;
use disentangle::metrics::{accuracy, average_precision, mask_recovery};
use disentangle::mlp::{MlpParams, OutputActivation};
use disentangle::report::{evaluate_dataset, MetricsReport};
use disentangle::trainer::{ModelBundle, TrainConfig};
use disentangle::{DenseMatrix, Error, NoiseSource};
use proptest::prelude::*;

/// Precision at every prefix that ends on a positive, averaged over positives,
/// with ties ordered by original index.
fn brute_force_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Insertion sort: descending score, earlier index first on ties.
    for i in 1..n {
        let mut j = i;
        while j > 0 && scores[order[j]] > scores[order[j - 1]] {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let mut sum = 0.0;
    for k in 1..=n {
        if labels[order[k - 1]] == 1 {
            let hits = order[..k].iter().filter(|&&i| labels[i] == 1).count();
            sum += hits as f64 / k as f64;
        }
    }
    sum / positives as f64
}

fn instance(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut noise = NoiseSource::new(seed);
    let n = 1 + (noise.next_u64() % 50) as usize;
    // Coarse grid so ties are common.
    let scores: Vec<f64> = (0..n).map(|_| (noise.uniform() * 6.0).floor() / 5.0).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| noise.bernoulli(0.4) as u8).collect();
    let k = (noise.next_u64() % n as u64) as usize;
    labels[k] = 1;
    (scores, labels)
}

#[test]
fn ap_matches_brute_force_exactly() {
    for seed in 0..1000 {
        let (s, y) = instance(seed);
        assert_eq!(average_precision(&s, &y).unwrap(), brute_force_ap(&s, &y), "seed {seed}");
    }
}

#[test]
fn worked_examples() {
    assert!((accuracy(&[0.9, 0.4, 0.6], &[1, 1, 0], 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(accuracy(&[0.5; 4], &[1, 0, 1, 0], 0.5).unwrap(), 0.5);
    assert!((average_precision(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[0, 0, 1]).unwrap(), 1.0 / 3.0);
    assert!(matches!(average_precision(&[0.2, 0.1], &[0, 0]), Err(Error::UndefinedMetric(_))));
    assert!(accuracy(&[], &[], 0.5).is_err());

    let truth: Vec<usize> = (0..8).collect();
    let mut mask = vec![0.0; 16];
    for m in mask.iter_mut().take(9) {
        *m = 0.9;
    }
    let r = mask_recovery(&mask, &truth, 0.5).unwrap();
    assert!((r.precision - 8.0 / 9.0).abs() < 1e-15);
    assert_eq!(r.recall, 1.0);
    assert!((r.iou - 8.0 / 9.0).abs() < 1e-15);
    assert_eq!(mask_recovery(&[0.0; 16], &truth, 0.5).unwrap().recall, 0.0);
}

#[test]
fn report_aggregate_is_the_row_mean() {
    let mut noise = NoiseSource::new(2);
    let mut bundle = ModelBundle::init(8, &TrainConfig::default(), &mut noise).unwrap();
    bundle.classifier_h = MlpParams::xavier(&[8, 1], OutputActivation::Sigmoid, &mut noise).unwrap();
    let rows: Vec<_> = (0..5)
        .map(|k| {
            let n = 10 + k;
            let e = DenseMatrix::from_fn(n, 8, |_, _| noise.normal());
            let y = (0..n).map(|i| (i % 3 == 0) as u8).collect();
            let b = LabeledBatch::new(e, y, 0).unwrap();
            evaluate_dataset(&bundle, &format!("set{k}"), &b, 0.5).unwrap()
        })
        .collect();
    let r = MetricsReport::new(rows.clone(), 0.5).unwrap();
    let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
    assert!((r.aggregate.accuracy - mean).abs() <= 1e-12);
    for row in &r.rows {
        assert!((0.0..=1.0).contains(&row.accuracy));
        assert!(row.average_precision.is_some_and(|ap| (0.0..=1.0).contains(&ap)));
    }
}

fn tie_free() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40, any::<u64>()).prop_map(|(n, seed)| {
        let mut noise = NoiseSource::new(seed);
        let perm = noise.permutation(n);
        let scores = perm.iter().map(|&r| (r as f64 + 0.5) / n as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| noise.bernoulli(0.5) as u8).collect();
        labels[0] = 1;
        (scores, labels)
    })
}

proptest! {
    #[test]
    fn ap_invariant_under_monotone_transform((s, y) in tie_free()) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(average_precision(&s, &y).unwrap(), average_precision(&t, &y).unwrap());
    }

    #[test]
    fn invariant_under_joint_permutation((s, y) in tie_free(), seed in any::<u64>()) {
        let perm = NoiseSource::new(seed).permutation(s.len());
        let ps: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
        let py: Vec<u8> = perm.iter().map(|&i| y[i]).collect();
        prop_assert_eq!(average_precision(&s, &y).unwrap(), average_precision(&ps, &py).unwrap());
        prop_assert_eq!(accuracy(&s, &y, 0.5).unwrap(), accuracy(&ps, &py, 0.5).unwrap());
    }

    #[test]
    fn ap_in_unit_interval((s, y) in tie_free()) {
        let ap = average_precision(&s, &y).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }
}
