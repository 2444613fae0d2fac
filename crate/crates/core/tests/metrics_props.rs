use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegalift::metrics::{auc, binary_metrics, eer, psnr_item, ssim_item};
use stegalift::Tensor;

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                credit += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}

/// Windowed SSIM computed from the textbook formula with two-pass
/// statistics per 8×8 window of the channel-mean images.
fn literal_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = a.dims3("ssim").unwrap();
    let grey = |t: &Tensor, i: usize, j: usize| (0..c).map(|ch| t.at3(ch, i, j)).sum::<f64>() / c as f64;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut vals = Vec::new();
    for i in 0..=h - 8 {
        for j in 0..=w - 8 {
            let xs: Vec<f64> = (0..64).map(|k| grey(a, i + k / 8, j + k % 8)).collect();
            let ys: Vec<f64> = (0..64).map(|k| grey(b, i + k / 8, j + k % 8)).collect();
            let mx = xs.iter().sum::<f64>() / 64.0;
            let my = ys.iter().sum::<f64>() / 64.0;
            let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / 64.0;
            let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / 64.0;
            let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / 64.0;
            vals.push(((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// True when `TPR ≥ FPR` at every threshold, which is exactly when
/// `(FPR + FNR) / 2 ≤ 1/2` at every threshold.
fn never_below_chance(scores: &[f64], labels: &[u8]) -> bool {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    scores.iter().all(|&t| {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 0).count() as f64;
        tp / pos >= fp / neg
    })
}

#[test]
fn chance_level_auc_does_not_bound_eer() {
    // Two thresholds tie on |FPR − FNR| (0.5 each); the first has
    // FPR = 1, FNR = 0.5.
    let scores = [1.0, 0.0, 2.0];
    let labels = [0, 1, 1];
    assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
    assert_eq!(eer(&scores, &labels).unwrap(), 0.75);
    assert!(!never_below_chance(&scores, &labels));
}

#[test]
fn auc_equals_pair_enumeration_on_200_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        let ours = auc(&scores, &labels).unwrap();
        assert!((ours - pair_count_auc(&scores, &labels)).abs() <= 1e-12);
    }
}

#[test]
fn ssim_matches_literal_formula_on_fixtures() {
    let fixtures = [
        (
            Tensor::from_fn(&[1, 16, 16], |i| ((i / 16) as f64 * 0.06 + (i % 16) as f64 * 0.01).min(1.0)),
            Tensor::from_fn(&[1, 16, 16], |i| 0.5 + 0.4 * ((i as f64) * 0.7).sin()),
        ),
        (
            Tensor::from_fn(&[3, 16, 16], |i| ((i * 37 % 101) as f64) / 100.0),
            Tensor::from_fn(&[3, 16, 16], |i| ((i * 53 % 97) as f64) / 96.0),
        ),
        (Tensor::full(&[1, 16, 16], 0.3), Tensor::from_fn(&[1, 16, 16], |i| if i % 2 == 0 { 0.0 } else { 1.0 })),
    ];
    for (a, b) in &fixtures {
        assert!((ssim_item(a, b).unwrap() - literal_ssim(a, b)).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn psnr_and_ssim_are_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[3, 12, 12], |_| rng.random_range(0.0..1.0));
        let b = Tensor::from_fn(&[3, 12, 12], |_| rng.random_range(0.0..1.0));
        prop_assert_eq!(psnr_item(&a, &b).unwrap(), psnr_item(&b, &a).unwrap());
        prop_assert!((ssim_item(&a, &b).unwrap() - ssim_item(&b, &a).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn eer_stays_in_range(scores in prop::collection::vec(0.0..1.0f64, 4..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u8> = scores.iter().map(|_| rng.random_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let e = eer(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        if never_below_chance(&scores, &labels) {
            prop_assert!(e <= 0.5);
        }
    }
}

#[test]
fn separated_scores_and_uniform_offset() {
    let m = binary_metrics(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]).unwrap();
    assert_eq!((m.auc, m.eer), (1.0, 0.0));
    let a = Tensor::full(&[1, 8, 8], 0.25);
    let b = Tensor::full(&[1, 8, 8], 0.3125);
    assert!((psnr_item(&a, &b).unwrap() - 20.0 * 16f64.log10()).abs() < 1e-9);
}
