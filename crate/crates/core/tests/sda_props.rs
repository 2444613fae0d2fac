use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stegalift::sda::{
    attention_alignment_loss, coral_distance, mmd_distance, sda_distance, sda_loss, AlignmentConfig,
    AttentionMetric, FeatureMetric, SdaPreset,
};
use stegalift::sfda::AttentionMap;
use stegalift::Tensor;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, c) = t.dims2("rows").unwrap();
    (0..n).map(|i| (0..c).map(|j| t.at2(i, j)).collect()).collect()
}

fn cov_oracle(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, c) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..c).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    (0..c)
        .map(|p| {
            (0..c)
                .map(|q| x.iter().map(|r| (r[p] - mean[p]) * (r[q] - mean[q])).sum::<f64>() / (n as f64 - 1.0))
                .collect()
        })
        .collect()
}

fn coral_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (ca, cb) = (cov_oracle(&rows(a)), cov_oracle(&rows(b)));
    let c = ca.len();
    let mut s = 0.0;
    for p in 0..c {
        for q in 0..c {
            s += (ca[p][q] - cb[p][q]).powi(2);
        }
    }
    s / (4.0 * (c * c) as f64)
}

fn mmd_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (ra, rb) = (rows(a), rows(b));
    let n = ra.len() as f64;
    (0..ra[0].len())
        .map(|j| (ra.iter().map(|r| r[j]).sum::<f64>() / n - rb.iter().map(|r| r[j]).sum::<f64>() / n).powi(2))
        .sum()
}

fn sda_oracle(a: &Tensor, b: &Tensor, gamma: f64) -> f64 {
    coral_oracle(a, b) * (gamma * mmd_oracle(a, b)).exp()
}

fn stack(ts: &[Tensor]) -> Tensor {
    let c = ts[0].shape()[1];
    let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&[data.len() / c, c], data).unwrap()
}

fn random_map(rng: &mut ChaCha8Rng, heads: usize, t: usize) -> AttentionMap {
    AttentionMap {
        maps: Tensor::randn(&[heads, t, t], 0.3, rng),
    }
}

#[test]
fn identical_features_are_at_distance_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let f = Tensor::randn(&[12, 4], 1.0, &mut rng);
    let d = sda_distance(&f, &f, &AlignmentConfig::default()).unwrap();
    assert_eq!((d.value, d.coral, d.mmd), (0.0, 0.0, 0.0));
}

#[test]
fn composition_matches_scalar_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let cfg = AlignmentConfig::default();
    for _ in 0..100 {
        let a = Tensor::randn(&[10, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[10, 3], 1.2, &mut rng);
        let d = sda_distance(&a, &b, &cfg).unwrap();
        let oracle = sda_oracle(&a, &b, 10.0);
        assert!((d.value - oracle).abs() <= 1e-9 * oracle.max(1.0));
        assert!((d.coral - coral_oracle(&a, &b)).abs() <= 1e-12);
        assert!((d.mmd - mmd_oracle(&a, &b)).abs() <= 1e-12);
    }
}

#[test]
fn half_times_e_example() {
    // One channel: a has zero variance, b has variance √2 and mean √0.1,
    // so d_C = (√2)² / 4 = 0.5 and d_M = 0.1.
    let s = (2f64.sqrt() / 2.0).sqrt();
    let m = 0.1f64.sqrt();
    let a = Tensor::zeros(&[2, 1]);
    let b = Tensor::new(&[2, 1], vec![m - s, m + s]).unwrap();
    let d = sda_distance(&a, &b, &AlignmentConfig::default()).unwrap();
    assert!((d.coral - 0.5).abs() <= 1e-12 && (d.mmd - 0.1).abs() <= 1e-12);
    assert!((d.value - 0.5 * std::f64::consts::E).abs() <= 1e-12);
    assert!((d.value - 1.35914).abs() <= 1e-5);
}

#[test]
fn larger_mean_gap_strictly_increases_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let a = Tensor::randn(&[8, 2], 1.0, &mut rng);
    let b = Tensor::randn(&[8, 2], 1.5, &mut rng);
    let cfg = AlignmentConfig::default();
    let gap: Vec<f64> = (0..2).map(|j| (0..8).map(|i| b.at2(i, j) - a.at2(i, j)).sum::<f64>() / 8.0).collect();
    let mut last = 0.0;
    for k in 0..10 {
        // Moving along the mean gap scales d_M by (1 + t)².
        let t = 0.1 * k as f64;
        let shifted = Tensor::from_fn(&[8, 2], |i| b.at2(i / 2, i % 2) + t * gap[i % 2]);
        let d = sda_distance(&a, &shifted, &cfg).unwrap();
        assert!((d.coral - coral_oracle(&a, &b)).abs() <= 1e-12);
        assert!(k == 0 || d.value > last);
        last = d.value;
    }
}

#[test]
fn exponent_is_clamped_and_flagged() {
    let a = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
    let b = Tensor::from_rows(&[&[10.0], &[13.0]]).unwrap();
    let d = sda_distance(&a, &b, &AlignmentConfig::default()).unwrap();
    assert!(d.clamped && d.value.is_finite());
    assert!((d.value - d.coral * 80f64.exp()).abs() <= 1e-9 * d.value);
}

#[test]
fn coral_doubling_matches_covariance_oracle() {
    let a = Tensor::from_rows(&[
        &[0.2, -1.0, 0.5],
        &[1.1, 0.3, -0.7],
        &[-0.4, 0.9, 0.0],
        &[0.8, -0.2, 1.3],
        &[-1.5, 0.6, 0.4],
    ])
    .unwrap();
    let sigma = cov_oracle(&rows(&a));
    let fro: f64 = sigma.iter().flatten().map(|v| v * v).sum();
    let expect = 9.0 * fro / 36.0;
    assert!((coral_distance(&a, &a.scale(2.0)).unwrap() - expect).abs() <= 1e-12);
    assert!(coral_distance(&a, &a.map(|v| v + 3.0)).unwrap().abs() <= 1e-12);
    assert!(coral_distance(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3])).is_err());
}

#[test]
fn mmd_examples() {
    let a = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 2.0], &[2.0, 3.0]]).unwrap();
    let b = Tensor::from_rows(&[&[3.0, 5.0], &[4.0, 6.0], &[5.0, 7.0]]).unwrap();
    assert!((mmd_distance(&a, &b).unwrap() - 25.0).abs() <= 1e-12);
    let shift = Tensor::from_rows(&[&[0.5, -2.0], &[0.5, -2.0], &[0.5, -2.0]]).unwrap();
    assert!((mmd_distance(&a, &a.add(&shift).unwrap()).unwrap() - 4.25).abs() <= 1e-12);
    assert_eq!(mmd_distance(&a, &a).unwrap(), 0.0);
}

#[test]
fn frobenius_attention_examples() {
    let cfg = AlignmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let m = random_map(&mut rng, 2, 5);
    assert_eq!(attention_alignment_loss(std::slice::from_ref(&m), std::slice::from_ref(&m), &cfg).unwrap(), 0.0);
    let mut bumped = m.clone();
    bumped.maps.data_mut()[17] += 0.3;
    let v = attention_alignment_loss(&[m], &[bumped], &cfg).unwrap();
    assert!((v - 0.09).abs() <= 1e-12);
    let eye = AttentionMap {
        maps: Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
    };
    let swap = AttentionMap {
        maps: Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
    };
    assert_eq!(attention_alignment_loss(std::slice::from_ref(&eye), &[swap], &cfg).unwrap(), 4.0);
    let other = random_map(&mut rng, 2, 2);
    assert!(attention_alignment_loss(&[eye], &[other], &cfg).is_err());
}

struct Batch {
    fs: Vec<Tensor>,
    ft: Vec<Tensor>,
    ms: Vec<AttentionMap>,
    mt: Vec<AttentionMap>,
}

fn batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t, c, h) = (3, 4, 3, 2);
    Batch {
        fs: (0..b).map(|_| Tensor::randn(&[t, c], 0.3, &mut rng)).collect(),
        ft: (0..b).map(|_| Tensor::randn(&[t, c], 0.3, &mut rng)).collect(),
        ms: (0..b).map(|_| random_map(&mut rng, h, t)).collect(),
        mt: (0..b).map(|_| random_map(&mut rng, h, t)).collect(),
    }
}

#[test]
fn best_table_preset_is_the_hand_composed_sum() {
    let x = batch(85);
    let cfg = SdaPreset::FaL2AaSda.config();
    let l = sda_loss(&x.fs, &x.ft, &x.ms, &x.mt, &cfg).unwrap();
    let (a, b) = (stack(&x.fs), stack(&x.ft));
    let mse = a.sub(&b).unwrap().sq_norm() / a.numel() as f64;
    let heads = |ms: &[AttentionMap]| {
        stack(&ms.iter().flat_map(|m| (0..m.heads()).map(|h| m.head(h))).collect::<Vec<_>>())
    };
    let aa = sda_oracle(&heads(&x.ms), &heads(&x.mt), 10.0);
    assert!((l.l_d - mse).abs() <= 1e-12);
    assert!((l.l_a - aa).abs() <= 1e-9 * aa.max(1.0));
    assert!((l.total - (mse + aa)).abs() <= 1e-9 * (mse + aa).max(1.0));
}

#[test]
fn disabling_a_term_isolates_the_other() {
    let x = batch(86);
    let full = AlignmentConfig::default();
    let both = sda_loss(&x.fs, &x.ft, &x.ms, &x.mt, &full).unwrap();
    let fa_only = AlignmentConfig { aa: None, ..full.clone() };
    let l = sda_loss(&x.fs, &x.ft, &x.ms, &x.mt, &fa_only).unwrap();
    assert_eq!(l.total, l.l_d);
    assert_eq!(l.l_d, both.l_d);
    let aa_only = AlignmentConfig { fa: None, ..full };
    let l = sda_loss(&x.fs, &x.ft, &x.ms, &x.mt, &aa_only).unwrap();
    assert_eq!(l.total, l.l_a);
    assert_eq!(l.l_a, both.l_a);
}

#[test]
fn identical_branches_give_zero_loss_for_every_metric() {
    let x = batch(87);
    for fa in [FeatureMetric::L2, FeatureMetric::Sda] {
        for aa in [AttentionMetric::Frobenius, AttentionMetric::L2, AttentionMetric::Sda] {
            let cfg = AlignmentConfig { fa: Some(fa), aa: Some(aa), ..AlignmentConfig::default() };
            assert_eq!(sda_loss(&x.fs, &x.fs, &x.ms, &x.ms, &cfg).unwrap().total, 0.0);
        }
    }
}

#[test]
fn table_presets_evaluate_finite() {
    let x = batch(88);
    for p in SdaPreset::TABLE {
        let cfg = p.config();
        let r = sda_loss(&x.fs, &x.ft, &x.ms, &x.mt, &cfg);
        if p == SdaPreset::None {
            assert!(!cfg.is_enabled() && r.is_err());
        } else {
            let l = r.unwrap();
            assert!(l.total.is_finite() && l.total >= 0.0, "{p}: {l:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn distances_are_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[6, 3], 1.0, &mut rng);
        prop_assert!(coral_distance(&a, &b).unwrap() >= 0.0);
        prop_assert!(mmd_distance(&a, &b).unwrap() >= 0.0);
        prop_assert!(sda_distance(&a, &b, &AlignmentConfig::default()).unwrap().value >= 0.0);
    }
}
