use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegalift::sfda::{
    diff_attention, effective_lambda, multi_head_diff_attention, project_qkv, sfda_block, wfda, DecoderParams,
    DiffAttnConfig, DiffAttnParams,
};
use stegalift::tensor::RMS_EPS;
use stegalift::Tensor;

type M = DMatrix<f64>;

fn na(t: &Tensor) -> M {
    let (r, c) = t.dims2("na").unwrap();
    M::from_row_slice(r, c, t.data())
}

fn rms(x: &M) -> M {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        row /= (ms + RMS_EPS).sqrt();
    }
    out
}

fn softmax(s: &M) -> M {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

fn attn(q: &M, k: &M, d: usize) -> M {
    softmax(&(q * k.transpose() / (d as f64).sqrt()))
}

fn lambda_oracle(p: &DiffAttnParams) -> f64 {
    let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    let raw = dot(&p.lambda_q1, &p.lambda_k1).exp() - dot(&p.lambda_q2, &p.lambda_k2).exp() + p.cfg.lambda_init;
    raw.clamp(0.0, 1.0)
}

/// Maps and head outputs computed line by line with WFDA off.
fn literal_heads(x: &Tensor, xbar: &Tensor, p: &DiffAttnParams) -> (Vec<M>, M) {
    let (xn, xbn) = (rms(&na(x)), rms(&na(xbar)));
    let lambda = lambda_oracle(p);
    let d = p.cfg.head_dim;
    let mut maps = Vec::new();
    let mut cols = Vec::new();
    for h in &p.heads {
        let a1 = attn(&(&xn * na(&h.wq)), &(&xn * na(&h.wk)), d);
        let a2 = attn(&(&xbn * na(&h.wlq)), &(&xbn * na(&h.wlk)), d);
        let a = a1 - a2 * lambda;
        let head = rms(&(&a * (&xn * na(&h.wv)))) * (1.0 - p.cfg.lambda_init);
        maps.push(a);
        cols.push(head);
    }
    let t = x.shape()[0];
    let mut cat = M::zeros(t, d * cols.len());
    for (i, c) in cols.iter().enumerate() {
        cat.view_mut((0, i * d), (t, d)).copy_from(c);
    }
    (maps, cat * na(&p.wo))
}

fn inputs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> (Tensor, Tensor, Tensor) {
    let map = Tensor::randn(&[c, h, w], 1.0, rng);
    let x = map.to_tokens().unwrap();
    let xbar = Tensor::randn(&[h * w, c], 1.0, rng);
    (x, xbar, map)
}

fn random_layer(rng: &mut ChaCha8Rng, c: usize, heads: usize, wfda: bool) -> DiffAttnParams {
    let mut p = DiffAttnParams::random(DiffAttnConfig::standard(c, heads, wfda).unwrap(), rng).unwrap();
    // Wider λ vectors so draws land inside and on both clamp boundaries.
    let spread = rng.random_range(0.1..1.5);
    for v in [&mut p.lambda_q1, &mut p.lambda_k1, &mut p.lambda_q2, &mut p.lambda_k2] {
        *v = Tensor::randn(v.shape(), spread, rng);
    }
    p
}

#[test]
fn rows_sum_to_one_minus_lambda_over_200_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for wfda_on in [true, false] {
        for _ in 0..200 {
            let p = random_layer(&mut rng, 4, 2, wfda_on);
            let (x, xbar, map) = inputs(&mut rng, 4, 4, 6);
            let lambda = effective_lambda(&p).unwrap();
            let a = diff_attention(&x, &xbar, &map, &p).unwrap();
            for s in a.row_sums() {
                assert!((s - (1.0 - lambda)).abs() <= 1e-6, "row sum {s} vs 1 - {lambda}");
            }
        }
    }
}

#[test]
fn zero_lambda_without_wfda_is_standard_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    for _ in 0..20 {
        let mut p = random_layer(&mut rng, 6, 3, false);
        let d = p.cfg.head_dim;
        // exp(0) − exp(ln 3) + 0.8 < 0 clamps to exactly zero.
        p.lambda_q1 = Tensor::zeros(&[d]);
        p.lambda_k1 = Tensor::zeros(&[d]);
        p.lambda_q2 = Tensor::from_fn(&[d], |i| if i == 0 { 3f64.ln() } else { 0.0 });
        p.lambda_k2 = Tensor::from_fn(&[d], |i| if i == 0 { 1.0 } else { 0.0 });
        assert_eq!(effective_lambda(&p).unwrap(), 0.0);
        let (x, xbar, map) = inputs(&mut rng, 6, 4, 4);
        let a = diff_attention(&x, &xbar, &map, &p).unwrap();
        let xn = rms(&na(&x));
        for (i, h) in p.heads.iter().enumerate() {
            let reference = attn(&(&xn * na(&h.wq)), &(&xn * na(&h.wk)), d);
            assert!((na(&a.head(i)) - reference).abs().max() <= 1e-9);
        }
    }
}

#[test]
fn lambda_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let mut p = random_layer(&mut rng, 4, 2, false);
    let zero = Tensor::zeros(&[2]);
    p.lambda_q1 = zero.clone();
    p.lambda_k1 = zero.clone();
    p.lambda_q2 = zero.clone();
    p.lambda_k2 = zero;
    assert!((effective_lambda(&p).unwrap() - 0.8).abs() <= 1e-15);

    p.lambda_q1 = Tensor::new(&[2], vec![3f64.ln(), 0.0]).unwrap();
    p.lambda_k1 = Tensor::new(&[2], vec![1.0, 5.0]).unwrap();
    p.lambda_q2 = Tensor::new(&[2], vec![0.0, 2f64.ln()]).unwrap();
    p.lambda_k2 = Tensor::new(&[2], vec![7.0, 1.0]).unwrap();
    assert_eq!(effective_lambda(&p).unwrap(), 1.0);

    p.lambda_q2 = p.lambda_q1.clone();
    p.lambda_k2 = p.lambda_k1.clone();
    assert!((effective_lambda(&p).unwrap() - 0.8).abs() <= 1e-15);
}

#[test]
fn tied_streams_with_unit_lambda_cancel() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut p = random_layer(&mut rng, 4, 2, false);
    for h in &mut p.heads {
        h.wlq = h.wq.clone();
        h.wlk = h.wk.clone();
    }
    p.lambda_q1 = Tensor::full(&[2], 1.0);
    p.lambda_k1 = Tensor::full(&[2], 1.0);
    p.lambda_q2 = Tensor::zeros(&[2]);
    p.lambda_k2 = Tensor::zeros(&[2]);
    assert_eq!(effective_lambda(&p).unwrap(), 1.0);
    let (x, _, map) = inputs(&mut rng, 4, 2, 4);
    let qkv = project_qkv(&x, &x, &p).unwrap();
    for [q1, q2, k1, k2, _] in &qkv {
        assert_eq!(q1, q2);
        assert_eq!(k1, k2);
    }
    let a = diff_attention(&x, &x, &map, &p).unwrap();
    assert!(a.maps.max_abs() <= 1e-15);
}

#[test]
fn zero_low_pass_stream_gives_uniform_subtrahend() {
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    let p = random_layer(&mut rng, 4, 1, false);
    let (x, _, _) = inputs(&mut rng, 4, 2, 3);
    let qkv = project_qkv(&x, &Tensor::zeros(&[6, 4]), &p).unwrap();
    assert!(qkv[0][1].max_abs() == 0.0 && qkv[0][3].max_abs() == 0.0);
}

#[test]
fn token_permutation_permutes_output_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..20 {
        let p = random_layer(&mut rng, 4, 2, false);
        let (x, xbar, map) = inputs(&mut rng, 4, 3, 4);
        let t = 12;
        let mut perm: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |m: &Tensor| Tensor::from_fn(&[t, 4], |k| m.at2(perm[k / 4], k % 4));
        let y = multi_head_diff_attention(&x, &xbar, &map, &p).unwrap();
        let yp = multi_head_diff_attention(&permute(&x), &permute(&xbar), &map, &p).unwrap();
        assert!(yp.max_abs_diff(&permute(&y)) <= 1e-12);
    }
}

#[test]
fn two_head_layer_matches_literal_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let p = random_layer(&mut rng, 4, 2, false);
    let (x, xbar, map) = inputs(&mut rng, 4, 2, 2);
    let (maps, out) = literal_heads(&x, &xbar, &p);
    let a = diff_attention(&x, &xbar, &map, &p).unwrap();
    for (i, m) in maps.iter().enumerate() {
        assert!((na(&a.head(i)) - m).abs().max() <= 1e-12);
    }
    let ours = multi_head_diff_attention(&x, &xbar, &map, &p).unwrap();
    assert!((na(&ours) - out).abs().max() <= 1e-12);
}

#[test]
fn zero_values_give_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(68);
    let mut p = random_layer(&mut rng, 4, 2, true);
    for h in &mut p.heads {
        h.wv = Tensor::zeros(&[4, 2]);
    }
    let (x, xbar, map) = inputs(&mut rng, 4, 2, 2);
    assert!(multi_head_diff_attention(&x, &xbar, &map, &p).unwrap().max_abs() == 0.0);
}

#[test]
fn block_residual_and_single_head_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(69);
    let mut dp = DecoderParams::random(DiffAttnConfig::standard(4, 1, false).unwrap(), &mut rng).unwrap();
    dp.norm_x = Tensor::new(&[4], vec![1.0, 0.5, 2.0, -1.0]).unwrap();
    dp.norm_xbar = Tensor::new(&[4], vec![0.3, 1.0, 1.5, 0.7]).unwrap();
    let (x, xbar, map) = inputs(&mut rng, 4, 2, 2);

    let gain = |m: M, g: &Tensor| M::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * g.data()[j]);
    let ln_x = gain(rms(&na(&x)), &dp.norm_x);
    let ln_xbar = gain(rms(&na(&xbar)), &dp.norm_xbar);
    let to_t = |m: &M| Tensor::from_fn(&[m.nrows(), m.ncols()], |k| m[(k / m.ncols(), k % m.ncols())]);
    let (_, mh) = literal_heads(&to_t(&ln_x), &to_t(&ln_xbar), &dp.attn);
    let expect = mh * 2.0 + na(&x);
    let ours = sfda_block(&x, &xbar, &map, &dp).unwrap();
    assert_eq!(ours.shape(), x.shape());
    assert!((na(&ours) - expect).abs().max() <= 1e-12);

    dp.attn.cfg.lambda_d = 0.0;
    assert_eq!(sfda_block(&x, &xbar, &map, &dp).unwrap(), x);
}

/// Haar sub-band attention computed with explicit loops on one channel.
fn wfda_brute_force(img: &[[f64; 4]; 4], p: &DiffAttnParams) -> [[f64; 16]; 16] {
    let h = &p.heads[0];
    let bands = h.bands.as_ref().unwrap();
    // Band order ll, lh, hl, hh; coefficient index (bi, bj) → bi * 2 + bj.
    let signs = [[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, 1.0, -1.0], [1.0, -1.0, -1.0, 1.0]];
    let weight = [-1.0, -1.0, 1.0, 1.0];
    let mut coarse = [[0.0; 4]; 4];
    for b in 0..4 {
        let mut coef = [0.0; 4];
        for bi in 0..2 {
            for bj in 0..2 {
                let block = [img[2 * bi][2 * bj], img[2 * bi][2 * bj + 1], img[2 * bi + 1][2 * bj], img[2 * bi + 1][2 * bj + 1]];
                coef[bi * 2 + bj] = (0..4).map(|k| signs[b][k] * block[k]).sum::<f64>() / 2.0;
            }
        }
        let (wq, wk) = (bands[b].q.data()[0], bands[b].k.data()[0]);
        for r in 0..4 {
            let logits: Vec<f64> = (0..4).map(|s| coef[r] * wq * coef[s] * wk).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for s in 0..4 {
                coarse[r][s] += weight[b] * (logits[s] - m).exp() / z;
            }
        }
    }
    let mut out = [[0.0; 16]; 16];
    for t1 in 0..16 {
        for t2 in 0..16 {
            let par = |t: usize| (t / 4 / 2) * 2 + (t % 4) / 2;
            out[t1][t2] = coarse[par(t1)][par(t2)];
        }
    }
    out
}

#[test]
fn wfda_matches_brute_force_on_4x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let cfg = DiffAttnConfig::standard(1, 1, true).unwrap();
    for _ in 0..10 {
        let p = DiffAttnParams::random(cfg.clone(), &mut rng).unwrap();
        let img: [[f64; 4]; 4] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
        let map = Tensor::from_fn(&[1, 4, 4], |k| img[k / 4][k % 4]);
        let ours = wfda(&map, &p).unwrap();
        let oracle = wfda_brute_force(&img, &p);
        for t1 in 0..16 {
            for t2 in 0..16 {
                assert!((ours.at3(0, t1, t2) - oracle[t1][t2]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn wfda_rows_sum_to_zero_and_constants_force_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let p = random_layer(&mut rng, 3, 1, true);
    let map = Tensor::randn(&[3, 4, 6], 1.0, &mut rng);
    let w = wfda(&map, &p).unwrap();
    for row in w.data().chunks(24) {
        assert!(row.iter().sum::<f64>().abs() <= 1e-12);
    }
    // Constant input: every band has identical tokens, so all four
    // softmaxes are uniform and cancel.
    let c = wfda(&Tensor::full(&[3, 4, 6], 0.4), &p).unwrap();
    assert!(c.max_abs() <= 1e-15);
    assert!(wfda(&Tensor::zeros(&[3, 3, 4]), &p).is_err());
}
