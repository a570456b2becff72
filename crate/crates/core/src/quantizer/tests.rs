use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn identities(channels: usize, count: usize) -> Vec<ScaleConv<f64>> {
    (0..count).map(|_| ScaleConv::identity(channels)).collect()
}

#[test]
fn schedule_validation() {
    assert!(ScaleSchedule::new(vec![]).is_err());
    assert!(ScaleSchedule::new(vec![1, 1, 2]).is_err());
    assert!(ScaleSchedule::new(vec![0, 2]).is_err());
    let s = ScaleSchedule::new(vec![1, 2, 4]).unwrap();
    assert_eq!(s.side(), 4);
    assert_eq!(s.token_count(), 1 + 8 + 64);
    let json = serde_json::to_string(&s).unwrap();
    assert_eq!(json, "[1,2,4]");
    assert!(serde_json::from_str::<ScaleSchedule>("[2,1]").is_err());
}

#[test]
fn exact_entry_is_found() {
    let cb = Codebook::<f64>::random(16, 8, 0, 3);
    let v = cb.row(7).to_vec();
    assert_eq!(nearest_code(&cb, &v), (7, 0.0));
}

#[test]
fn ties_go_to_lowest_index() {
    let mut cb = Codebook::<f64>::random(8, 4, 0, 1);
    let row5 = cb.row(5).to_vec();
    cb.entries.data_mut()[2 * 4..3 * 4].copy_from_slice(&row5);
    assert_eq!(nearest_code(&cb, &row5).0, 2);
    assert_eq!(nearest_codes(&cb, &row5, 1), vec![2]);
}

#[test]
fn batched_search_matches_linear_scan() {
    let cb = Codebook::<f32>::random(4096, 16, 0, 11);
    let count = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cols = vec![0f32; 16 * count];
    for (i, v) in cols.iter_mut().enumerate() {
        *v = rng.random_range(-0.5..0.5);
        // a few columns sit exactly on codebook entries
        if i % count < 4 {
            *v = cb.row(100 * (i % count) + 1)[i / count];
        }
    }
    let fast = nearest_codes(&cb, &cols, count);
    for p in 0..count {
        let col: Vec<f32> = (0..16).map(|c| cols[c * count + p]).collect();
        assert_eq!(fast[p], nearest_code(&cb, &col).0, "column {p}");
    }
    assert_eq!(&fast[..4], &[1, 101, 201, 301]);
}

#[test]
fn codebook_init_statistics() {
    let cb = Codebook::<f64>::random(4096, 64, 0, 2);
    let d = cb.entries.data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
    assert!(mean.abs() < 2e-3);
    assert!((var * 64.0 - 1.0).abs() < 0.02, "{var}");
    assert_eq!(cb, Codebook::random(4096, 64, 0, 2));
}

#[test]
fn representable_latent_has_zero_loss() {
    // single full-resolution scale, every column taken from the codebook
    let c = 4;
    let cb = Codebook::<f64>::random(10, c, 0, 7);
    let schedule = ScaleSchedule::new(vec![2]).unwrap();
    let picks = [3, 0, 9, 9, 1, 4, 4, 2];
    let mut latent = Tensor::zeros(&[c, 2, 2, 2]);
    for (p, &k) in picks.iter().enumerate() {
        for ch in 0..c {
            latent.data_mut()[ch * 8 + p] = cb.row(k)[ch];
        }
    }
    let out = quantize_level(&latent, &schedule, &cb, &identities(c, 1), DEFAULT_BETA).unwrap();
    assert!(out.level_loss.abs() < 1e-6);
    assert_eq!(out.tokens, vec![picks.to_vec()]);
    assert_eq!(out.quantized, latent);
    assert_eq!(out.residual_norms.len(), 2);
    assert!(out.residual_norms[1] < 1e-12);
}

#[test]
fn coarsest_scale_quantizes_the_mean() {
    let c = 3;
    let latent = random_tensor(&[c, 4, 4, 4], 8);
    let cb = Codebook::<f64>::random(32, c, 0, 9);
    let schedule = ScaleSchedule::new(vec![1, 4]).unwrap();
    let out = quantize_level(&latent, &schedule, &cb, &identities(c, 2), DEFAULT_BETA).unwrap();
    let mean: Vec<f64> = (0..c).map(|ch| latent.data()[ch * 64..(ch + 1) * 64].iter().sum::<f64>() / 64.0).collect();
    assert_eq!(out.tokens[0], vec![nearest_code(&cb, &mean).0]);
}

#[test]
fn single_scale_on_unit_grid_picks_nearest_code() {
    let c = 5;
    let latent = random_tensor(&[c, 1, 1, 1], 21);
    let cb = Codebook::<f64>::random(64, c, 0, 22);
    let schedule = ScaleSchedule::new(vec![1]).unwrap();
    let out = quantize_level(&latent, &schedule, &cb, &identities(c, 1), DEFAULT_BETA).unwrap();
    let (idx, _) = nearest_code(&cb, latent.data());
    assert_eq!(out.tokens, vec![vec![idx]]);
    assert_eq!(out.quantized.data(), cb.row(idx));
    assert_eq!(out.residual_norms.len(), 2);
}

#[test]
fn zero_code_keeps_final_residual_from_growing() {
    let c = 4;
    for seed in 0..10 {
        let latent = random_tensor(&[c, 4, 4, 4], seed);
        let mut cb = Codebook::<f64>::random(64, c, 0, seed + 100);
        cb.entries.data_mut()[..c].fill(0.0);
        let schedule = ScaleSchedule::new(vec![1, 2, 4]).unwrap();
        let out = quantize_level(&latent, &schedule, &cb, &identities(c, 3), DEFAULT_BETA).unwrap();
        assert_eq!(out.residual_norms.len(), 4);
        let n = out.residual_norms.len();
        assert!(out.residual_norms[n - 1] <= out.residual_norms[n - 2] + 1e-12);
    }
}

/// Independent re-derivation for the schedule `[1, s]` with identity scale convolutions.
#[test]
fn level_loss_matches_direct_computation() {
    let (c, s, beta) = (3, 3, 0.4);
    let latent = random_tensor(&[c, s, s, s], 21);
    let cb = Codebook::<f64>::random(50, c, 0, 22);
    let schedule = ScaleSchedule::new(vec![1, s]).unwrap();
    let out = quantize_level(&latent, &schedule, &cb, &identities(c, 2), beta).unwrap();
    let p = s * s * s;
    let x = latent.data();
    let col = |v: &[f64], q: usize| -> Vec<f64> { (0..c).map(|ch| v[ch * p + q]).collect() };
    let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(u, w)| (u - w).powi(2)).sum() };

    // scale 1: mean column, broadcast back to every position
    let mean: Vec<f64> = (0..c).map(|ch| x[ch * p..(ch + 1) * p].iter().sum::<f64>() / p as f64).collect();
    let k1 = (0..cb.size()).min_by(|&a, &b| sq(cb.row(a), &mean).total_cmp(&sq(cb.row(b), &mean))).unwrap();
    let e1 = cb.row(k1);
    let code1 = sq(e1, &mean) / c as f64;
    let mut fq = vec![0.0; c * p];
    for ch in 0..c {
        fq[ch * p..(ch + 1) * p].fill(e1[ch]);
    }
    let commit1 = sq(&fq, x) / (c * p) as f64;

    // scale s: per-position nearest code to the residual
    let resid: Vec<f64> = x.iter().zip(&fq).map(|(a, b)| a - b).collect();
    let mut code2 = 0.0;
    for q in 0..p {
        let r = col(&resid, q);
        let k = (0..cb.size()).min_by(|&a, &b| sq(cb.row(a), &r).total_cmp(&sq(cb.row(b), &r))).unwrap();
        assert_eq!(out.tokens[1][q], k);
        code2 += sq(cb.row(k), &r);
        for ch in 0..c {
            fq[ch * p + q] += cb.row(k)[ch];
        }
    }
    let code2 = code2 / (c * p) as f64;
    let commit2 = sq(&fq, x) / (c * p) as f64;
    let expected = (beta * commit1 + code1 + beta * commit2 + code2) / 2.0;
    assert!((out.level_loss - expected).abs() < 1e-12, "{} vs {expected}", out.level_loss);
    for (a, b) in out.quantized.data().iter().zip(&fq) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn straight_through_forwards_quantized_and_passes_gradient() {
    let c = 2;
    let latent = random_tensor(&[c, 2, 2, 2], 30);
    let target = random_tensor(&[c, 2, 2, 2], 31);
    let schedule = ScaleSchedule::new(vec![1, 2]).unwrap();
    let cb = Codebook::<f64>::random(16, c, 0, 32);
    let mut g = Graph::new();
    let x = g.param(latent.clone());
    let nodes = LevelNodes {
        codebook: g.param(cb.entries.clone()),
        phi: identities(c, 2).into_iter().map(|p| (g.param(p.weight), g.param(p.bias))).collect(),
    };
    let out = quantize_level_graph(&mut g, x, &schedule, &nodes, DEFAULT_BETA).unwrap();
    assert_eq!(g.value(out.decoder_input), g.value(out.quantized));
    let t = g.input(target.clone());
    let loss = g.mse(out.decoder_input, t);
    g.backward(loss);
    let grad = g.grad(x).unwrap();
    let q = g.value(out.quantized);
    for i in 0..latent.len() {
        let expected = 2.0 * (q.data()[i] - target.data()[i]) / latent.len() as f64;
        assert!((grad.data()[i] - expected).abs() < 1e-12);
    }
    // the decoder loss does not reach the codebook through the straight-through path
    assert!(g.grad(nodes.codebook).is_none_or(|gr| gr.sum_squares() == 0.0));
}

#[test]
fn level_loss_trains_codebook_and_scale_convs() {
    let c = 2;
    let latent = random_tensor(&[c, 2, 2, 2], 40);
    let schedule = ScaleSchedule::new(vec![1, 2]).unwrap();
    let cb = Codebook::<f64>::random(8, c, 0, 41);
    let mut g = Graph::new();
    let x = g.input(latent);
    let nodes = LevelNodes {
        codebook: g.param(cb.entries.clone()),
        phi: identities(c, 2).into_iter().map(|p| (g.param(p.weight), g.param(p.bias))).collect(),
    };
    let out = quantize_level_graph(&mut g, x, &schedule, &nodes, DEFAULT_BETA).unwrap();
    g.backward(out.loss);
    assert!(g.grad(nodes.codebook).unwrap().sum_squares() > 0.0);
    assert!(g.grad(nodes.phi[0].0).unwrap().sum_squares() > 0.0);
}

#[test]
fn shape_errors() {
    let cb = Codebook::<f64>::random(8, 3, 0, 0);
    let s = ScaleSchedule::new(vec![1, 2]).unwrap();
    let bad = Tensor::zeros(&[3, 2, 2, 3]);
    assert!(matches!(quantize_level(&bad, &s, &cb, &identities(3, 2), 0.25), Err(QuantizerError::BadLatent(_))));
    let wrong_side = Tensor::zeros(&[3, 4, 4, 4]);
    assert_eq!(
        quantize_level(&wrong_side, &s, &cb, &identities(3, 2), 0.25).unwrap_err(),
        QuantizerError::ScheduleMismatch { last: 2, side: 4 }
    );
    let wrong_c = Tensor::zeros(&[2, 2, 2, 2]);
    assert!(matches!(
        quantize_level(&wrong_c, &s, &cb, &identities(2, 2), 0.25),
        Err(QuantizerError::ChannelMismatch { .. })
    ));
    let ok = Tensor::zeros(&[3, 2, 2, 2]);
    assert!(matches!(quantize_level(&ok, &s, &cb, &identities(3, 1), 0.25), Err(QuantizerError::PhiCount { .. })));
}

#[test]
fn global_loss_sums_levels() {
    assert_eq!(global_loss(&[0.5, 0.25], 1.0), 1.75);
    assert_eq!(global_loss(&[], 0.3), 0.3);
    assert!((global_loss(&[0.1, 0.2], 0.3) - 0.6).abs() < 1e-12);
}

#[test]
fn utilization_collapsed_and_uniform() {
    let k = 4096;
    let tokens = vec![17usize; 1000];
    let u = utilization(&tokens, k).unwrap();
    assert_eq!(u.perplexity, 1.0);
    assert_eq!(u.dead_fraction, (k - 1) as f64 / k as f64);
    assert_eq!(u.histogram[17], 1000);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let tokens: Vec<usize> = (0..k * 200).map(|_| rng.random_range(0..k)).collect();
    let u = utilization(&tokens, k).unwrap();
    assert!((u.perplexity - k as f64).abs() / (k as f64) < 0.02, "{}", u.perplexity);
    assert_eq!(u.dead_fraction, 0.0);

    assert_eq!(utilization(&[], k).unwrap_err(), QuantizerError::EmptyTokens);
    assert!(matches!(utilization(&[k], k), Err(QuantizerError::TokenRange { .. })));
}

#[test]
fn token_file_round_trip() {
    let file = TokenFile::new(1, &[1, 2], &[vec![4095], (0..8).collect()]);
    let mut buf = Vec::new();
    write_tokens(&mut buf, &file).unwrap();
    assert_eq!(buf.len(), 16 + 2 * 9);
    assert_eq!(&buf[..4], b"SWTK");
    assert_eq!(read_tokens(&mut buf.as_slice()).unwrap(), file);

    let bad = TokenFile::new(0, &[2], &[vec![0; 7]]);
    assert!(matches!(write_tokens(&mut Vec::new(), &bad), Err(TokenFileError::CountMismatch { .. })));
    let big = TokenFile::new(0, &[1], &[vec![70000]]);
    assert!(matches!(write_tokens(&mut Vec::new(), &big), Err(TokenFileError::TokenTooLarge(70000))));
    assert!(matches!(read_tokens(&mut &b"XXXX"[..]), Err(TokenFileError::BadMagic)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn codebook_permutation_permutes_tokens(seed in 0u64..1000) {
        let c = 3;
        let latent = random_tensor(&[c, 2, 2, 2], seed);
        let cb = Codebook::<f64>::random(12, c, 0, seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let mut perm: Vec<usize> = (0..12).collect();
        for i in (1..12).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // row j of the permuted codebook is row perm[j] of the original
        let mut data = Vec::new();
        for &j in &perm {
            data.extend_from_slice(cb.row(j));
        }
        let permuted = Codebook::new(Tensor::from_vec(&[12, c], data), 0);
        let s = ScaleSchedule::new(vec![1, 2]).unwrap();
        let a = quantize_level(&latent, &s, &cb, &identities(c, 2), 0.25).unwrap();
        let b = quantize_level(&latent, &s, &permuted, &identities(c, 2), 0.25).unwrap();
        prop_assert_eq!(&a.quantized, &b.quantized);
        for (ta, tb) in a.tokens.iter().zip(&b.tokens) {
            for (&x, &y) in ta.iter().zip(tb) {
                prop_assert_eq!(x, perm[y]);
            }
        }
    }

    #[test]
    fn residual_norms_track_quantized(seed in 0u64..1000) {
        let c = 2;
        let latent = random_tensor(&[c, 4, 4, 4], seed);
        let cb = Codebook::<f64>::random(16, c, 0, seed);
        let s = ScaleSchedule::new(vec![1, 2, 4]).unwrap();
        let out = quantize_level(&latent, &s, &cb, &identities(c, 3), 0.25).unwrap();
        let mut diff = latent.clone();
        diff.sub_assign(&out.quantized);
        prop_assert!((diff.norm() - out.residual_norms[3]).abs() < 1e-9);
        prop_assert!((latent.norm() - out.residual_norms[0]).abs() < 1e-12);
    }
}
