mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use osscl::losses::{
    noisy_arcmix_loss, positive_mask, supcon_noise_loss, total_loss, ContrastiveConfig, SupconReduction,
};
use osscl::model::{arcface_logits, ArcFaceConfig, ArcFaceHead, FeaturePerturbationHead};
use osscl::nn::{Activation, ParamStore};
use osscl::Error;

fn cfg() -> ContrastiveConfig {
    ContrastiveConfig::default()
}

fn head(classes: usize, e: usize, scale: f64, margin: f64, seed: u64) -> ArcFaceHead {
    let mut ps = ParamStore::new(seed, DType::F64, &Device::Cpu);
    ArcFaceHead::new(&mut ps, "arc", classes, e, &ArcFaceConfig { scale, margin }).unwrap()
}

#[test]
fn supcon_two_sample_cases() {
    let z = tensor(&[vec![0.6, 0.8], vec![0.6, 0.8]], DType::F64);
    assert!(scalar(&supcon_noise_loss(&z, &[3, 3], &cfg()).unwrap()).abs() < 1e-12);
    let z = tensor(&[vec![1.0, 0.0], vec![0.0, 1.0]], DType::F64);
    assert_eq!(scalar(&supcon_noise_loss(&z, &[0, 1], &cfg()).unwrap()), 0.0);
}

#[test]
fn supcon_matches_double_loop() {
    let mut r = rng(11);
    for trial in 0..50 {
        let b = 2 + trial % 15;
        let e = 1 + trial % 8;
        let z = unit_rows(&mut r, b, e);
        let y = labels(&mut r, b, 1 + (trial % 5) as u32);
        let want = supcon_oracle(&z, &y, 0.02);
        let got = scalar(&supcon_noise_loss(&tensor(&z, DType::F64), &y, &cfg()).unwrap());
        assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
        // the f32 path is compared on f32-rounded inputs: 1/τ amplifies input rounding
        let z32: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|&x| x as f32 as f64).collect()).collect();
        let want32 = supcon_oracle(&z32, &y, 0.02);
        let got32 = scalar(&supcon_noise_loss(&tensor(&z32, DType::F32), &y, &cfg()).unwrap());
        assert!((got32 - want32).abs() <= 1e-5 * want32.abs().max(1.0), "f32 trial {trial}: {got32} vs {want32}");
    }
}

#[test]
fn supcon_sum_reduction_is_b_times_mean() {
    let mut r = rng(5);
    let z = tensor(&unit_rows(&mut r, 9, 4), DType::F64);
    let y = labels(&mut r, 9, 3);
    let mean = scalar(&supcon_noise_loss(&z, &y, &cfg()).unwrap());
    let sum_cfg = ContrastiveConfig {
        reduction: SupconReduction::Sum,
        ..cfg()
    };
    let sum = scalar(&supcon_noise_loss(&z, &y, &sum_cfg).unwrap());
    assert!((sum - 9.0 * mean).abs() < 1e-9);
}

#[test]
fn supcon_errors() {
    let z = tensor(&[vec![1.0, 0.0]], DType::F64);
    assert!(matches!(supcon_noise_loss(&z, &[0], &cfg()), Err(Error::InvalidArgument(_))));
    let z = tensor(&[vec![1.0, 0.0], vec![0.5, 0.0]], DType::F64);
    assert!(matches!(supcon_noise_loss(&z, &[0, 0], &cfg()), Err(Error::InvalidArgument(_))));
    let z = tensor(&[vec![1.0, 0.0], vec![0.0, 1.0]], DType::F64);
    let bad_tau = ContrastiveConfig {
        temperature: 0.0,
        ..cfg()
    };
    assert!(supcon_noise_loss(&z, &[0, 0], &bad_tau).is_err());
    assert!(supcon_noise_loss(&z, &[0], &cfg()).is_err());
}

#[test]
fn supcon_permutation_and_rotation_invariance() {
    let mut r = rng(21);
    let (b, e) = (10, 4);
    let z = unit_rows(&mut r, b, e);
    let y = labels(&mut r, b, 3);
    let base = scalar(&supcon_noise_loss(&tensor(&z, DType::F64), &y, &cfg()).unwrap());

    let perm: Vec<usize> = (0..b).rev().collect();
    let zp: Vec<Vec<f64>> = perm.iter().map(|&i| z[i].clone()).collect();
    let yp: Vec<u32> = perm.iter().map(|&i| y[i]).collect();
    let permuted = scalar(&supcon_noise_loss(&tensor(&zp, DType::F64), &yp, &cfg()).unwrap());
    assert!((permuted - base).abs() < 1e-6);

    // rotation by angle t in the (0, 1) plane followed by one in the (2, 3) plane
    let rot = |v: &[f64], t: f64| {
        let (c, s) = (t.cos(), t.sin());
        vec![c * v[0] - s * v[1], s * v[0] + c * v[1], c * v[2] + s * v[3], -s * v[2] + c * v[3]]
    };
    let zr: Vec<Vec<f64>> = z.iter().map(|v| rot(v, 0.83)).collect();
    let rotated = scalar(&supcon_noise_loss(&tensor(&zr, DType::F64), &y, &cfg()).unwrap());
    assert!((rotated - base).abs() < 1e-6);
}

#[test]
fn supcon_decreases_as_positive_pair_aligns() {
    // anchor and positive at angle t apart in one plane, negative on the
    // orthogonal axis so only the positive similarity moves; at τ = 0.02 the
    // loss saturates to exactly 0 in f64 long before alignment
    let warm = ContrastiveConfig {
        temperature: 0.5,
        ..cfg()
    };
    let loss_at = |t: f64| {
        let z = vec![vec![1.0, 0.0, 0.0], vec![t.cos(), t.sin(), 0.0], vec![0.0, 0.0, 1.0]];
        scalar(&supcon_noise_loss(&tensor(&z, DType::F64), &[0, 0, 1], &warm).unwrap())
    };
    let mut prev = loss_at(2.0);
    for k in 1..=10 {
        let cur = loss_at(2.0 - 0.2 * k as f64);
        assert!(cur < prev, "step {k}: {cur} !< {prev}");
        prev = cur;
    }
}

#[test]
fn positives_depend_only_on_original_labels() {
    let mask = positive_mask(&[0, 1, 0, 1]);
    assert_eq!(
        mask,
        vec![0., 0., 1., 0., 0., 0., 0., 1., 1., 0., 0., 0., 0., 1., 0., 0.]
    );
    let mut r = rng(3);
    let z = tensor(&unit_rows(&mut r, 6, 4), DType::F64);
    let emb = Tensor::randn(0f64, 1.0, (6, 4), &Device::Cpu).unwrap();
    let h = head(3, 4, 30.0, 0.5, 1);
    let y_a = [0, 1, 2, 0, 1, 2];
    let supcons: Vec<f64> = [[0u32, 0, 0, 0, 0, 0], [2, 1, 0, 2, 1, 0]]
        .iter()
        .map(|y_b| scalar(&total_loss(&z, &emb, &y_a, y_b, 0.2, &cfg(), &h).unwrap().supcon))
        .collect();
    assert_eq!(supcons[0], supcons[1]);
}

#[test]
fn arcface_reference_values() {
    let h = head(2, 2, 30.0, 0.0, 0);
    h.weight
        .set(&Tensor::new(&[[2.0f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap())
        .unwrap();
    let emb = Tensor::new(&[[3.0f64, 0.0]], &Device::Cpu).unwrap();
    let l = rows_of(&arcface_logits(&emb, &[0], &h, true).unwrap());
    assert!((l[0][0] - 30.0).abs() < 1e-12);

    let t = std::f64::consts::PI / 3.0;
    let h = head(2, 2, 30.0, 0.5, 0);
    h.weight
        .set(&Tensor::new(&[[t.cos(), t.sin()], [0.0, -1.0]], &Device::Cpu).unwrap())
        .unwrap();
    let emb = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
    let with = rows_of(&arcface_logits(&emb, &[0], &h, true).unwrap());
    let without = rows_of(&arcface_logits(&emb, &[0], &h, false).unwrap());
    // 30·cos(π/3 + 0.5) = 30·sin(π/6 − 0.5) ≈ 0.70790
    let want = 30.0 * (std::f64::consts::PI / 6.0 - 0.5).sin();
    assert!((with[0][0] - want).abs() < 1e-12, "{}", with[0][0]);
    assert!((with[0][0] - 0.7079).abs() < 1e-4);
    assert_eq!(with[0][1], without[0][1]);
    assert!((without[0][0] - 15.0).abs() < 1e-12);
}

#[test]
fn arcface_matches_scalar_oracle_and_margin_only_lowers_target() {
    let mut r = rng(8);
    for margin in [0.0, 0.4, 0.7, 1.2] {
        let h = head(5, 6, 30.0, margin, 2);
        let emb = randn(&mut r, 8 * 6).chunks(6).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let y = labels(&mut r, 8, 5);
        let w = rows_of(h.weight.as_tensor());
        let got = rows_of(&arcface_logits(&tensor(&emb, DType::F64), &y, &h, true).unwrap());
        let free = rows_of(&arcface_logits(&tensor(&emb, DType::F64), &y, &h, false).unwrap());
        let want = arcface_oracle(&emb, &w, 30.0, margin, Some(&y));
        for i in 0..8 {
            for c in 0..5 {
                assert!((got[i][c] - want[i][c]).abs() < 1e-9);
                if c == y[i] as usize {
                    if margin == 0.0 {
                        assert!((got[i][c] - free[i][c]).abs() < 1e-12);
                    } else {
                        assert!(got[i][c] < free[i][c]);
                    }
                } else {
                    assert_eq!(got[i][c], free[i][c]);
                }
            }
        }
    }
}

#[test]
fn arcface_scale_does_not_change_ranking() {
    let mut r = rng(12);
    let emb = tensor(&randn(&mut r, 4 * 6).chunks(6).map(<[f64]>::to_vec).collect::<Vec<_>>(), DType::F64);
    let rank = |s: f64| {
        let h = head(7, 6, s, 0.5, 4);
        rows_of(&h.logits(&emb, None).unwrap())
            .into_iter()
            .map(|row| {
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
                idx
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(rank(1.0), rank(30.0));
    assert_eq!(rank(0.1), rank(64.0));
}

#[test]
fn arcface_rejects_out_of_range_labels() {
    let h = head(3, 2, 30.0, 0.5, 0);
    let emb = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
    assert!(matches!(arcface_logits(&emb, &[3], &h, true), Err(Error::InvalidArgument(_))));
    assert!(noisy_arcmix_loss(&emb, &[0], &[5], 0.5, &h).is_err());
    assert!(noisy_arcmix_loss(&emb, &[0], &[0], 1.5, &h).is_err());
}

#[test]
fn namix_endpoints_oracle_and_affinity() {
    let mut r = rng(14);
    let (b, e, c) = (7, 5, 4);
    let h = head(c, e, 30.0, 0.7, 6);
    let w = rows_of(h.weight.as_tensor());
    let emb_rows: Vec<Vec<f64>> = randn(&mut r, b * e).chunks(e).map(<[f64]>::to_vec).collect();
    let emb = tensor(&emb_rows, DType::F64);
    let y_a = labels(&mut r, b, c as u32);
    let y_b: Vec<u32> = y_a.iter().rev().copied().collect();

    let logits = arcface_oracle(&emb_rows, &w, 30.0, 0.7, Some(&y_a));
    let (ce_a, ce_b) = (ce_oracle(&logits, &y_a), ce_oracle(&logits, &y_b));
    let loss = |lam: f64| scalar(&noisy_arcmix_loss(&emb, &y_a, &y_b, lam, &h).unwrap());

    assert!((loss(1.0) - ce_a).abs() < 1e-9);
    assert!((loss(0.0) - ce_b).abs() < 1e-9);
    for lam in [0.1, 0.37, 0.5, 0.93] {
        assert!((loss(lam) - (lam * ce_a + (1.0 - lam) * ce_b)).abs() < 1e-6);
        assert!((loss(lam) - (lam * loss(1.0) + (1.0 - lam) * loss(0.0))).abs() < 1e-9);
    }
    assert!(loss(0.4) >= 0.0);
}

#[test]
fn total_is_sum_of_parts_and_zero_when_both_are() {
    let mut r = rng(15);
    let (b, e) = (6, 4);
    let h = head(3, e, 30.0, 0.4, 0);
    let z = tensor(&unit_rows(&mut r, b, e), DType::F64);
    let emb = tensor(&randn(&mut r, b * e).chunks(e).map(<[f64]>::to_vec).collect::<Vec<_>>(), DType::F64);
    let y_a = labels(&mut r, b, 3);
    let y_b = labels(&mut r, b, 3);
    let parts = total_loss(&z, &emb, &y_a, &y_b, 0.3, &cfg(), &h).unwrap();
    let separate = scalar(&supcon_noise_loss(&z, &y_a, &cfg()).unwrap())
        + scalar(&noisy_arcmix_loss(&emb, &y_a, &y_b, 0.3, &h).unwrap());
    assert!((scalar(&parts.total) - separate).abs() < 1e-12);
    assert!((scalar(&parts.total) - scalar(&parts.supcon) - scalar(&parts.namix)).abs() < 1e-12);

    // two samples of distinct classes (supcon 0) with an overwhelming scale (CE → 0)
    let h = head(2, 2, 1e4, 0.0, 0);
    h.weight
        .set(&Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap())
        .unwrap();
    let z = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap();
    let parts = total_loss(&z, &z, &[0, 1], &[0, 1], 0.5, &cfg(), &h).unwrap();
    assert_eq!(scalar(&parts.total), 0.0);
}

#[test]
fn fph_outputs_unit_rows_and_constant_path() {
    let mut ps = ParamStore::new(3, DType::F64, &Device::Cpu);
    let fph = FeaturePerturbationHead::new(&mut ps, "fph", 16, 4, Activation::LeakyRelu).unwrap();
    let x = Tensor::randn(0f64, 3.0, (64, 16), &Device::Cpu).unwrap();
    for row in rows_of(&fph.forward(&x).unwrap()) {
        assert!((dot(&row, &row).sqrt() - 1.0).abs() < 1e-12);
    }

    let zeros = |dims: &[usize]| Tensor::zeros(dims, DType::F64, &Device::Cpu).unwrap();
    fph.encoder.weight.set(&zeros(&[4, 16])).unwrap();
    fph.encoder.bias.set(&zeros(&[4])).unwrap();
    let b: Vec<f64> = (0..16).map(|i| i as f64 - 5.5).collect();
    let bn = dot(&b, &b).sqrt();
    fph.decoder.bias.set(&Tensor::new(b.as_slice(), &Device::Cpu).unwrap()).unwrap();
    for row in rows_of(&fph.forward(&x).unwrap()) {
        for (v, bi) in row.iter().zip(&b) {
            assert!((v - bi / bn).abs() < 1e-12);
        }
    }

    fph.decoder.bias.set(&zeros(&[16])).unwrap();
    assert!(matches!(fph.forward(&x), Err(Error::DegenerateEmbedding { row: 0 })));
}

#[test]
fn fph_rejects_bad_reduction() {
    let mut ps = ParamStore::new(0, DType::F64, &Device::Cpu);
    assert!(FeaturePerturbationHead::new(&mut ps, "a", 8, 0, Activation::Relu).is_err());
    assert!(FeaturePerturbationHead::new(&mut ps, "b", 8, 9, Activation::Relu).is_err());
    assert!(FeaturePerturbationHead::new(&mut ps, "c", 8, 8, Activation::Relu).is_ok());
}
