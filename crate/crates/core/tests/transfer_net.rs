use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvmakeup_core::net::{
    encode_reference, fam_repair, generate, init_generator, mtm_transfer, symmetrize_kernels,
    FamMode, NetConfig, TransferConfig,
};
use uvmakeup_core::uv::regions::downsample_mask;
use uvmakeup_core::uv::{flip_uv, Region, UvRegionMasks};
use uvmakeup_tensor::Tensor;

fn net() -> NetConfig {
    NetConfig {
        feature_channels: 16,
        res_blocks: 1,
        ..NetConfig::default()
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn symmetric(shape: &[usize], seed: u64) -> Tensor {
    let x = random(shape, seed);
    let f = flip_uv(&x).unwrap();
    x.zip_map(&f, |a, b| 0.5 * (a + b)).unwrap()
}

/// `M ⊗ F + (1 − M) ⊗ flip(F)` written out index by index.
fn blend_by_hand(f: &Tensor, m: &Tensor) -> Tensor {
    let (c, h, w) = f.dims3().unwrap();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mv = m.data()[y * w + x];
                let here = f.data()[(ch * h + y) * w + x];
                let there = f.data()[(ch * h + y) * w + (w - 1 - x)];
                out.data_mut()[(ch * h + y) * w + x] = mv * here + (1.0 - mv) * there;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn learned_fam_follows_the_blend_formula(param_seed in 0u64..10_000, feat_seed in 0u64..10_000) {
        let net = net();
        let p = init_generator(&net, param_seed);
        let f = random(&[16, 8, 8], feat_seed);
        let (f_hat, m) = fam_repair(&f, &p, &net, FamMode::Learned).unwrap();
        prop_assert!(f_hat.max_abs_diff(&blend_by_hand(&f, &m)) <= 1e-6);
        prop_assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn attention_output_stays_in_the_reference_envelope(param_seed in 0u64..10_000, seed in 0u64..10_000) {
        let net = net();
        let p = init_generator(&net, param_seed);
        let f_src = random(&[16, 4, 4], seed);
        let f_hat = random(&[16, 4, 4], seed + 1);
        let (f_m, a) = mtm_transfer(&f_src, &f_hat, &p, &net, 1.0, None).unwrap();
        for row in a.data().chunks(16) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
        }
        for ch in 0..16 {
            let plane = &f_hat.data()[ch * 16..(ch + 1) * 16];
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &v in &f_m.data()[ch * 16..(ch + 1) * 16] {
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }
}

#[test]
fn symmetric_feature_is_a_fixed_point_for_any_mask() {
    let net = net();
    let f = symmetric(&[16, 8, 8], 3);
    for seed in 0..5 {
        // a different random FAM head gives a different, non-constant mask
        let p = init_generator(&net, 100 + seed);
        let (f_hat, m) = fam_repair(&f, &p, &net, FamMode::Learned).unwrap();
        let spread = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - m.data().iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread > 0.0);
        assert!(f_hat.max_abs_diff(&f) <= 1e-6);
    }
}

#[test]
fn zero_projections_attend_uniformly() {
    let net = net();
    let mut p = init_generator(&net, 4);
    for name in ["g.mtm.p.w", "g.mtm.p.b", "g.mtm.q.w", "g.mtm.q.b"] {
        let shape = p.get(name).unwrap().shape().to_vec();
        p.insert(name, Tensor::zeros(&shape));
    }
    let f_src = random(&[16, 4, 4], 1);
    let f_hat = random(&[16, 4, 4], 2);
    let (f_m, _) = mtm_transfer(&f_src, &f_hat, &p, &net, 1.0, None).unwrap();
    for ch in 0..16 {
        let mean = f_hat.data()[ch * 16..(ch + 1) * 16].iter().sum::<f64>() / 16.0;
        for &v in &f_m.data()[ch * 16..(ch + 1) * 16] {
            assert!((v - mean).abs() <= 1e-5);
        }
    }
}

#[test]
fn lips_only_transfer_is_zero_outside_the_lips() {
    let net = net();
    let p = init_generator(&net, 5);
    let lips = downsample_mask(UvRegionMasks::canonical(64).get(Region::Lips), 4).unwrap();
    assert!(lips.sum() > 0.0);
    let f_src = random(&[16, 16, 16], 1);
    let f_hat = random(&[16, 16, 16], 2);
    let (f_m, _) = mtm_transfer(&f_src, &f_hat, &p, &net, 1.0, Some(&lips)).unwrap();
    for (i, &v) in f_m.data().iter().enumerate() {
        if lips.data()[i % 256] == 0.0 {
            assert_eq!(v, 0.0);
        }
    }
}

#[test]
fn symmetric_reference_makes_the_fam_ablation_a_no_op() {
    let net = net();
    let mut p = init_generator(&net, 6);
    symmetrize_kernels(&mut p, "g.enc_ref");
    let src = random(&[3, 32, 32], 1).map(|v| 0.5 + 0.4 * v);
    let reference = symmetric(&[3, 32, 32], 2).map(|v| 0.5 + 0.4 * v);
    let f_ref = encode_reference(&reference, &p, &net).unwrap();
    assert!(f_ref.max_abs_diff(&flip_uv(&f_ref).unwrap()) <= 1e-12);

    let full = generate(&src, &reference, &p, &net, &TransferConfig::default()).unwrap();
    let off = TransferConfig {
        fam: FamMode::Off,
        ..TransferConfig::default()
    };
    let ablated = generate(&src, &reference, &p, &net, &off).unwrap();
    assert!(full.texture.pixels().max_abs_diff(ablated.texture.pixels()) <= 1e-9);
}
