#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvmakeup_core::morphable::{FaceCoefficients, FittedFace, MorphableBasis, Projection};
use uvmakeup_core::trainer::{generate_dataset, DatasetSpec, Domain, SyntheticSample};
use uvmakeup_core::uv::{
    extract_uv_texture, masked_mae, masked_psnr, rasterize, ExtractOptions, RasterPlan, UvContext,
};
use uvmakeup_tensor::{Tape, Tensor};

pub fn basis() -> MorphableBasis {
    MorphableBasis::synthetic(7)
}

/// One makeup sample generated at `resolution`, reposed to `yaw` degrees.
pub fn posed_sample(
    basis: &MorphableBasis,
    ctx: &UvContext,
    image_size: usize,
    yaw: f64,
) -> SyntheticSample {
    let spec = DatasetSpec {
        contamination_rate: 0.0,
        ..DatasetSpec::new(1, 0, 11, image_size)
    };
    let mut s = generate_dataset(basis, ctx, &spec).unwrap().remove(0);
    assert_eq!(s.domain, Domain::Makeup);
    s.coefficients.projection = frontal(image_size, yaw);
    s
}

pub fn frontal(image_size: usize, yaw: f64) -> Projection {
    let size = image_size as f64;
    Projection::weak_perspective(yaw, 0.0, 0.0, 0.34 * size, size / 2.0, size / 2.0)
}

pub fn face(basis: &MorphableBasis, coefficients: &FaceCoefficients) -> FittedFace {
    FittedFace::from_coefficients(basis, coefficients).unwrap()
}

/// Masked PSNR of extract ∘ rasterize on a frontal face.
pub fn roundtrip_psnr(resolution: usize, image_size: usize) -> f64 {
    let basis = basis();
    let ctx = UvContext::new(&basis, resolution).unwrap();
    let s = posed_sample(&basis, &ctx, image_size, 0.0);
    let face = face(&basis, &s.coefficients);
    let img = rasterize(&face, &s.clean_texture, (image_size, image_size), 0.0).unwrap();
    let t = extract_uv_texture(&img.pixels, &face, &ctx, ExtractOptions::default()).unwrap();
    let valid = t.validity().iter().filter(|&&v| v).count();
    assert!(
        valid > resolution * resolution / 2,
        "only {valid} valid texels"
    );
    masked_psnr(t.pixels(), s.clean_texture.pixels(), t.validity()).unwrap()
}

/// MAE between extractions at yaw 0 and `yaw` over mutually valid texels.
pub fn pose_mae(resolution: usize, image_size: usize, yaw: f64) -> f64 {
    let basis = basis();
    let ctx = UvContext::new(&basis, resolution).unwrap();
    let extract_at = |yaw: f64| {
        let s = posed_sample(&basis, &ctx, image_size, yaw);
        let face = face(&basis, &s.coefficients);
        let img = rasterize(&face, &s.clean_texture, (image_size, image_size), 0.0).unwrap();
        extract_uv_texture(&img.pixels, &face, &ctx, ExtractOptions::default()).unwrap()
    };
    let (a, b) = (extract_at(0.0), extract_at(yaw));
    let both: Vec<bool> = a
        .validity()
        .iter()
        .zip(b.validity())
        .map(|(x, y)| *x && *y)
        .collect();
    assert!(both.iter().filter(|&&v| v).count() > resolution * resolution / 3);
    masked_mae(a.pixels(), b.pixels(), &both).unwrap()
}

/// Largest relative error between the analytic render Jacobian and central
/// differences over `pairs` (pixel, texel) pairs with a nonzero entry.
pub fn render_jacobian_error(pairs: usize, seed: u64) -> f64 {
    let basis = basis();
    let ctx = UvContext::new(&basis, 32).unwrap();
    let s = posed_sample(&basis, &ctx, 64, -15.0);
    let face = face(&basis, &s.coefficients);
    let plan = RasterPlan::new(&face, (64, 64), 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Tensor::new(
        &[3, 32, 32],
        (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap();
    let covered: Vec<usize> = plan
        .face_mask()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    let h = 1e-4;
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < pairs {
        let pixel = covered[rng.random_range(0..covered.len())] + 64 * 64 * rng.random_range(0..3);
        let mut tape = Tape::new();
        let t = tape.leaf(tex.clone());
        let img = plan.render_var(&mut tape, t, 0.0).unwrap();
        let mut pick = Tensor::zeros(&[3, 64, 64]);
        pick.data_mut()[pixel] = 1.0;
        let pick = tape.constant(pick);
        let picked = tape.mul(img, pick);
        let value = tape.sum(picked);
        let grad = tape.backward(value).get(t).unwrap().clone();
        // one texel the pixel reads from and one chosen at random
        let reads: Vec<usize> = (0..grad.numel())
            .filter(|&i| grad.data()[i] != 0.0)
            .collect();
        for texel in [
            reads[rng.random_range(0..reads.len())],
            rng.random_range(0..grad.numel()),
        ] {
            let (mut a, mut b) = (tex.clone(), tex.clone());
            a.data_mut()[texel] += h;
            b.data_mut()[texel] -= h;
            let fd = (plan.render(&a, 0.0).unwrap().data()[pixel]
                - plan.render(&b, 0.0).unwrap().data()[pixel])
                / (2.0 * h);
            let an = grad.data()[texel];
            let scale = an.abs().max(fd.abs());
            if scale == 0.0 {
                continue;
            }
            worst = worst.max((an - fd).abs() / scale);
            checked += 1;
        }
    }
    worst
}
