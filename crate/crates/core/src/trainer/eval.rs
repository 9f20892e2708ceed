use uvmakeup_tensor::{ParamStore, Tensor};

use super::TrainState;
use crate::error::{contract, Result};
use crate::morphable::{FaceCoefficients, FittedFace, MorphableBasis};
use crate::net::{generate, FamMode, Generated, NetConfig, TransferConfig};
use crate::uv::{
    extract_uv_texture, ExtractOptions, RasterPlan, RenderedImage, UvContext, UvTexture,
};

/// Frozen generator weights with the ablation switches they were trained
/// under.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: ParamStore,
    pub net: NetConfig,
    pub fam_off: bool,
    pub mtm_off: bool,
}

impl Model {
    pub fn from_state(state: &TrainState, net: &NetConfig) -> Self {
        Self {
            params: state.generator.clone(),
            net: net.clone(),
            fam_off: state.fam_off,
            mtm_off: state.mtm_off,
        }
    }

    /// The default transfer settings for this model.
    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            fam: if self.fam_off {
                FamMode::Off
            } else {
                FamMode::Learned
            },
            mtm_off: self.mtm_off,
            ..TransferConfig::default()
        }
    }

    pub fn generate(&self, src: &Tensor, reference: &Tensor) -> Result<Generated> {
        generate(
            src,
            reference,
            &self.params,
            &self.net,
            &self.transfer_config(),
        )
    }
}

/// A face given as an image with its coefficients.
#[derive(Clone, Debug)]
pub struct FaceInput {
    pub image: Tensor,
    pub coefficients: FaceCoefficients,
}

impl FaceInput {
    /// Renders the model texture of `coefficients` over `background`.
    pub fn from_coefficients(
        basis: &MorphableBasis,
        ctx: &UvContext,
        coefficients: FaceCoefficients,
        image_size: usize,
        background: f64,
    ) -> Result<Self> {
        let face = FittedFace::from_coefficients(basis, &coefficients)?;
        let texture = ctx.layout.interpolate(&face.triangles, &face.vertex_colors);
        let plan = RasterPlan::new(&face, (image_size, image_size), ctx.resolution());
        Ok(Self {
            image: plan.render(&texture, background)?,
            coefficients,
        })
    }
}

/// The UV texture the network sees when a face with `coefficients` wears
/// `texture`: rendered at its pose, then extracted back.
pub fn observed_texture(
    basis: &MorphableBasis,
    ctx: &UvContext,
    coefficients: &FaceCoefficients,
    texture: &Tensor,
    image_size: usize,
    background: f64,
    opts: ExtractOptions,
) -> Result<Tensor> {
    let face = FittedFace::from_coefficients(basis, coefficients)?;
    let image = RasterPlan::new(&face, (image_size, image_size), ctx.resolution())
        .render(texture, background)?;
    Ok(extract_uv_texture(&image, &face, ctx, opts)?.into_pixels())
}

#[derive(Clone, Debug)]
pub struct TransferOutput {
    /// `I_t` with the source background outside the face.
    pub image: RenderedImage,
    pub generated: Generated,
    pub src_texture: UvTexture,
    pub ref_texture: UvTexture,
}

/// `I_t = R(S_src, G(T_src, T_ref))`, composited over `I_src`.
pub fn transfer_image(
    model: &Model,
    basis: &MorphableBasis,
    ctx: &UvContext,
    src: &FaceInput,
    reference: &FaceInput,
    cfg: &TransferConfig,
    opts: ExtractOptions,
) -> Result<TransferOutput> {
    let face_s = FittedFace::from_coefficients(basis, &src.coefficients)?;
    let face_r = FittedFace::from_coefficients(basis, &reference.coefficients)?;
    let t_src = extract_uv_texture(&src.image, &face_s, ctx, opts)?;
    let t_ref = extract_uv_texture(&reference.image, &face_r, ctx, opts)?;
    let generated = generate(
        t_src.pixels(),
        t_ref.pixels(),
        &model.params,
        &model.net,
        cfg,
    )?;
    let (_, h, w) = src.image.dims3()?;
    let plan = RasterPlan::new(&face_s, (h, w), ctx.resolution());
    let mut pixels = plan.render(generated.texture.pixels(), 0.0)?;
    let face_mask = plan.face_mask();
    let plane = h * w;
    for (i, v) in pixels.data_mut().iter_mut().enumerate() {
        if !face_mask[i % plane] {
            *v = src.image.data()[i];
        }
    }
    Ok(TransferOutput {
        image: RenderedImage {
            pixels,
            face_mask,
            region_masks: plan.region_masks(&ctx.regions)?,
        },
        generated,
        src_texture: t_src,
        ref_texture: t_ref,
    })
}

/// Mean of `M` over clean texels minus its mean over contaminated texels;
/// `None` when either set is empty.
pub fn mask_separation(mask: &Tensor, contamination: &[bool]) -> Option<f64> {
    let (mut clean, mut nc, mut dirty, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for (&m, &c) in mask.data().iter().zip(contamination) {
        if c {
            dirty += m;
            nd += 1;
        } else {
            clean += m;
            nc += 1;
        }
    }
    (nc > 0 && nd > 0).then(|| clean / nc as f64 - dirty / nd as f64)
}

/// Mean absolute difference of two `[3, R, R]` textures over a `[1, R, R]`
/// binary region.
pub fn region_l1(a: &Tensor, b: &Tensor, region: &Tensor) -> f64 {
    let plane = region.numel();
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..a.numel() {
        if region.data()[i % plane] > 0.5 {
            s += (a.data()[i] - b.data()[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// A plain source with a contaminated reference and its clean original.
#[derive(Clone, Debug)]
pub struct RepairPair {
    pub source: Tensor,
    pub clean_reference: Tensor,
    pub contaminated_reference: Tensor,
    pub contamination_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepairMetrics {
    /// Mean over pairs of the per-pair mask separation.
    pub mask_separation: f64,
    /// Per pair: makeup-region L1 between the transfer from the contaminated
    /// reference and the transfer from the clean one.
    pub full_l1: Vec<f64>,
    pub fam_off_l1: Option<Vec<f64>>,
    /// Fraction of pairs where the full model's error is strictly lower.
    pub win_fraction: Option<f64>,
}

impl RepairMetrics {
    pub fn mean_full_l1(&self) -> f64 {
        mean(&self.full_l1)
    }

    pub fn mean_fam_off_l1(&self) -> Option<f64> {
        self.fam_off_l1.as_deref().map(mean)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores how well `full` repairs contaminated references. Each model is
/// compared against its own transfer from the clean reference, so the
/// error measures sensitivity to the contamination alone.
pub fn evaluate_repair(
    full: &Model,
    fam_off: Option<&Model>,
    pairs: &[RepairPair],
    ctx: &UvContext,
) -> Result<RepairMetrics> {
    if pairs.is_empty() {
        return Err(contract("evaluate_repair needs at least one pair"));
    }
    let makeup_region = ctx
        .regions
        .union(&[crate::uv::Region::Lips, crate::uv::Region::Eye]);
    let error = |model: &Model, p: &RepairPair| -> Result<(f64, Generated)> {
        let dirty = model.generate(&p.source, &p.contaminated_reference)?;
        let clean = model.generate(&p.source, &p.clean_reference)?;
        Ok((
            region_l1(
                dirty.texture.pixels(),
                clean.texture.pixels(),
                &makeup_region,
            ),
            dirty,
        ))
    };
    let mut seps = Vec::new();
    let mut full_l1 = Vec::with_capacity(pairs.len());
    let mut off_l1 = fam_off.map(|_| Vec::with_capacity(pairs.len()));
    for p in pairs {
        let (e, g) = error(full, p)?;
        full_l1.push(e);
        if let Some(s) = mask_separation(&g.mask, &p.contamination_mask) {
            seps.push(s);
        }
        if let (Some(m), Some(v)) = (fam_off, off_l1.as_mut()) {
            v.push(error(m, p)?.0);
        }
    }
    let win_fraction = off_l1.as_ref().map(|off| {
        let wins = full_l1.iter().zip(off).filter(|(f, o)| f < o).count();
        wins as f64 / pairs.len() as f64
    });
    Ok(RepairMetrics {
        mask_separation: mean(&seps),
        full_l1,
        fam_off_l1: off_l1,
        win_fraction,
    })
}

/// Per-texel L1 of the cycle reconstructions, averaged over both
/// directions and all `(source, reference)` pairs.
pub fn cycle_l1(model: &Model, pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(contract("cycle_l1 needs at least one pair"));
    }
    let g = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        Ok(model.generate(a, b)?.texture.into_pixels())
    };
    let mut total = 0.0;
    for (s, r) in pairs {
        let rec_s = g(&g(s, r)?, s)?;
        let rec_r = g(&g(r, s)?, r)?;
        total += (crate::objectives::l1(&rec_s, s) + crate::objectives::l1(&rec_r, r)) / 2.0;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean absolute error over face pixels between the self-transfer
/// `transfer(x, x)` and `x`, averaged over inputs.
pub fn self_transfer_l1(
    model: &Model,
    basis: &MorphableBasis,
    ctx: &UvContext,
    inputs: &[FaceInput],
    opts: ExtractOptions,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(contract("self_transfer_l1 needs at least one input"));
    }
    let cfg = model.transfer_config();
    let mut total = 0.0;
    for x in inputs {
        let out = transfer_image(model, basis, ctx, x, x, &cfg, opts)?;
        let mask = &out.image.face_mask;
        total += crate::uv::masked_mae(&out.image.pixels, &x.image, mask).unwrap_or(0.0);
    }
    Ok(total / inputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_generator;
    use crate::trainer::{generate_dataset, DatasetSpec};

    fn small_net() -> NetConfig {
        NetConfig {
            feature_channels: 16,
            res_blocks: 1,
            disc_channels: 8,
            ..NetConfig::default()
        }
    }

    #[test]
    fn mask_separation_closed_forms() {
        let m = Tensor::new(&[1, 2, 2], vec![1.0, 1.0, 0.2, 0.4]).unwrap();
        let s = mask_separation(&m, &[false, false, true, true]).unwrap();
        assert!((s - 0.7).abs() < 1e-12);
        assert!(mask_separation(&m, &[false; 4]).is_none());
    }

    #[test]
    fn untrained_model_has_no_mask_separation() {
        let basis = MorphableBasis::synthetic(7);
        let ctx = UvContext::new(&basis, 32).unwrap();
        let mut spec = DatasetSpec::new(6, 2, 5, 48);
        spec.contamination_rate = 1.0;
        let data = generate_dataset(&basis, &ctx, &spec).unwrap();
        let pairs: Vec<RepairPair> = data[..6]
            .iter()
            .map(|r| RepairPair {
                source: data[6].clean_texture.pixels().clone(),
                clean_reference: r.clean_texture.pixels().clone(),
                contaminated_reference: r.contaminated_texture.pixels().clone(),
                contamination_mask: r.contamination_mask.clone(),
            })
            .collect();
        let net = small_net();
        let full = Model {
            params: init_generator(&net, 3),
            net,
            fam_off: false,
            mtm_off: false,
        };
        let off = Model {
            fam_off: true,
            ..full.clone()
        };
        let m = evaluate_repair(&full, Some(&off), &pairs, &ctx).unwrap();
        assert!(m.mask_separation.abs() <= 0.05, "{}", m.mask_separation);
        assert_eq!(m.full_l1.len(), 6);
        assert!(m.win_fraction.is_some());
        // fam_off bypass: the reference feature passes through unchanged
        let mut none = full.clone();
        none.fam_off = true;
        let g = none
            .generate(&pairs[0].source, &pairs[0].contaminated_reference)
            .unwrap();
        assert!(g.mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transfer_composites_source_background_and_is_deterministic() {
        let basis = MorphableBasis::synthetic(7);
        let ctx = UvContext::new(&basis, 32).unwrap();
        let data = generate_dataset(&basis, &ctx, &DatasetSpec::new(1, 1, 9, 48)).unwrap();
        let net = small_net();
        let model = Model {
            params: init_generator(&net, 1),
            net,
            fam_off: false,
            mtm_off: false,
        };
        let input = |s: &crate::trainer::SyntheticSample| {
            let face = FittedFace::from_coefficients(&basis, &s.coefficients).unwrap();
            let plan = RasterPlan::new(&face, (48, 48), 32);
            // a textured background, so compositing is visible
            let mut img = plan.render(s.clean_texture.pixels(), 0.0).unwrap();
            let mask = plan.face_mask();
            for (i, v) in img.data_mut().iter_mut().enumerate() {
                if !mask[i % 2304] {
                    *v = (i % 7) as f64 / 7.0;
                }
            }
            FaceInput {
                image: img,
                coefficients: s.coefficients.clone(),
            }
        };
        let (src, reference) = (input(&data[1]), input(&data[0]));
        let cfg = model.transfer_config();
        let a = transfer_image(
            &model,
            &basis,
            &ctx,
            &src,
            &reference,
            &cfg,
            ExtractOptions::default(),
        )
        .unwrap();
        let b = transfer_image(
            &model,
            &basis,
            &ctx,
            &src,
            &reference,
            &cfg,
            ExtractOptions::default(),
        )
        .unwrap();
        assert_eq!(a.image.pixels, b.image.pixels);
        for (i, &v) in a.image.pixels.data().iter().enumerate() {
            if !a.image.face_mask[i % 2304] {
                assert_eq!(v, src.image.data()[i]);
            }
        }
    }
}
