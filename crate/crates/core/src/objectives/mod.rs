//! Training objectives: local histogram makeup loss, perceptual loss, cycle
//! consistency, adversarial log losses, and their weighted totals.
//!
//! Each loss has a tape form used in training and a plain `f64` form used by
//! evaluation and tests.

mod histogram;
mod perceptual;

use serde::{Deserialize, Serialize};
use uvmakeup_tensor::{Tape, Tensor, Var};

use crate::error::{contract, Error, Result};
use crate::uv::{ImageRegionMasks, Region};

pub use histogram::{histogram_emd, histogram_match, match_channel, HistogramSpec};
pub use perceptual::{
    perceptual_loss, perceptual_loss_on_tape, FeatureExtractor, RandomConvExtractor,
};

/// Scores are clamped to `[ε, 1 − ε]` before taking logs.
pub const SCORE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_a: f64,
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            lambda_a: 1.0,
            lambda_m: 1.0,
            lambda_c: 10.0,
            lambda_p: 5e-3,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda_a: 0.0,
            lambda_m: 0.0,
            lambda_c: 0.0,
            lambda_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda_a,
            self.lambda_m,
            self.lambda_c,
            self.lambda_p,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(contract(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn item(&self, region: Region) -> f64 {
        match region {
            Region::Lips => self.lambda1,
            Region::Eye => self.lambda2,
            Region::Face => self.lambda3,
        }
    }
}

/// Masked pixels of a `[C, H, W]` image, one vector per channel.
fn gather(image: &Tensor, mask: &[bool]) -> Vec<Vec<f64>> {
    let (c, h, w) = image.dims3().expect("image must be [C,H,W]");
    let plane = h * w;
    (0..c)
        .map(|ch| {
            let data = &image.data()[ch * plane..(ch + 1) * plane];
            data.iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .collect()
        })
        .collect()
}

/// The detached histogram-matching target of one region: a full image that
/// holds matched values on `src_mask`, plus the mask as a `[1, H, W]` tensor.
pub fn region_target(
    i_t: &Tensor,
    i_ref: &Tensor,
    src_mask: &[bool],
    ref_mask: &[bool],
    spec: &HistogramSpec,
) -> Option<(Tensor, Tensor, usize)> {
    let matched = histogram_match(&gather(i_t, src_mask), &gather(i_ref, ref_mask), spec)?;
    let (c, h, w) = i_t.dims3().ok()?;
    let plane = h * w;
    let mut target = i_t.clone();
    for ch in 0..c {
        let mut it = matched[ch].iter();
        for (p, &m) in src_mask.iter().enumerate() {
            if m {
                target.data_mut()[ch * plane + p] = *it.next()?;
            }
        }
    }
    let mask = Tensor::new(
        &[1, h, w],
        src_mask
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect(),
    )
    .ok()?;
    Some((target, mask, matched[0].len()))
}

/// Per-region makeup loss values, `None` for skipped (empty) regions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MakeupTerms {
    pub lips: Option<f64>,
    pub eye: Option<f64>,
    pub face: Option<f64>,
}

/// How the per-pixel residual `I_t − HM` is reduced over a region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MakeupNorm {
    /// Euclidean RGB distance per pixel, averaged over the region.
    #[default]
    PixelL2,
    /// Squared error averaged over the region's pixels and channels.
    SquaredMean,
}

/// Guards the square root of an exactly matched pixel.
const PIXEL_NORM_EPS: f64 = 1e-12;

/// `Σ_item λ_item · mean_{masked} ‖I_t − HM‖` on the tape, with the HM
/// target held constant and the norm chosen by `norm`. `src_masks` are
/// rendered for the pose of `I_t`, `ref_masks` for the pose of `I_ref`.
#[allow(clippy::too_many_arguments)]
pub fn makeup_loss_on_tape(
    tape: &mut Tape,
    i_t: Var,
    i_ref: &Tensor,
    src_masks: &ImageRegionMasks,
    ref_masks: &ImageRegionMasks,
    weights: &LossWeights,
    spec: &HistogramSpec,
    norm: MakeupNorm,
) -> Result<(Var, MakeupTerms)> {
    let channels = tape
        .value(i_t)
        .dims3()
        .map_err(|e| contract(e.to_string()))?
        .0;
    let channel_sum = tape.constant(Tensor::full(&[1, channels, 1, 1], 1.0));
    let current = tape.value(i_t).clone();
    let mut terms = MakeupTerms::default();
    let mut total: Option<Var> = None;
    let mut any = false;
    for region in Region::ALL {
        let Some((target, mask, count)) = region_target(
            &current,
            i_ref,
            src_masks.get(region),
            ref_masks.get(region),
            spec,
        ) else {
            log::debug!("makeup loss: {} region empty, skipped", region.name());
            continue;
        };
        any = true;
        let target = tape.constant(target);
        let mask = tape.constant(mask);
        let diff = tape.sub(i_t, target);
        let masked = tape.mul_broadcast(diff, mask);
        let sq = tape.square(masked);
        let term = match norm {
            MakeupNorm::SquaredMean => {
                let s = tape.sum(sq);
                tape.scale(s, 1.0 / (channels * count) as f64)
            }
            MakeupNorm::PixelL2 => {
                let per_pixel = tape.conv2d(sq, channel_sum, None, 1, 0);
                let shifted = tape.affine(per_pixel, 1.0, PIXEL_NORM_EPS);
                let dist = tape.sqrt(shifted);
                let inside = tape.mul_broadcast(dist, mask);
                let s = tape.sum(inside);
                tape.scale(s, 1.0 / count as f64)
            }
        };
        let value = tape.value(term).item();
        match region {
            Region::Lips => terms.lips = Some(value),
            Region::Eye => terms.eye = Some(value),
            Region::Face => terms.face = Some(value),
        }
        let weighted = tape.scale(term, weights.item(region));
        total = Some(match total {
            Some(t) => tape.add(t, weighted),
            None => weighted,
        });
    }
    if !any {
        return Err(Error::DegenerateRender);
    }
    Ok((total.expect("at least one region"), terms))
}

#[allow(clippy::too_many_arguments)]
pub fn makeup_loss(
    i_t: &Tensor,
    i_ref: &Tensor,
    src_masks: &ImageRegionMasks,
    ref_masks: &ImageRegionMasks,
    weights: &LossWeights,
    spec: &HistogramSpec,
    norm: MakeupNorm,
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(i_t.clone());
    let (l, _) = makeup_loss_on_tape(
        &mut tape, v, i_ref, src_masks, ref_masks, weights, spec, norm,
    )?;
    Ok(tape.value(l).item())
}

/// Mean absolute difference on the tape.
pub fn l1_on_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let ab = tape.abs(d);
    tape.mean(ab)
}

pub fn l1(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.numel() as f64
}

/// `|G(G(s, r), s) − s|₁ + |G(G(r, s), r) − r|₁`, each a per-texel mean.
pub fn cycle_loss(g: impl Fn(&Tensor, &Tensor) -> Tensor, src: &Tensor, reference: &Tensor) -> f64 {
    let rec_s = g(&g(src, reference), src);
    let rec_r = g(&g(reference, src), reference);
    l1(&rec_s, src) + l1(&rec_r, reference)
}

pub fn cycle_loss_on_tape(
    tape: &mut Tape,
    rec_src: Var,
    src: Var,
    rec_ref: Var,
    reference: Var,
) -> Var {
    let a = l1_on_tape(tape, rec_src, src);
    let b = l1_on_tape(tape, rec_ref, reference);
    tape.add(a, b)
}

/// Which generator objective to use against the discriminators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvForm {
    /// `−E[log D(fake)]`, as printed in the adversarial losses.
    #[default]
    Printed,
    /// `E[log(1 − D(fake))]`, the original minimax generator term.
    Minimax,
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// `−E[log s]`.
pub fn neg_log_mean(scores: &Tensor) -> f64 {
    -scores
        .data()
        .iter()
        .map(|&s| clamp_score(s).ln())
        .sum::<f64>()
        / scores.numel() as f64
}

/// `−E[log(1 − s)]`.
pub fn neg_log1m_mean(scores: &Tensor) -> f64 {
    -scores
        .data()
        .iter()
        .map(|&s| (1.0 - clamp_score(s)).ln())
        .sum::<f64>()
        / scores.numel() as f64
}

pub fn neg_log_mean_on_tape(tape: &mut Tape, scores: Var) -> Var {
    let c = tape.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS);
    let l = tape.log(c);
    let m = tape.mean(l);
    tape.scale(m, -1.0)
}

pub fn neg_log1m_mean_on_tape(tape: &mut Tape, scores: Var) -> Var {
    let c = tape.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS);
    let q = tape.one_minus(c);
    let l = tape.log(q);
    let m = tape.mean(l);
    tape.scale(m, -1.0)
}

/// Generator adversarial term for one fake score map.
pub fn generator_adv_on_tape(tape: &mut Tape, fake_scores: Var, form: AdvForm) -> Var {
    match form {
        AdvForm::Printed => neg_log_mean_on_tape(tape, fake_scores),
        AdvForm::Minimax => {
            let t = neg_log1m_mean_on_tape(tape, fake_scores);
            tape.scale(t, -1.0)
        }
    }
}

pub fn generator_adv(fake_scores: &Tensor, form: AdvForm) -> f64 {
    match form {
        AdvForm::Printed => neg_log_mean(fake_scores),
        AdvForm::Minimax => -neg_log1m_mean(fake_scores),
    }
}

/// Discriminator score maps for one batch.
///
/// `tex_s_*` come from the source-domain texture discriminator, `tex_r_*`
/// from the reference-domain one. `fake_src` is the makeup-removed
/// reference `G(T_ref, T_src)` and `fake_ref` the made-up source
/// `G(T_src, T_ref)`, or their renders for the image discriminator.
#[derive(Clone, Debug)]
pub struct AdversarialScores {
    pub tex_s_real: Tensor,
    pub tex_r_real: Tensor,
    pub tex_s_fake: Tensor,
    pub tex_r_fake: Tensor,
    pub img_real_src: Tensor,
    pub img_real_ref: Tensor,
    pub img_fake_ref_pose: Tensor,
    pub img_fake_src_pose: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    pub d_tex: f64,
    pub g_tex: f64,
    pub d_img: f64,
    pub g_img: f64,
}

pub fn adversarial_losses(s: &AdversarialScores, form: AdvForm) -> AdversarialLosses {
    AdversarialLosses {
        d_tex: neg_log_mean(&s.tex_s_real)
            + neg_log_mean(&s.tex_r_real)
            + neg_log1m_mean(&s.tex_s_fake)
            + neg_log1m_mean(&s.tex_r_fake),
        g_tex: generator_adv(&s.tex_s_fake, form) + generator_adv(&s.tex_r_fake, form),
        d_img: neg_log_mean(&s.img_real_src)
            + neg_log_mean(&s.img_real_ref)
            + neg_log1m_mean(&s.img_fake_ref_pose)
            + neg_log1m_mean(&s.img_fake_src_pose),
        g_img: generator_adv(&s.img_fake_ref_pose, form)
            + generator_adv(&s.img_fake_src_pose, form),
    }
}

/// Every scalar term of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub makeup: f64,
    pub perceptual: f64,
    pub cycle: f64,
    pub adv_g_tex: f64,
    pub adv_g_img: f64,
    pub adv_d_tex: f64,
    pub adv_d_img: f64,
}

/// `(L_G, L_D)`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> (f64, f64) {
    let g = w.lambda_a * (c.adv_g_tex + c.adv_g_img)
        + w.lambda_m * c.makeup
        + w.lambda_c * c.cycle
        + w.lambda_p * c.perceptual;
    let d = w.lambda_a * (c.adv_d_tex + c.adv_d_img);
    (g, d)
}
