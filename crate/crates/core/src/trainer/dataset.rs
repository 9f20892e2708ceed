//! Procedural training faces with known clean ground truth.
//!
//! Each sample is a random identity, expression and skin texture from the
//! morphable basis, painted with lip and eye-shadow makeup in UV space. A
//! fixed fraction of makeup samples additionally carries an occluder or a
//! cast shadow confined to one bilateral half of the texture.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uvmakeup_tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::Container;
use crate::morphable::{FaceCoefficients, MorphableBasis, Projection, COEFF_CLAMP};
use crate::uv::{texel_center, Region, RegionLayout, UvContext, UvTexture};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Makeup,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MakeupParams {
    pub lip: [f64; 3],
    pub eye_shadow: [f64; 3],
    pub skin: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContaminationKind {
    Occluder,
    Shadow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub coefficients: FaceCoefficients,
    pub clean_texture: UvTexture,
    pub contaminated_texture: UvTexture,
    /// Texels changed by contamination; all false for clean samples.
    pub contamination_mask: Vec<bool>,
    pub contamination: Option<ContaminationKind>,
    pub makeup_params: MakeupParams,
    pub pose: Pose,
    pub domain: Domain,
}

impl SyntheticSample {
    pub fn is_contaminated(&self) -> bool {
        self.contamination.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub n_makeup: usize,
    pub n_plain: usize,
    pub seed: u64,
    /// Fraction of makeup samples that are contaminated.
    pub contamination_rate: f64,
    pub image_size: usize,
    pub max_yaw: f64,
    pub max_pitch: f64,
}

impl DatasetSpec {
    pub fn new(n_makeup: usize, n_plain: usize, seed: u64, image_size: usize) -> Self {
        Self {
            n_makeup,
            n_plain,
            seed,
            contamination_rate: 0.3,
            image_size,
            max_yaw: 40.0,
            max_pitch: 10.0,
        }
    }
}

/// Mean-texture skin color of the synthetic basis, used to retint skin.
const BASE_SKIN: [f64; 3] = [0.80, 0.62, 0.52];
const EYEBALL: [f64; 3] = [0.22, 0.17, 0.15];
const FEATHER: f64 = 0.25;

/// Generates `n_makeup` makeup samples followed by `n_plain` plain ones.
/// Sample `i` draws from its own random stream, so the dataset is a pure
/// function of `spec` and the basis.
pub fn generate_dataset(
    basis: &MorphableBasis,
    ctx: &UvContext,
    spec: &DatasetSpec,
) -> Result<Vec<SyntheticSample>> {
    let mut order_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_dirty = (spec.contamination_rate * spec.n_makeup as f64).round() as usize;
    let mut dirty: Vec<bool> = (0..spec.n_makeup).map(|i| i < n_dirty).collect();
    dirty.shuffle(&mut order_rng);

    let layout = RegionLayout::default();
    let total = spec.n_makeup + spec.n_plain;
    (0..total)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1 + i as u64);
            let domain = if i < spec.n_makeup {
                Domain::Makeup
            } else {
                Domain::Plain
            };
            let contaminate = i < spec.n_makeup && dirty[i];
            sample(basis, ctx, &layout, spec, domain, contaminate, &mut rng)
        })
        .collect()
}

fn uniform3(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| rng.random_range(lo[k]..hi[k]))
}

fn sample(
    basis: &MorphableBasis,
    ctx: &UvContext,
    layout: &RegionLayout,
    spec: &DatasetSpec,
    domain: Domain,
    contaminate: bool,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticSample> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let draw = |k: usize, sd: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..k)
            .map(|_| (normal.sample(rng) * sd).clamp(-COEFF_CLAMP, COEFF_CLAMP))
            .collect()
    };
    let alpha_id = draw(basis.k_id(), 0.8, rng);
    let alpha_exp = draw(basis.k_exp(), 0.5, rng);
    let alpha_tex = draw(basis.k_tex(), 0.8, rng);

    let pose = Pose {
        yaw: rng.random_range(-spec.max_yaw..=spec.max_yaw),
        pitch: rng.random_range(-spec.max_pitch..=spec.max_pitch),
    };
    let size = spec.image_size as f64;
    let jitter = 0.02 * size;
    let projection = Projection::weak_perspective(
        pose.yaw,
        pose.pitch,
        0.0,
        0.34 * size * rng.random_range(0.95..1.05),
        size / 2.0 + rng.random_range(-jitter..jitter),
        size / 2.0 + rng.random_range(-jitter..jitter),
    );
    let coefficients = FaceCoefficients {
        alpha_id,
        alpha_exp,
        alpha_tex,
        projection,
    };

    let r_base = rng.random_range(0.55..0.92);
    let skin = [
        r_base,
        r_base * rng.random_range(0.72..0.82),
        r_base * rng.random_range(0.58..0.7),
    ];
    let makeup_params = match domain {
        Domain::Makeup => MakeupParams {
            lip: uniform3(rng, [0.45, 0.04, 0.08], [0.95, 0.35, 0.5]),
            eye_shadow: uniform3(rng, [0.1, 0.05, 0.1], [0.75, 0.6, 0.75]),
            skin,
        },
        Domain::Plain => MakeupParams {
            lip: [skin[0] * 0.92, skin[1] * 0.62, skin[2] * 0.66],
            eye_shadow: skin,
            skin,
        },
    };

    let colors = crate::morphable::evaluate_texture(basis, &coefficients)?;
    let base = ctx.layout.interpolate(basis.triangles(), &colors);
    let clean = paint(&base, ctx.resolution(), layout, &makeup_params, domain);

    let (contaminated, mask, kind) = if contaminate {
        let (t, m, k) = contaminate_half(&clean, ctx.resolution(), layout, rng);
        (t, m, Some(k))
    } else {
        (
            clean.clone(),
            vec![false; ctx.resolution() * ctx.resolution()],
            None,
        )
    };
    Ok(SyntheticSample {
        coefficients,
        clean_texture: UvTexture::from_pixels(clean)?,
        contaminated_texture: UvTexture::from_pixels(contaminated)?,
        contamination_mask: mask,
        contamination: kind,
        makeup_params,
        pose,
        domain,
    })
}

fn paint(
    base: &Tensor,
    r: usize,
    layout: &RegionLayout,
    params: &MakeupParams,
    domain: Domain,
) -> Tensor {
    let plane = r * r;
    let mut out = base.clone();
    let data = out.data_mut();
    for row in 0..r {
        for col in 0..r {
            let (u, v) = texel_center(r, row, col);
            let i = row * r + col;
            let mut rgb = [0, 1, 2]
                .map(|c| (data[c * plane + i] * params.skin[c] / BASE_SKIN[c]).clamp(0.0, 1.0));
            let lip_alpha = layout.paint_alpha(Region::Lips, u, v, FEATHER);
            let eye_alpha = if domain == Domain::Makeup {
                layout.paint_alpha(Region::Eye, u, v, FEATHER)
            } else {
                0.0
            };
            for c in 0..3 {
                rgb[c] += lip_alpha * (params.lip[c] - rgb[c]);
                rgb[c] += eye_alpha * (params.eye_shadow[c] - rgb[c]);
            }
            if layout.is_eyeball(u, v) {
                rgb = EYEBALL;
            }
            for c in 0..3 {
                data[c * plane + i] = rgb[c];
            }
        }
    }
    out
}

/// Applies an occluder rectangle or a soft-edged shadow to one bilateral
/// half, aimed at the lips or an eye on that side.
fn contaminate_half(
    clean: &Tensor,
    r: usize,
    layout: &RegionLayout,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<bool>, ContaminationKind) {
    let left = rng.random_bool(0.5);
    let side = |u: f64| if left { u } else { 1.0 - u };
    let kind = if rng.random_bool(0.5) {
        ContaminationKind::Occluder
    } else {
        ContaminationKind::Shadow
    };
    let target: [f64; 2] = if rng.random_bool(0.5) {
        [0.44, 0.27]
    } else {
        [0.386, 0.645]
    };
    let face_area = layout.analytic_area(Region::Face)
        + layout.analytic_area(Region::Lips)
        + layout.analytic_area(Region::Eye);
    let area = face_area * rng.random_range(0.05..0.20);
    let width = (area * rng.random_range(0.7..1.4)).sqrt().min(0.28);
    let height = (area / width).min(0.6);
    // rectangle in left-half coordinates, kept inside u ∈ [0.2, 0.5)
    let cu =
        (target[0] + rng.random_range(-0.03..0.03)).clamp(0.2 + width / 2.0, 0.5 - width / 2.0);
    let cv = target[1] + rng.random_range(-0.03..0.03);
    let (u0, u1, v0, v1) = (
        cu - width / 2.0,
        cu + width / 2.0,
        cv - height / 2.0,
        cv + height / 2.0,
    );

    let occluder = uniform3(rng, [0.1, 0.1, 0.1], [0.9, 0.9, 0.9]);
    let strength = rng.random_range(0.3..0.7);
    let soft = 0.03;

    let plane = r * r;
    let mut out = clean.clone();
    let mut mask = vec![false; plane];
    let half = r / 2;
    for row in 0..r {
        for col in 0..r {
            if (col < half) != left {
                continue;
            }
            let (u, v) = texel_center(r, row, col);
            let lu = side(u);
            let i = row * r + col;
            match kind {
                ContaminationKind::Occluder => {
                    if lu >= u0 && lu <= u1 && v >= v0 && v <= v1 {
                        let shade = 1.0 - 0.1 * ((v - v0) / height);
                        for c in 0..3 {
                            out.data_mut()[c * plane + i] = occluder[c] * shade;
                        }
                        mask[i] = true;
                    }
                }
                ContaminationKind::Shadow => {
                    let inset = (lu - u0).min(u1 - lu).min(v - v0).min(v1 - v);
                    if inset > 0.0 {
                        let factor = 1.0 - strength * (inset / soft).min(1.0);
                        for c in 0..3 {
                            out.data_mut()[c * plane + i] *= factor;
                        }
                        mask[i] = true;
                    }
                }
            }
        }
    }
    (out, mask, kind)
}

fn texture_records(c: &mut Container, prefix: &str, t: &UvTexture) -> Result<()> {
    let r = t.resolution();
    c.push_tensor(prefix, t.pixels())?;
    c.push_u8(
        format!("{prefix}_valid"),
        &[r, r],
        t.validity().iter().map(|&v| v as u8).collect(),
    )
}

fn read_texture(c: &Container, prefix: &str) -> Result<UvTexture> {
    let valid = c.require(&format!("{prefix}_valid"))?.data.to_f64();
    UvTexture::new(c.tensor(prefix)?, valid.iter().map(|&v| v != 0.0).collect())
}

/// Every sample as named records under `sample_NNNN/`.
pub fn dataset_to_container(samples: &[SyntheticSample]) -> Result<Container> {
    let mut c = Container::new();
    for (i, s) in samples.iter().enumerate() {
        let p = format!("sample_{i:04}");
        let r = s.clean_texture.resolution();
        texture_records(&mut c, &format!("{p}/clean_texture"), &s.clean_texture)?;
        texture_records(
            &mut c,
            &format!("{p}/contaminated_texture"),
            &s.contaminated_texture,
        )?;
        c.push_u8(
            format!("{p}/contamination_mask"),
            &[r, r],
            s.contamination_mask.iter().map(|&v| v as u8).collect(),
        )?;
        let k = &s.coefficients;
        c.push_f64(
            format!("{p}/alpha_id"),
            &[k.alpha_id.len()],
            k.alpha_id.clone(),
        )?;
        c.push_f64(
            format!("{p}/alpha_exp"),
            &[k.alpha_exp.len()],
            k.alpha_exp.clone(),
        )?;
        c.push_f64(
            format!("{p}/alpha_tex"),
            &[k.alpha_tex.len()],
            k.alpha_tex.clone(),
        )?;
        c.push_f64(
            format!("{p}/projection"),
            &[3, 4],
            k.projection.flat().to_vec(),
        )?;
        let m = &s.makeup_params;
        c.push_f64(
            format!("{p}/makeup"),
            &[3, 3],
            [m.lip, m.eye_shadow, m.skin].concat(),
        )?;
        c.push_f64(format!("{p}/pose"), &[2], vec![s.pose.yaw, s.pose.pitch])?;
        let domain = match s.domain {
            Domain::Makeup => 0,
            Domain::Plain => 1,
        };
        let kind = match s.contamination {
            None => 0,
            Some(ContaminationKind::Occluder) => 1,
            Some(ContaminationKind::Shadow) => 2,
        };
        c.push_u8(format!("{p}/tags"), &[2], vec![domain, kind])?;
    }
    Ok(c)
}

pub fn dataset_from_container(c: &Container) -> Result<Vec<SyntheticSample>> {
    let bad = |detail: String| Error::Format {
        what: "dataset container",
        detail,
    };
    let mut out = Vec::new();
    for i in 0.. {
        let p = format!("sample_{i:04}");
        if c.get(&format!("{p}/tags")).is_none() {
            break;
        }
        let f = |name: &str| -> Result<Vec<f64>> {
            Ok(c.require(&format!("{p}/{name}"))?.data.to_f64())
        };
        let tags = f("tags")?;
        let domain = match tags[0] as u8 {
            0 => Domain::Makeup,
            1 => Domain::Plain,
            t => return Err(bad(format!("{p}: unknown domain tag {t}"))),
        };
        let contamination = match tags[1] as u8 {
            0 => None,
            1 => Some(ContaminationKind::Occluder),
            2 => Some(ContaminationKind::Shadow),
            t => return Err(bad(format!("{p}: unknown contamination tag {t}"))),
        };
        let m = f("makeup")?;
        let pose = f("pose")?;
        if m.len() != 9 || pose.len() != 2 {
            return Err(bad(format!(
                "{p}: makeup or pose record has the wrong size"
            )));
        }
        out.push(SyntheticSample {
            coefficients: FaceCoefficients {
                alpha_id: f("alpha_id")?,
                alpha_exp: f("alpha_exp")?,
                alpha_tex: f("alpha_tex")?,
                projection: Projection::from_flat(&f("projection")?)?,
            },
            clean_texture: read_texture(c, &format!("{p}/clean_texture"))?,
            contaminated_texture: read_texture(c, &format!("{p}/contaminated_texture"))?,
            contamination_mask: f("contamination_mask")?.iter().map(|&v| v != 0.0).collect(),
            contamination,
            makeup_params: MakeupParams {
                lip: [m[0], m[1], m[2]],
                eye_shadow: [m[3], m[4], m[5]],
                skin: [m[6], m[7], m[8]],
            },
            pose: Pose {
                yaw: pose[0],
                pitch: pose[1],
            },
            domain,
        });
    }
    Ok(out)
}
