use std::sync::Arc;

use uvmakeup_tensor::{BilinearMap, BilinearTaps, Tape, Tensor, Var};

use crate::error::{contract, Result};
use crate::morphable::FittedFace;
use crate::uv::regions::{Region, UvRegionMasks};
use crate::uv::UvTexture;

/// The front-most surface point seen through one pixel center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelHit {
    pub triangle: usize,
    pub bary: [f64; 3],
    pub depth: f64,
    pub uv: [f64; 2],
}

/// Geometry-only rasterization of a posed face. Because visibility and UV
/// lookup depend only on the geometry, rendering a texture through the plan
/// is a fixed linear map of the texels.
#[derive(Clone, Debug)]
pub struct RasterPlan {
    height: usize,
    width: usize,
    uv_resolution: usize,
    hits: Vec<Option<PixelHit>>,
    map: Arc<BilinearMap>,
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Texture-space taps for a UV coordinate, clamp-to-edge.
pub(crate) fn uv_taps(uv: [f64; 2], resolution: usize) -> BilinearTaps {
    let r = resolution as f64;
    BilinearTaps::clamped(
        uv[0] * r - 0.5,
        (1.0 - uv[1]) * r - 0.5,
        resolution,
        resolution,
    )
}

impl RasterPlan {
    pub fn new(face: &FittedFace, image_size: (usize, usize), uv_resolution: usize) -> Self {
        let (height, width) = image_size;
        let projected = face.projected();
        let view = [
            face.projection.0[2][0],
            face.projection.0[2][1],
            face.projection.0[2][2],
        ];
        let mut hits: Vec<Option<PixelHit>> = vec![None; height * width];
        for (ti, t) in face.triangles.iter().enumerate() {
            let [a, b, c] = t.map(|i| face.vertices[i]);
            let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            if n[0] * view[0] + n[1] * view[1] + n[2] * view[2] <= 0.0 {
                continue;
            }
            let p = t.map(|i| projected.xy[i]);
            let area = edge(p[0], p[1], p[2]);
            if area.abs() < 1e-12 {
                continue;
            }
            let xs = p.map(|q| q[0]);
            let ys = p.map(|q| q[1]);
            let x_lo = (xs.iter().copied().fold(f64::INFINITY, f64::min) - 0.5)
                .ceil()
                .max(0.0);
            let x_hi = (xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 0.5)
                .floor()
                .min(width as f64 - 1.0);
            let y_lo = (ys.iter().copied().fold(f64::INFINITY, f64::min) - 0.5)
                .ceil()
                .max(0.0);
            let y_hi = (ys.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 0.5)
                .floor()
                .min(height as f64 - 1.0);
            if x_hi < x_lo || y_hi < y_lo {
                continue;
            }
            for y in y_lo as usize..=y_hi as usize {
                for x in x_lo as usize..=x_hi as usize {
                    let q = [x as f64 + 0.5, y as f64 + 0.5];
                    let w0 = edge(p[1], p[2], q) / area;
                    let w1 = edge(p[2], p[0], q) / area;
                    let w2 = 1.0 - w0 - w1;
                    if w0 < -1e-9 || w1 < -1e-9 || w2 < -1e-9 {
                        continue;
                    }
                    let w = [w0.max(0.0), w1.max(0.0), w2.max(0.0)];
                    let total: f64 = w.iter().sum();
                    let bary = w.map(|x| x / total);
                    let depth: f64 = (0..3).map(|k| bary[k] * projected.depth[t[k]]).sum();
                    let slot = &mut hits[y * width + x];
                    if slot.is_none_or(|h| depth > h.depth) {
                        let uv =
                            [0, 1].map(|d| (0..3).map(|k| bary[k] * face.uv_coords[t[k]][d]).sum());
                        *slot = Some(PixelHit {
                            triangle: ti,
                            bary,
                            depth,
                            uv,
                        });
                    }
                }
            }
        }
        let taps = hits
            .iter()
            .map(|h| h.map(|h| uv_taps(h.uv, uv_resolution)))
            .collect();
        let map = Arc::new(BilinearMap::new(uv_resolution * uv_resolution, taps));
        Self {
            height,
            width,
            uv_resolution,
            hits,
            map,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn uv_resolution(&self) -> usize {
        self.uv_resolution
    }

    pub fn hits(&self) -> &[Option<PixelHit>] {
        &self.hits
    }

    pub fn face_mask(&self) -> Vec<bool> {
        self.hits.iter().map(Option::is_some).collect()
    }

    /// Depth buffer; `-∞` on background pixels.
    pub fn depth(&self) -> Vec<f64> {
        self.hits
            .iter()
            .map(|h| h.map_or(f64::NEG_INFINITY, |h| h.depth))
            .collect()
    }

    pub fn map(&self) -> &Arc<BilinearMap> {
        &self.map
    }

    fn check_texture(&self, shape: &[usize]) -> Result<usize> {
        match shape {
            [c, h, w] if *h == self.uv_resolution && *w == self.uv_resolution => Ok(*c),
            _ => Err(contract(format!(
                "texture shape {shape:?} does not match plan resolution {}",
                self.uv_resolution
            ))),
        }
    }

    /// Renders a `[C, R, R]` texture to `[C, H, W]`.
    pub fn render(&self, texture: &Tensor, background: f64) -> Result<Tensor> {
        let c = self.check_texture(texture.shape())?;
        let mut out = self.map.apply(texture.data());
        if background != 0.0 {
            let plane = self.height * self.width;
            for (i, v) in out.iter_mut().enumerate() {
                if self.hits[i % plane].is_none() {
                    *v = background;
                }
            }
        }
        Ok(Tensor::new(&[c, self.height, self.width], out)?)
    }

    /// Differentiable rendering of a texture node.
    pub fn render_var(&self, tape: &mut Tape, texture: Var, background: f64) -> Result<Var> {
        let c = self.check_texture(tape.value(texture).shape())?;
        let shape = [c, self.height, self.width];
        let img = tape.bilinear(texture, Arc::clone(&self.map), &shape);
        if background == 0.0 {
            return Ok(img);
        }
        let plane = self.height * self.width;
        let bg: Vec<f64> = (0..c * plane)
            .map(|i| {
                if self.hits[i % plane].is_none() {
                    background
                } else {
                    0.0
                }
            })
            .collect();
        let bg = tape.constant(Tensor::new(&shape, bg)?);
        Ok(tape.add(img, bg))
    }

    /// UV region masks rendered through the same map, thresholded at 0.5.
    pub fn region_masks(&self, masks: &UvRegionMasks) -> Result<ImageRegionMasks> {
        let render = |r: Region| -> Result<Vec<bool>> {
            Ok(self
                .render(masks.get(r), 0.0)?
                .data()
                .iter()
                .map(|&v| v > 0.5)
                .collect())
        };
        Ok(ImageRegionMasks {
            height: self.height,
            width: self.width,
            lips: render(Region::Lips)?,
            eye: render(Region::Eye)?,
            face: render(Region::Face)?,
        })
    }
}

/// Image-space region masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRegionMasks {
    pub height: usize,
    pub width: usize,
    pub lips: Vec<bool>,
    pub eye: Vec<bool>,
    pub face: Vec<bool>,
}

impl ImageRegionMasks {
    pub fn get(&self, region: Region) -> &[bool] {
        match region {
            Region::Lips => &self.lips,
            Region::Eye => &self.eye,
            Region::Face => &self.face,
        }
    }

    pub fn count(&self, region: Region) -> usize {
        self.get(region).iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub pixels: Tensor,
    pub face_mask: Vec<bool>,
    pub region_masks: ImageRegionMasks,
}

/// Renders a face with a UV texture; uncovered pixels take `background`.
pub fn rasterize(
    face: &FittedFace,
    texture: &UvTexture,
    image_size: (usize, usize),
    background: f64,
) -> Result<RenderedImage> {
    let plan = RasterPlan::new(face, image_size, texture.resolution());
    let pixels = plan.render(texture.pixels(), background)?;
    let region_masks = plan.region_masks(&UvRegionMasks::canonical(texture.resolution()))?;
    Ok(RenderedImage {
        pixels,
        face_mask: plan.face_mask(),
        region_masks,
    })
}

/// Renders UV region masks for a posed face.
pub fn rasterize_region_masks(
    face: &FittedFace,
    masks: &UvRegionMasks,
    image_size: (usize, usize),
) -> Result<ImageRegionMasks> {
    RasterPlan::new(face, image_size, masks.resolution()).region_masks(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::{FaceCoefficients, MorphableBasis, Projection};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn face(yaw: f64) -> (MorphableBasis, FittedFace) {
        let basis = MorphableBasis::synthetic(11);
        let mut c = FaceCoefficients::zeros(&basis);
        c.projection = Projection::weak_perspective(yaw, 0.0, 0.0, 24.0, 32.0, 32.0);
        let f = FittedFace::from_coefficients(&basis, &c).unwrap();
        (basis, f)
    }

    fn random_texture(r: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[3, r, r],
            (0..3 * r * r).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_texture_renders_exactly() {
        let (_, f) = face(15.0);
        let img = rasterize(
            &f,
            &UvTexture::uniform(32, [0.3, 0.7, 0.123]),
            (64, 64),
            0.0,
        )
        .unwrap();
        let mut covered = 0;
        for (i, &m) in img.face_mask.iter().enumerate() {
            for (c, want) in [0.3, 0.7, 0.123].into_iter().enumerate() {
                let got = img.pixels.data()[c * 4096 + i];
                if m {
                    assert_eq!(got, want);
                } else {
                    assert_eq!(got, 0.0);
                }
            }
            covered += m as usize;
        }
        assert!(covered > 800, "face covers {covered} pixels");
    }

    #[test]
    fn rendering_is_linear_in_texture() {
        let (_, f) = face(-20.0);
        let plan = RasterPlan::new(&f, (64, 64), 32);
        let (t1, t2) = (random_texture(32, 1), random_texture(32, 2));
        let bg = 0.25;
        let sum = t1.zip_map(&t2, |a, b| a + b).unwrap();
        let (r1, r2, r12) = (
            plan.render(&t1, bg).unwrap(),
            plan.render(&t2, bg).unwrap(),
            plan.render(&sum, bg).unwrap(),
        );
        let mask = plan.face_mask();
        for i in 0..r1.numel() {
            if mask[i % 4096] {
                assert!((r12.data()[i] - r1.data()[i] - r2.data()[i]).abs() < 1e-6);
            } else {
                assert_eq!(r12.data()[i], bg);
            }
        }
        let doubled = plan.render(&t1.scale(2.0), 0.0).unwrap();
        let single = plan.render(&t1, 0.0).unwrap();
        assert!(doubled.max_abs_diff(&single.scale(2.0)) < 1e-12);
    }

    #[test]
    fn full_mask_matches_face_mask_and_regions_are_disjoint() {
        let (_, f) = face(0.0);
        let plan = RasterPlan::new(&f, (64, 64), 64);
        let full = Tensor::full(&[1, 64, 64], 1.0);
        let rendered: Vec<bool> = plan
            .render(&full, 0.0)
            .unwrap()
            .data()
            .iter()
            .map(|&v| v > 0.5)
            .collect();
        assert_eq!(rendered, plan.face_mask());
        let masks = plan.region_masks(&UvRegionMasks::canonical(64)).unwrap();
        for i in 0..64 * 64 {
            let n = [&masks.lips, &masks.eye, &masks.face]
                .iter()
                .filter(|m| m[i])
                .count();
            assert!(n <= 1);
            if n == 1 {
                assert!(plan.face_mask()[i]);
            }
        }
    }

    #[test]
    fn front_facing_pixels_are_nearest() {
        let (_, f) = face(30.0);
        let plan = RasterPlan::new(&f, (64, 64), 32);
        let projected = f.projected();
        // no visible pixel lies behind another front-facing triangle covering it
        let max_depth = projected
            .depth
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        for h in plan.hits().iter().flatten() {
            assert!(h.depth <= max_depth + 1e-9);
        }
    }
}
