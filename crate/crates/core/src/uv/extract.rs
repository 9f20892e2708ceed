use uvmakeup_tensor::{BilinearTaps, Tensor};

use crate::error::{Error, Result};
use crate::morphable::FittedFace;
use crate::uv::raster::RasterPlan;
use crate::uv::{UvContext, UvTexture};

#[derive(Clone, Copy, Debug)]
pub struct ExtractOptions {
    /// Depth tolerance as a fraction of the face's depth extent.
    pub z_eps: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { z_eps: 1e-3 }
    }
}

/// Bilinear taps at image coordinates `(x, y)` (pixel centers on integers)
/// if every tap with nonzero weight lies inside a `w × h` image.
fn interior_taps(x: f64, y: f64, w: usize, h: usize) -> Option<BilinearTaps> {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let need_x1 = fx > 0.0;
    let need_y1 = fy > 0.0;
    if x0 < 0.0 || y0 < 0.0 {
        return None;
    }
    let (x0, y0) = (x0 as usize, y0 as usize);
    if x0 >= w || y0 >= h || (need_x1 && x0 + 1 >= w) || (need_y1 && y0 + 1 >= h) {
        return None;
    }
    let x1 = if need_x1 { x0 + 1 } else { x0 };
    let y1 = if need_y1 { y0 + 1 } else { y0 };
    Some(BilinearTaps {
        corners: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        fx,
        fy,
    })
}

/// Samples a `[3, H, W]` image at every texel's projected surface point.
///
/// A texel is valid when all of its image taps are covered by the face and
/// the surface point is not behind the rendered depth at that position.
/// Invalid texels copy their mirror texel when that one is valid, and the
/// mean texture otherwise.
pub fn extract_uv_texture(
    image: &Tensor,
    face: &FittedFace,
    ctx: &UvContext,
    options: ExtractOptions,
) -> Result<UvTexture> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::DimensionMismatch {
            axis: "image channels",
            expected: 3,
            actual: c,
        });
    }
    let projected = face.projected();
    let inside = projected
        .xy
        .iter()
        .any(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= w as f64 && p[1] <= h as f64);
    if !inside {
        return Err(Error::Extraction(
            "face projects entirely outside the image".into(),
        ));
    }
    let (d_lo, d_hi) = projected
        .depth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
            (lo.min(d), hi.max(d))
        });
    let tolerance = options.z_eps * (d_hi - d_lo);

    let plan = RasterPlan::new(face, (h, w), ctx.resolution());
    let zbuf = plan.depth();
    let r = ctx.resolution();
    let plane_uv = r * r;
    let plane_img = h * w;
    let mut pixels = vec![0.0; 3 * plane_uv];
    let mut validity = vec![false; plane_uv];

    for (i, site) in ctx.layout.sites().iter().enumerate() {
        let t = face.triangles[site.triangle];
        let mut xyz = [0.0; 3];
        for k in 0..3 {
            let p = face.projection.apply(&face.vertices[t[k]]);
            for d in 0..3 {
                xyz[d] += site.bary[k] * p[d];
            }
        }
        let Some(taps) = interior_taps(xyz[0] - 0.5, xyz[1] - 0.5, w, h) else {
            continue;
        };
        if taps.corners.iter().any(|&p| zbuf[p] == f64::NEG_INFINITY) {
            continue;
        }
        if xyz[2] < taps.sample(&zbuf) - tolerance {
            continue;
        }
        validity[i] = true;
        for ch in 0..3 {
            pixels[ch * plane_uv + i] =
                taps.sample(&image.data()[ch * plane_img..(ch + 1) * plane_img]);
        }
    }

    let mean = ctx.mean_texture.data();
    for i in 0..plane_uv {
        if validity[i] {
            continue;
        }
        let (row, col) = (i / r, i % r);
        let m = row * r + (r - 1 - col);
        for ch in 0..3 {
            pixels[ch * plane_uv + i] = if validity[m] {
                pixels[ch * plane_uv + m]
            } else {
                mean[ch * plane_uv + i]
            };
        }
    }
    UvTexture::new(Tensor::new(&[3, r, r], pixels)?, validity)
}
