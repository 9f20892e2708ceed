//! Canonical UV space: unwrap, texel-to-surface layout, textures, the
//! texture-differentiable rasterizer and visibility-aware extraction.
//!
//! UV textures are `[3, R, R]` tensors. Texel `(row, col)` has its center at
//! `u = (col + 0.5) / R`, `v = 1 − (row + 0.5) / R`, so row 0 is the top of
//! the face and the width axis is `u`.

mod extract;
mod raster;
pub mod regions;
pub mod unwrap;

use uvmakeup_tensor::Tensor;

use crate::error::{contract, Error, Result};
use crate::morphable::MorphableBasis;

pub use extract::{extract_uv_texture, ExtractOptions};
pub use raster::{rasterize, rasterize_region_masks, ImageRegionMasks, RasterPlan, RenderedImage};
pub use regions::{Region, RegionLayout, UvRegionMasks};
pub use unwrap::cylindrical_unwrap;

/// Continuous UV coordinate of a texel center.
pub fn texel_center(resolution: usize, row: usize, col: usize) -> (f64, f64) {
    let r = resolution as f64;
    ((col as f64 + 0.5) / r, 1.0 - (row as f64 + 0.5) / r)
}

/// An RGB texture in the canonical layout plus a per-texel record of
/// direct visibility at extraction time.
#[derive(Clone, Debug, PartialEq)]
pub struct UvTexture {
    pixels: Tensor,
    validity: Vec<bool>,
}

impl UvTexture {
    pub fn new(pixels: Tensor, validity: Vec<bool>) -> Result<Self> {
        let (c, h, w) = pixels.dims3()?;
        if c != 3 || h != w {
            return Err(contract(format!(
                "UV texture must be [3, R, R], got {:?}",
                pixels.shape()
            )));
        }
        if validity.len() != h * w {
            return Err(Error::DimensionMismatch {
                axis: "validity texels",
                expected: h * w,
                actual: validity.len(),
            });
        }
        Ok(Self { pixels, validity })
    }

    /// A texture whose every texel is marked valid.
    pub fn from_pixels(pixels: Tensor) -> Result<Self> {
        let n = pixels.shape().iter().skip(1).product();
        Self::new(pixels, vec![true; n])
    }

    pub fn uniform(resolution: usize, color: [f64; 3]) -> Self {
        let plane = resolution * resolution;
        let data = color
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, plane))
            .collect();
        Self::from_pixels(Tensor::new(&[3, resolution, resolution], data).expect("uniform shape"))
            .expect("uniform texture")
    }

    pub fn resolution(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn texel(&self, row: usize, col: usize) -> [f64; 3] {
        let r = self.resolution();
        [0, 1, 2].map(|c| self.pixels.data()[(c * r + row) * r + col])
    }

    /// Reverses the `u` axis of pixels and validity.
    pub fn flip(&self) -> Result<Self> {
        let pixels = flip_uv(&self.pixels)?;
        let r = self.resolution();
        let validity = self
            .validity
            .chunks(r)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        Ok(Self { pixels, validity })
    }
}

/// Reverses the width axis of a `[C, H, W]` texture or feature map.
pub fn flip_uv(x: &Tensor) -> Result<Tensor> {
    let (_, _, w) = x.dims3()?;
    if w % 2 != 0 {
        return Err(contract(format!("flip needs an even width, got {w}")));
    }
    Ok(x.flip_last())
}

/// The surface point under one texel: a triangle and barycentric weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TexelSite {
    pub triangle: usize,
    pub bary: [f64; 3],
}

/// Maps every texel center of an `R × R` grid to the mesh surface.
#[derive(Clone, Debug)]
pub struct UvLayout {
    resolution: usize,
    sites: Vec<TexelSite>,
}

fn bary2(p: [[f64; 2]; 3], q: [f64; 2]) -> Option<[f64; 3]> {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    if det.abs() < 1e-300 {
        return None;
    }
    let l1 =
        ((q[0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (q[1] - p[0][1])) / det;
    let l2 =
        ((p[1][0] - p[0][0]) * (q[1] - p[0][1]) - (q[0] - p[0][0]) * (p[1][1] - p[0][1])) / det;
    Some([1.0 - l1 - l2, l1, l2])
}

impl UvLayout {
    pub fn new(
        uv_coords: &[[f64; 2]],
        triangles: &[[usize; 3]],
        resolution: usize,
    ) -> Result<Self> {
        if resolution == 0 {
            return Err(contract("UV resolution must be positive"));
        }
        let r = resolution as f64;
        let mut best: Vec<Option<(f64, TexelSite)>> = vec![None; resolution * resolution];
        for (ti, t) in triangles.iter().enumerate() {
            let p = t.map(|i| uv_coords[i]);
            let (umin, umax) = (
                p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min),
                p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max),
            );
            let (vmin, vmax) = (
                p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min),
                p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max),
            );
            let col_lo = ((umin * r - 0.5).ceil().max(0.0)) as usize;
            let col_hi = ((umax * r - 0.5).floor().min(r - 1.0)).max(-1.0);
            let row_lo = (((1.0 - vmax) * r - 0.5).ceil().max(0.0)) as usize;
            let row_hi = (((1.0 - vmin) * r - 0.5).floor().min(r - 1.0)).max(-1.0);
            if col_hi < 0.0 || row_hi < 0.0 {
                continue;
            }
            for row in row_lo..=row_hi as usize {
                for col in col_lo..=col_hi as usize {
                    let (u, v) = texel_center(resolution, row, col);
                    let Some(b) = bary2(p, [u, v]) else { continue };
                    let score = b.iter().copied().fold(f64::INFINITY, f64::min);
                    if score < -1e-9 {
                        continue;
                    }
                    let slot = &mut best[row * resolution + col];
                    if slot.is_none_or(|(s, _)| score > s) {
                        *slot = Some((
                            score,
                            TexelSite {
                                triangle: ti,
                                bary: b,
                            },
                        ));
                    }
                }
            }
        }
        // Texels that no triangle covers (only possible at the outer rim
        // through rounding) snap to the nearest triangle by barycentric slack.
        let mut sites = Vec::with_capacity(best.len());
        for (i, slot) in best.into_iter().enumerate() {
            let site = match slot {
                Some((_, s)) => s,
                None => {
                    let (u, v) = texel_center(resolution, i / resolution, i % resolution);
                    nearest_site(uv_coords, triangles, [u, v])
                        .ok_or_else(|| contract("UV layout has no usable triangle"))?
                }
            };
            sites.push(site);
        }
        Ok(Self { resolution, sites })
    }

    pub fn for_basis(basis: &MorphableBasis, resolution: usize) -> Result<Self> {
        Self::new(basis.uv_coords(), basis.triangles(), resolution)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn sites(&self) -> &[TexelSite] {
        &self.sites
    }

    /// Barycentric interpolation of per-vertex values to a `[3, R, R]`
    /// texture.
    pub fn interpolate(&self, triangles: &[[usize; 3]], values: &[[f64; 3]]) -> Tensor {
        let plane = self.resolution * self.resolution;
        let mut data = vec![0.0; 3 * plane];
        for (i, s) in self.sites.iter().enumerate() {
            let t = triangles[s.triangle];
            for c in 0..3 {
                data[c * plane + i] = (0..3).map(|k| s.bary[k] * values[t[k]][c]).sum();
            }
        }
        Tensor::new(&[3, self.resolution, self.resolution], data).expect("layout shape")
    }
}

fn nearest_site(uv: &[[f64; 2]], triangles: &[[usize; 3]], q: [f64; 2]) -> Option<TexelSite> {
    let mut best: Option<(f64, TexelSite)> = None;
    for (ti, t) in triangles.iter().enumerate() {
        let Some(b) = bary2(t.map(|i| uv[i]), q) else {
            continue;
        };
        let score = b.iter().copied().fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(s, _)| score > s) {
            let clamped = b.map(|x| x.max(0.0));
            let total: f64 = clamped.iter().sum();
            best = Some((
                score,
                TexelSite {
                    triangle: ti,
                    bary: clamped.map(|x| x / total),
                },
            ));
        }
    }
    best.map(|(_, s)| s)
}

/// Basis-derived data shared by every UV operation at one resolution.
#[derive(Clone, Debug)]
pub struct UvContext {
    pub layout: UvLayout,
    /// Mean texture rendered to UV, the fallback for unseen texels.
    pub mean_texture: Tensor,
    pub regions: UvRegionMasks,
    pub mirror_map: Vec<usize>,
}

impl UvContext {
    pub fn new(basis: &MorphableBasis, resolution: usize) -> Result<Self> {
        if resolution % 2 != 0 {
            return Err(contract(format!(
                "uv_resolution must be even, got {resolution}"
            )));
        }
        let layout = UvLayout::for_basis(basis, resolution)?;
        let mean_texture = layout.interpolate(basis.triangles(), &basis.mean_texture());
        Ok(Self {
            layout,
            mean_texture,
            regions: UvRegionMasks::canonical(resolution),
            mirror_map: basis.mirror_map().to_vec(),
        })
    }

    pub fn resolution(&self) -> usize {
        self.layout.resolution()
    }
}

/// PSNR in dB (peak 1) of `a` against `b` over the texels where `valid`
/// holds; infinite for identical inputs, `None` with no valid texel.
pub fn masked_psnr(a: &Tensor, b: &Tensor, valid: &[bool]) -> Option<f64> {
    let plane = valid.len();
    let (mut se, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if valid[i % plane] {
            se += (x - y) * (x - y);
            n += 1;
        }
    }
    (n > 0).then(|| -10.0 * (se / n as f64).log10())
}

/// Mean absolute difference over the texels where `valid` holds.
pub fn masked_mae(a: &Tensor, b: &Tensor, valid: &[bool]) -> Option<f64> {
    let plane = valid.len();
    let (mut s, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if valid[i % plane] {
            s += (x - y).abs();
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}
