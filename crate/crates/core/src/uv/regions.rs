//! Fixed makeup regions authored against the canonical UV layout.
//!
//! All regions are unions and differences of axis-aligned ellipses in
//! `(u, v)`, mirror symmetric about `u = 0.5`, and mutually disjoint. The
//! eyeballs belong to no region.

use uvmakeup_tensor::Tensor;

use crate::error::{contract, Result};
use crate::uv::texel_center;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Lips,
    Eye,
    Face,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Lips, Region::Eye, Region::Face];

    pub fn name(self) -> &'static str {
        match self {
            Region::Lips => "lips",
            Region::Eye => "eye",
            Region::Face => "face",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    center: [f64; 2],
    radii: [f64; 2],
}

impl Ellipse {
    /// Normalized radius: `≤ 1` inside.
    fn rho(&self, u: f64, v: f64) -> f64 {
        let du = (u - self.center[0]) / self.radii[0];
        let dv = (v - self.center[1]) / self.radii[1];
        (du * du + dv * dv).sqrt()
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        self.rho(u, v) <= 1.0
    }

    fn area(&self) -> f64 {
        std::f64::consts::PI * self.radii[0] * self.radii[1]
    }

    fn mirrored(&self) -> Self {
        Self {
            center: [1.0 - self.center[0], self.center[1]],
            radii: self.radii,
        }
    }
}

/// Analytic region geometry in UV space.
#[derive(Clone, Debug)]
pub struct RegionLayout {
    lips: Ellipse,
    eyeballs: [Ellipse; 2],
    eye_outer: [Ellipse; 2],
    skin: Ellipse,
}

impl Default for RegionLayout {
    fn default() -> Self {
        let eyeball = Ellipse {
            center: [0.386, 0.645],
            radii: [0.045, 0.022],
        };
        let outer = Ellipse {
            center: eyeball.center,
            radii: [0.075, 0.05],
        };
        Self {
            lips: Ellipse {
                center: [0.5, 0.27],
                radii: [0.085, 0.035],
            },
            eyeballs: [eyeball, eyeball.mirrored()],
            eye_outer: [outer, outer.mirrored()],
            skin: Ellipse {
                center: [0.5, 0.5],
                radii: [0.3, 0.42],
            },
        }
    }
}

impl RegionLayout {
    pub fn is_eyeball(&self, u: f64, v: f64) -> bool {
        self.eyeballs.iter().any(|e| e.contains(u, v))
    }

    pub fn contains(&self, region: Region, u: f64, v: f64) -> bool {
        let eyeball = self.is_eyeball(u, v);
        let eye = !eyeball && self.eye_outer.iter().any(|e| e.contains(u, v));
        let lips = self.lips.contains(u, v);
        match region {
            Region::Lips => lips,
            Region::Eye => eye,
            Region::Face => self.skin.contains(u, v) && !lips && !eye && !eyeball,
        }
    }

    /// Paint opacity: 1 on the region, falling linearly to 0 over `feather`
    /// (in normalized-radius units) just outside its outer boundary.
    pub fn paint_alpha(&self, region: Region, u: f64, v: f64, feather: f64) -> f64 {
        if self.contains(region, u, v) {
            return 1.0;
        }
        let ramp = |rho: f64| (1.0 - (rho - 1.0) / feather).clamp(0.0, 1.0);
        match region {
            Region::Lips => ramp(self.lips.rho(u, v)),
            Region::Eye if !self.is_eyeball(u, v) => ramp(
                self.eye_outer
                    .iter()
                    .map(|e| e.rho(u, v))
                    .fold(f64::INFINITY, f64::min),
            ),
            _ => 0.0,
        }
    }

    /// Area of the region in the unit UV square.
    pub fn analytic_area(&self, region: Region) -> f64 {
        let eyeballs: f64 = self.eyeballs.iter().map(Ellipse::area).sum();
        let eye: f64 = self.eye_outer.iter().map(Ellipse::area).sum::<f64>() - eyeballs;
        match region {
            Region::Lips => self.lips.area(),
            Region::Eye => eye,
            Region::Face => self.skin.area() - self.lips.area() - eye - eyeballs,
        }
    }
}

/// Binary region masks rasterized at a UV resolution, each `[1, R, R]` with
/// values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct UvRegionMasks {
    resolution: usize,
    lips: Tensor,
    eye: Tensor,
    face: Tensor,
}

impl UvRegionMasks {
    pub fn canonical(resolution: usize) -> Self {
        Self::from_layout(&RegionLayout::default(), resolution)
    }

    pub fn from_layout(layout: &RegionLayout, resolution: usize) -> Self {
        let mask = |region| {
            let mut data = Vec::with_capacity(resolution * resolution);
            for row in 0..resolution {
                for col in 0..resolution {
                    let (u, v) = texel_center(resolution, row, col);
                    data.push(if layout.contains(region, u, v) {
                        1.0
                    } else {
                        0.0
                    });
                }
            }
            Tensor::new(&[1, resolution, resolution], data).expect("mask shape")
        };
        Self {
            resolution,
            lips: mask(Region::Lips),
            eye: mask(Region::Eye),
            face: mask(Region::Face),
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn get(&self, region: Region) -> &Tensor {
        match region {
            Region::Lips => &self.lips,
            Region::Eye => &self.eye,
            Region::Face => &self.face,
        }
    }

    /// Union of the given regions.
    pub fn union(&self, regions: &[Region]) -> Tensor {
        let mut out = Tensor::zeros(&[1, self.resolution, self.resolution]);
        for r in regions {
            for (o, m) in out.data_mut().iter_mut().zip(self.get(*r).data()) {
                *o = o.max(*m);
            }
        }
        out
    }
}

/// Average-pools a `[1, R, R]` mask by `factor`.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = mask.dims3()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(contract(format!("cannot pool {h}×{w} mask by {factor}")));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = vec![0.0; c * ho * wo];
    let norm = (factor * factor) as f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * ho + y / factor) * wo + x / factor] +=
                    mask.data()[(ch * h + y) * w + x] / norm;
            }
        }
    }
    Ok(Tensor::new(&[c, ho, wo], out)?)
}

/// Nearest-neighbor upsampling of a `[C, h, w]` map by `factor`.
pub fn upsample_nearest(map: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                out.push(map.data()[(ch * h + y / factor) * w + x / factor]);
            }
        }
    }
    Ok(Tensor::new(&[c, ho, wo], out)?)
}
