use std::f64::consts::FRAC_PI_2;

use crate::error::{contract, Result};
use crate::morphable::MorphableBasis;

/// Half-width of the longitude range mapped onto `u ∈ [0, 1]`.
pub const THETA_SPAN: f64 = FRAC_PI_2;

/// `u = 0.5 + atan2(x, z) / (2·θ_span)`, `v = (y − y_min) / (y_max − y_min)`,
/// both clipped to `[0, 1]`.
pub fn unwrap_points(points: &[[f64; 3]]) -> Result<Vec<[f64; 2]>> {
    let (y_min, y_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[1]), hi.max(p[1]))
        });
    let height = y_max - y_min;
    if !(height > 0.0) {
        return Err(contract("mesh has zero height; cannot unwrap"));
    }
    Ok(points
        .iter()
        .map(|p| {
            let u = 0.5 + p[0].atan2(p[2]) / (2.0 * THETA_SPAN);
            let v = (p[1] - y_min) / height;
            [u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)]
        })
        .collect())
}

/// Cylindrical UV coordinates of the basis mean shape.
pub fn cylindrical_unwrap(basis: &MorphableBasis) -> Result<Vec<[f64; 2]>> {
    unwrap_points(&basis.mean_shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midline_and_top() {
        let uv = unwrap_points(&[[0.0, 1.0, 2.0], [0.3, -1.0, 1.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(uv[0], [0.5, 1.0]);
        assert_eq!(uv[1][1], 0.0);
        assert_eq!(uv[2], [0.5, 0.5]);
    }

    #[test]
    fn flat_mesh_is_rejected() {
        assert!(unwrap_points(&[[0.0, 1.0, 1.0], [1.0, 1.0, 1.0]]).is_err());
    }

    #[test]
    fn mirror_pairs_are_reflected_in_u() {
        let basis = MorphableBasis::synthetic(3);
        let uv = cylindrical_unwrap(&basis).unwrap();
        assert_eq!(uv, basis.uv_coords());
        for (i, &j) in basis.mirror_map().iter().enumerate() {
            assert!((uv[i][0] + uv[j][0] - 1.0).abs() < 1e-6);
            assert!((uv[i][1] - uv[j][1]).abs() < 1e-6);
        }
    }
}
