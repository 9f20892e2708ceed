/// Bilinear taps of one output sample: the four corner indices
/// (top-left, top-right, bottom-left, bottom-right) within an input plane and
/// the fractional offsets along x and y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTaps {
    pub corners: [usize; 4],
    pub fx: f64,
    pub fy: f64,
}

impl BilinearTaps {
    /// Clamp-to-edge taps for continuous coordinates `(x, y)` measured in
    /// texel units with texel centers on integers.
    pub fn clamped(x: f64, y: f64, width: usize, height: usize) -> Self {
        let xc = x.clamp(0.0, (width - 1) as f64);
        let yc = y.clamp(0.0, (height - 1) as f64);
        let x0 = (xc.floor() as usize).min(width - 1);
        let y0 = (yc.floor() as usize).min(height - 1);
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        Self {
            corners: [
                y0 * width + x0,
                y0 * width + x1,
                y1 * width + x0,
                y1 * width + x1,
            ],
            fx: xc - x0 as f64,
            fy: yc - y0 as f64,
        }
    }

    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]
    }

    /// Lerp-of-lerps evaluation; reproduces a constant plane exactly.
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let [a, b, c, d] = self.corners.map(|i| plane[i]);
        let top = a + self.fx * (b - a);
        let bottom = c + self.fx * (d - c);
        top + self.fy * (bottom - top)
    }
}

/// Fixed bilinear resampling from an input plane to output samples, applied
/// independently to each channel. Outputs with no taps are zero.
///
/// The map is linear in the input, so its Jacobian is the tap weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearMap {
    in_plane: usize,
    taps: Vec<Option<BilinearTaps>>,
}

impl BilinearMap {
    pub fn new(in_plane: usize, taps: Vec<Option<BilinearTaps>>) -> Self {
        for t in taps.iter().flatten() {
            assert!(
                t.corners.iter().all(|&i| i < in_plane),
                "bilinear tap out of range"
            );
        }
        Self { in_plane, taps }
    }

    pub fn in_plane(&self) -> usize {
        self.in_plane
    }

    pub fn out_plane(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self) -> &[Option<BilinearTaps>] {
        &self.taps
    }

    /// Maps `C` stacked input planes to `C` stacked output planes.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len() % self.in_plane, 0, "bilinear input length");
        let channels = input.len() / self.in_plane;
        let mut out = Vec::with_capacity(channels * self.taps.len());
        for plane in input.chunks(self.in_plane) {
            out.extend(self.taps.iter().map(|t| t.map_or(0.0, |t| t.sample(plane))));
        }
        out
    }

    /// `input_grad += Mᵀ · output_grad`
    pub fn apply_transpose_into(&self, output_grad: &[f64], input_grad: &mut [f64]) {
        let channels = input_grad.len() / self.in_plane;
        assert_eq!(
            output_grad.len(),
            channels * self.taps.len(),
            "bilinear grad length"
        );
        for (gplane, iplane) in output_grad
            .chunks(self.taps.len())
            .zip(input_grad.chunks_mut(self.in_plane))
        {
            for (g, t) in gplane.iter().zip(&self.taps) {
                let Some(t) = t else { continue };
                for (i, w) in t.corners.iter().zip(t.weights()) {
                    iplane[*i] += w * g;
                }
            }
        }
    }

    /// Weight of input sample `j` in output sample `i` within one plane.
    pub fn coefficient(&self, i: usize, j: usize) -> f64 {
        self.taps[i].map_or(0.0, |t| {
            t.corners
                .iter()
                .zip(t.weights())
                .filter(|(&c, _)| c == j)
                .map(|(_, w)| w)
                .sum()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_plane_is_reproduced_exactly() {
        let plane = vec![0.123456789; 12];
        for (x, y) in [
            (0.3, 0.7),
            (2.999, 1.5),
            (-4.0, 9.0),
            (1.0 / 3.0, 2.0 / 7.0),
        ] {
            let t = BilinearTaps::clamped(x, y, 4, 3);
            assert_eq!(t.sample(&plane), 0.123456789);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let taps = vec![
            Some(BilinearTaps::clamped(0.25, 0.5, 3, 2)),
            None,
            Some(BilinearTaps::clamped(1.75, 0.0, 3, 2)),
        ];
        let m = BilinearMap::new(6, taps);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
        let mx = m.apply(&x);
        let lhs: f64 = mx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut g = vec![0.0; 12];
        m.apply_transpose_into(&y, &mut g);
        let rhs: f64 = x.iter().zip(&g).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(mx[1], 0.0);
        let w = BilinearTaps::clamped(0.25, 0.5, 3, 2).weights();
        assert!((m.coefficient(0, 0) - w[0]).abs() < 1e-15);
    }
}
