//! Linear morphable face model: a mean shape and texture plus identity,
//! expression and texture bases, evaluated per vertex and posed with a
//! weak-perspective camera.
//!
//! Bases are stored as `3V × K` matrices whose row `3·v + d` is coordinate `d`
//! of vertex `v`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};
use crate::uv::unwrap::unwrap_points;

/// Default bound on coefficient magnitudes, in standard-deviation units.
pub const COEFF_CLAMP: f64 = 4.0;

#[derive(Clone, Debug)]
pub struct MorphableBasis {
    mean_shape: DVector<f64>,
    id_basis: DMatrix<f64>,
    exp_basis: DMatrix<f64>,
    mean_texture: DVector<f64>,
    tex_basis: DMatrix<f64>,
    triangles: Vec<[usize; 3]>,
    mirror_map: Vec<usize>,
    uv_coords: Vec<[f64; 2]>,
}

/// Raw parts of a basis, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisParts {
    pub mean_shape: Vec<[f64; 3]>,
    /// Row-major `V × 3 × K_id`.
    pub id_basis: Vec<f64>,
    pub k_id: usize,
    pub exp_basis: Vec<f64>,
    pub k_exp: usize,
    pub mean_texture: Vec<[f64; 3]>,
    pub tex_basis: Vec<f64>,
    pub k_tex: usize,
    pub triangles: Vec<[usize; 3]>,
    pub mirror_map: Vec<usize>,
}

fn flatten3(points: &[[f64; 3]]) -> DVector<f64> {
    DVector::from_iterator(points.len() * 3, points.iter().flatten().copied())
}

fn unflatten3(v: &DVector<f64>) -> Vec<[f64; 3]> {
    v.as_slice().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn basis_matrix(rows: usize, k: usize, data: &[f64], axis: &'static str) -> Result<DMatrix<f64>> {
    if data.len() != rows * k {
        return Err(Error::DimensionMismatch {
            axis,
            expected: rows * k,
            actual: data.len(),
        });
    }
    Ok(DMatrix::from_row_slice(rows, k, data))
}

fn matrix_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
    out
}

impl MorphableBasis {
    /// Validates the parts and computes the cylindrical UV layout.
    pub fn from_parts(parts: BasisParts) -> Result<Self> {
        let v = parts.mean_shape.len();
        if v == 0 {
            return Err(contract("empty mean shape"));
        }
        if parts.mean_texture.len() != v {
            return Err(Error::DimensionMismatch {
                axis: "mean_texture vertices",
                expected: v,
                actual: parts.mean_texture.len(),
            });
        }
        if parts.mirror_map.len() != v {
            return Err(Error::DimensionMismatch {
                axis: "mirror_map length",
                expected: v,
                actual: parts.mirror_map.len(),
            });
        }
        for (i, &j) in parts.mirror_map.iter().enumerate() {
            if j >= v || parts.mirror_map[j] != i {
                return Err(contract(format!(
                    "mirror_map is not an involution at vertex {i}"
                )));
            }
        }
        for (i, p) in parts.mean_shape.iter().enumerate() {
            let q = parts.mean_shape[parts.mirror_map[i]];
            let dev = (p[0] + q[0])
                .abs()
                .max((p[1] - q[1]).abs())
                .max((p[2] - q[2]).abs());
            if dev > 1e-6 {
                return Err(contract(format!(
                    "mean shape not mirror symmetric at vertex {i} (deviation {dev:e})"
                )));
            }
        }
        for t in &parts.triangles {
            if t.iter().any(|&i| i >= v) {
                return Err(contract(format!(
                    "triangle {t:?} references a missing vertex"
                )));
            }
        }
        if !is_connected(v, &parts.triangles) {
            return Err(contract("mesh is not a single connected component"));
        }
        let uv_coords = unwrap_points(&parts.mean_shape)?;
        Ok(Self {
            mean_shape: flatten3(&parts.mean_shape),
            id_basis: basis_matrix(3 * v, parts.k_id, &parts.id_basis, "id_basis")?,
            exp_basis: basis_matrix(3 * v, parts.k_exp, &parts.exp_basis, "exp_basis")?,
            mean_texture: flatten3(&parts.mean_texture),
            tex_basis: basis_matrix(3 * v, parts.k_tex, &parts.tex_basis, "tex_basis")?,
            triangles: parts.triangles,
            mirror_map: parts.mirror_map,
            uv_coords,
        })
    }

    pub fn to_parts(&self) -> BasisParts {
        BasisParts {
            mean_shape: unflatten3(&self.mean_shape),
            id_basis: matrix_row_major(&self.id_basis),
            k_id: self.k_id(),
            exp_basis: matrix_row_major(&self.exp_basis),
            k_exp: self.k_exp(),
            mean_texture: unflatten3(&self.mean_texture),
            tex_basis: matrix_row_major(&self.tex_basis),
            k_tex: self.k_tex(),
            triangles: self.triangles.clone(),
            mirror_map: self.mirror_map.clone(),
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.mirror_map.len()
    }

    pub fn k_id(&self) -> usize {
        self.id_basis.ncols()
    }

    pub fn k_exp(&self) -> usize {
        self.exp_basis.ncols()
    }

    pub fn k_tex(&self) -> usize {
        self.tex_basis.ncols()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn mirror_map(&self) -> &[usize] {
        &self.mirror_map
    }

    pub fn uv_coords(&self) -> &[[f64; 2]] {
        &self.uv_coords
    }

    pub fn mean_shape(&self) -> Vec<[f64; 3]> {
        unflatten3(&self.mean_shape)
    }

    pub fn mean_texture(&self) -> Vec<[f64; 3]> {
        unflatten3(&self.mean_texture)
    }

    /// Column `k` of the identity basis as per-vertex displacements.
    pub fn id_column(&self, k: usize) -> Vec<[f64; 3]> {
        unflatten3(&self.id_basis.column(k).into_owned())
    }

    pub fn exp_column(&self, k: usize) -> Vec<[f64; 3]> {
        unflatten3(&self.exp_basis.column(k).into_owned())
    }

    pub fn tex_column(&self, k: usize) -> Vec<[f64; 3]> {
        unflatten3(&self.tex_basis.column(k).into_owned())
    }

    /// A procedurally generated face-only basis: a symmetric half-ellipsoid
    /// head mesh with a nose ridge and eye sockets, and smooth random
    /// displacement/color fields as basis columns.
    pub fn synthetic(seed: u64) -> Self {
        synthetic_basis(&SyntheticBasisConfig::default(), seed)
    }
}

fn is_connected(v: usize, triangles: &[[usize; 3]]) -> bool {
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut parent: Vec<usize> = (0..v).collect();
    for t in triangles {
        for e in [(t[0], t[1]), (t[1], t[2])] {
            let (a, b) = (find(&mut parent, e.0), find(&mut parent, e.1));
            parent[a] = b;
        }
    }
    let root = find(&mut parent, 0);
    (0..v).all(|i| find(&mut parent, i) == root)
}

/// Weak-perspective camera `[s·r0 tx; s·r1 ty; s·r2 0]` stored as a 3×4
/// matrix. Rows 0 and 1 give image coordinates, row 2 a depth that grows
/// toward the viewer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection(pub [[f64; 4]; 3]);

impl Projection {
    pub fn identity() -> Self {
        Self([[1., 0., 0., 0.], [0., 1., 0., 0.], [0., 0., 1., 0.]])
    }

    /// Camera for a head rotated by yaw (about y), pitch (about x) and roll
    /// (about z), in degrees, mapped to pixel coordinates with the image y
    /// axis pointing down.
    pub fn weak_perspective(
        yaw_deg: f64,
        pitch_deg: f64,
        roll_deg: f64,
        scale: f64,
        tx: f64,
        ty: f64,
    ) -> Self {
        let (sy, cy) = yaw_deg.to_radians().sin_cos();
        let (sp, cp) = pitch_deg.to_radians().sin_cos();
        let (sr, cr) = roll_deg.to_radians().sin_cos();
        let ry = [[cy, 0., sy], [0., 1., 0.], [-sy, 0., cy]];
        let rx = [[1., 0., 0.], [0., cp, -sp], [0., sp, cp]];
        let rz = [[cr, -sr, 0.], [sr, cr, 0.], [0., 0., 1.]];
        let r = mat3_mul(&rz, &mat3_mul(&rx, &ry));
        let row = |i: usize, sign: f64, t: f64| {
            [
                sign * scale * r[i][0],
                sign * scale * r[i][1],
                sign * scale * r[i][2],
                t,
            ]
        };
        Self([row(0, 1.0, tx), row(1, -1.0, ty), row(2, 1.0, 0.0)])
    }

    /// Common scale factor of the two image rows.
    pub fn scale(&self) -> f64 {
        norm3(&self.0[0][..3])
    }

    /// Checks that rows 0 and 1 of the 3×3 block are orthogonal with a common
    /// positive norm.
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = (&self.0[0][..3], &self.0[1][..3]);
        let (n0, n1) = (norm3(r0), norm3(r1));
        let dot: f64 = r0.iter().zip(r1).map(|(a, b)| a * b).sum();
        let tol = 1e-5 * n0.max(1.0);
        if n0 <= 0.0 || (n0 - n1).abs() > tol || dot.abs() > tol * n0.max(1.0) {
            return Err(contract(format!(
                "projection is not weak-perspective (row norms {n0}, {n1}; dot {dot})"
            )));
        }
        Ok(())
    }

    /// The camera that sees the x-mirrored head as the horizontally flipped
    /// image of width `image_width`.
    pub fn mirrored(&self, image_width: f64) -> Self {
        let p = self.0;
        Self([
            [p[0][0], -p[0][1], -p[0][2], image_width - p[0][3]],
            [-p[1][0], p[1][1], p[1][2], p[1][3]],
            [-p[2][0], p[2][1], p[2][2], p[2][3]],
        ])
    }

    pub fn apply(&self, v: &[f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2] + m[i][3])
    }

    pub fn flat(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (i, row) in self.0.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(row);
        }
        out
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::DimensionMismatch {
                axis: "projection entries",
                expected: 12,
                actual: v.len(),
            });
        }
        let mut m = [[0.0; 4]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&v[i * 4..i * 4 + 4]);
        }
        Ok(Self(m))
    }
}

fn norm3(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceCoefficients {
    pub alpha_id: Vec<f64>,
    pub alpha_exp: Vec<f64>,
    pub alpha_tex: Vec<f64>,
    pub projection: Projection,
}

impl FaceCoefficients {
    pub fn zeros(basis: &MorphableBasis) -> Self {
        Self {
            alpha_id: vec![0.0; basis.k_id()],
            alpha_exp: vec![0.0; basis.k_exp()],
            alpha_tex: vec![0.0; basis.k_tex()],
            projection: Projection::identity(),
        }
    }

    /// Checks the magnitude bound and camera validity.
    pub fn validate(&self, clamp: f64) -> Result<()> {
        for (name, v) in [
            ("alpha_id", &self.alpha_id),
            ("alpha_exp", &self.alpha_exp),
            ("alpha_tex", &self.alpha_tex),
        ] {
            if let Some(x) = v.iter().find(|x| !x.is_finite() || x.abs() > clamp) {
                return Err(contract(format!("{name} entry {x} exceeds clamp {clamp}")));
            }
        }
        self.projection.validate()
    }

    pub fn clamped(mut self, clamp: f64) -> Self {
        for v in [&mut self.alpha_id, &mut self.alpha_exp, &mut self.alpha_tex] {
            for x in v.iter_mut() {
                *x = x.clamp(-clamp, clamp);
            }
        }
        self
    }

    fn check_dims(&self, basis: &MorphableBasis) -> Result<()> {
        for (axis, have, want) in [
            ("alpha_id", self.alpha_id.len(), basis.k_id()),
            ("alpha_exp", self.alpha_exp.len(), basis.k_exp()),
            ("alpha_tex", self.alpha_tex.len(), basis.k_tex()),
        ] {
            if have != want {
                return Err(Error::DimensionMismatch {
                    axis,
                    expected: want,
                    actual: have,
                });
            }
        }
        Ok(())
    }
}

/// `S = S̄ + A_id·α_id + A_exp·α_exp`, per vertex.
pub fn evaluate_shape(basis: &MorphableBasis, coeffs: &FaceCoefficients) -> Result<Vec<[f64; 3]>> {
    coeffs.check_dims(basis)?;
    let s = &basis.mean_shape
        + &basis.id_basis * DVector::from_column_slice(&coeffs.alpha_id)
        + &basis.exp_basis * DVector::from_column_slice(&coeffs.alpha_exp);
    Ok(unflatten3(&s))
}

/// `T = T̄ + A_tex·α_tex`, per vertex. Not clamped to `[0, 1]`.
pub fn evaluate_texture(
    basis: &MorphableBasis,
    coeffs: &FaceCoefficients,
) -> Result<Vec<[f64; 3]>> {
    coeffs.check_dims(basis)?;
    let t = &basis.mean_texture + &basis.tex_basis * DVector::from_column_slice(&coeffs.alpha_tex);
    Ok(unflatten3(&t))
}

/// Result of a landmark fit; texture coefficients are zero and the camera
/// is the identity.
#[derive(Clone, Debug)]
pub struct LandmarkFit {
    pub coefficients: FaceCoefficients,
    /// Root-mean-square landmark residual in model units.
    pub residual: f64,
}

/// Ridge-regularized least squares for `α_id, α_exp` against model-space
/// landmark positions at the given vertex indices.
pub fn fit_coefficients(
    landmarks: &[[f64; 3]],
    landmark_indices: &[usize],
    basis: &MorphableBasis,
    regularizer: f64,
) -> Result<LandmarkFit> {
    if landmarks.len() != landmark_indices.len() {
        return Err(Error::DimensionMismatch {
            axis: "landmark count",
            expected: landmark_indices.len(),
            actual: landmarks.len(),
        });
    }
    let (k_id, k_exp) = (basis.k_id(), basis.k_exp());
    let k = k_id + k_exp;
    if landmarks.len() < k {
        return Err(contract(format!(
            "need at least {k} landmarks for {k} coefficients, got {}",
            landmarks.len()
        )));
    }
    if !(regularizer >= 0.0) {
        return Err(contract(format!(
            "regularizer must be nonnegative, got {regularizer}"
        )));
    }
    let v = basis.vertex_count();
    let rows = 3 * landmarks.len();
    let mut a = DMatrix::zeros(rows, k);
    let mut b = DVector::zeros(rows);
    for (l, (&idx, p)) in landmark_indices.iter().zip(landmarks).enumerate() {
        if idx >= v {
            return Err(contract(format!("landmark index {idx} out of range")));
        }
        for d in 0..3 {
            let src = 3 * idx + d;
            let dst = 3 * l + d;
            for j in 0..k_id {
                a[(dst, j)] = basis.id_basis[(src, j)];
            }
            for j in 0..k_exp {
                a[(dst, k_id + j)] = basis.exp_basis[(src, j)];
            }
            b[dst] = p[d] - basis.mean_shape[src];
        }
    }
    let ata = a.transpose() * &a;
    let atb = a.transpose() * &b;
    let solution = if regularizer == 0.0 {
        let svd = ata.clone().svd(true, true);
        let max = svd.singular_values.max();
        let min = svd.singular_values.min();
        if max == 0.0 || min <= max * 1e-12 {
            return Err(Error::SingularSystem(format!(
                "landmark system is rank deficient (singular values {min:e}..{max:e}); use a positive regularizer"
            )));
        }
        svd.solve(&atb, 0.0)
            .map_err(|e| Error::SingularSystem(e.to_string()))?
    } else {
        let system = ata + DMatrix::identity(k, k) * regularizer;
        system
            .cholesky()
            .ok_or_else(|| {
                Error::SingularSystem("regularized normal matrix not positive definite".into())
            })?
            .solve(&atb)
    };
    let residual = (&a * &solution - &b).norm() / (rows as f64).sqrt();
    let mut coefficients = FaceCoefficients::zeros(basis);
    coefficients
        .alpha_id
        .copy_from_slice(&solution.as_slice()[..k_id]);
    coefficients
        .alpha_exp
        .copy_from_slice(&solution.as_slice()[k_id..]);
    Ok(LandmarkFit {
        coefficients,
        residual,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub xy: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
}

/// Applies the camera to every vertex, returning image coordinates and depth.
pub fn project(vertices: &[[f64; 3]], projection: &Projection) -> Projected {
    let (xy, depth) = vertices
        .iter()
        .map(|v| {
            let p = projection.apply(v);
            ([p[0], p[1]], p[2])
        })
        .unzip();
    Projected { xy, depth }
}

/// A face posed in an image: geometry, per-vertex color, camera and UVs.
#[derive(Clone, Debug)]
pub struct FittedFace {
    pub vertices: Vec<[f64; 3]>,
    pub vertex_colors: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub projection: Projection,
    pub uv_coords: Vec<[f64; 2]>,
}

impl FittedFace {
    pub fn from_coefficients(basis: &MorphableBasis, coeffs: &FaceCoefficients) -> Result<Self> {
        coeffs.projection.validate()?;
        Ok(Self {
            vertices: evaluate_shape(basis, coeffs)?,
            vertex_colors: evaluate_texture(basis, coeffs)?,
            triangles: basis.triangles.clone(),
            projection: coeffs.projection,
            uv_coords: basis.uv_coords.clone(),
        })
    }

    /// The bilateral mirror image of this face, as seen in the horizontally
    /// flipped image of width `image_width`.
    pub fn mirrored(&self, mirror_map: &[usize], image_width: f64) -> Self {
        let vertices = mirror_map
            .iter()
            .map(|&m| {
                let v = self.vertices[m];
                [-v[0], v[1], v[2]]
            })
            .collect();
        let vertex_colors = mirror_map.iter().map(|&m| self.vertex_colors[m]).collect();
        Self {
            vertices,
            vertex_colors,
            triangles: self.triangles.clone(),
            projection: self.projection.mirrored(image_width),
            uv_coords: self.uv_coords.clone(),
        }
    }

    pub fn projected(&self) -> Projected {
        project(&self.vertices, &self.projection)
    }
}

/// Shape of the procedural basis.
#[derive(Clone, Debug)]
pub struct SyntheticBasisConfig {
    /// Odd, so that a vertex column lies on the midline.
    pub columns: usize,
    pub rows: usize,
    pub k_id: usize,
    pub k_exp: usize,
    pub k_tex: usize,
    /// Half-extents of the head ellipsoid along x, y and z.
    pub radii: [f64; 3],
    /// Latitude limit of the mesh, radians.
    pub latitude: f64,
}

impl Default for SyntheticBasisConfig {
    fn default() -> Self {
        Self {
            columns: 33,
            rows: 31,
            k_id: 8,
            k_exp: 8,
            k_tex: 8,
            radii: [1.0, 1.3, 0.95],
            latitude: 1.2,
        }
    }
}

/// Grid parameters of vertex `(row, col)`: longitude θ and latitude φ.
fn grid_angles(cfg: &SyntheticBasisConfig, row: usize, col: usize) -> (f64, f64) {
    let theta =
        -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * col as f64 / (cfg.columns - 1) as f64;
    let phi = -cfg.latitude + 2.0 * cfg.latitude * row as f64 / (cfg.rows - 1) as f64;
    (theta, phi)
}

fn gaussian(dt: f64, dp: f64, st: f64, sp: f64) -> f64 {
    (-(dt * dt) / (2.0 * st * st) - (dp * dp) / (2.0 * sp * sp)).exp()
}

/// Builds the procedural basis. Every left-half quantity is computed once
/// and mirrored explicitly, so symmetry holds to the last bit.
pub fn synthetic_basis(cfg: &SyntheticBasisConfig, seed: u64) -> MorphableBasis {
    assert!(cfg.columns % 2 == 1 && cfg.columns >= 3 && cfg.rows >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nc, nr) = (cfg.columns, cfg.rows);
    let mid = nc / 2;
    let v_count = nc * nr;
    let idx = |r: usize, c: usize| r * nc + c;
    let [a, b, c_depth] = cfg.radii;

    let mut mean_shape = vec![[0.0; 3]; v_count];
    let mut angles = vec![(0.0, 0.0); v_count];
    let mut mirror_map = vec![0; v_count];
    for r in 0..nr {
        for c in 0..=mid {
            let (theta, phi) = grid_angles(cfg, r, c);
            let x = if c == mid {
                0.0
            } else {
                a * theta.sin() * phi.cos()
            };
            let y = b * phi.sin();
            let nose = 0.2 * gaussian(theta, phi + 0.1, 0.09, 0.22);
            let sockets = -0.06 * gaussian(theta.abs() - 0.32, phi - 0.28, 0.12, 0.08);
            let z = c_depth * theta.cos() * phi.cos() + nose + sockets;
            let (i, j) = (idx(r, c), idx(r, nc - 1 - c));
            mean_shape[i] = [x, y, z];
            mean_shape[j] = [-x, y, z];
            angles[i] = (theta, phi);
            angles[j] = (-theta, phi);
            mirror_map[i] = j;
            mirror_map[j] = i;
        }
    }

    let mut triangles = Vec::with_capacity(2 * (nc - 1) * (nr - 1));
    for r in 0..nr - 1 {
        for q in 0..nc - 1 {
            let (p00, p01, p10, p11) = (idx(r, q), idx(r, q + 1), idx(r + 1, q), idx(r + 1, q + 1));
            let pair = if q < mid {
                [[p00, p01, p11], [p00, p11, p10]]
            } else {
                [[p00, p01, p10], [p01, p11, p10]]
            };
            for mut t in pair {
                let [p0, p1, p2] = t.map(|i| mean_shape[i]);
                let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
                let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
                let n = [
                    e1[1] * e2[2] - e1[2] * e2[1],
                    e1[2] * e2[0] - e1[0] * e2[2],
                    e1[0] * e2[1] - e1[1] * e2[0],
                ];
                let centroid = [0, 1, 2].map(|d| (p0[d] + p1[d] + p2[d]) / 3.0);
                let outward = [
                    centroid[0] / (a * a),
                    centroid[1] / (b * b),
                    centroid[2] / (c_depth * c_depth),
                ];
                if n[0] * outward[0] + n[1] * outward[1] + n[2] * outward[2] < 0.0 {
                    t.swap(1, 2);
                }
                triangles.push(t);
            }
        }
    }

    // Smooth fields: sums of Gaussian bumps on the (θ, φ) grid.
    let field =
        |rng: &mut ChaCha8Rng, amplitude: f64, parity: f64, negate_x: bool| -> Vec<[f64; 3]> {
            let normal = Normal::new(0.0, 1.0).unwrap();
            let bumps: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
                .map(|_| {
                    let t = rng.random_range(-1.4..1.4);
                    let p = rng.random_range(-1.0..1.0);
                    let s = rng.random_range(0.3..0.7);
                    let d = [0, 1, 2].map(|_| normal.sample(rng) * amplitude);
                    (t, p, s, d)
                })
                .collect();
            let raw = |theta: f64, phi: f64| -> [f64; 3] {
                let mut out = [0.0; 3];
                for (t, p, s, d) in &bumps {
                    let g = gaussian(theta - t, phi - p, *s, *s);
                    for k in 0..3 {
                        out[k] += g * d[k];
                    }
                }
                out
            };
            // reflection acting on field values: x-negation for displacements
            let reflect = |v: [f64; 3]| if negate_x { [-v[0], v[1], v[2]] } else { v };
            let mut out = vec![[0.0; 3]; v_count];
            for r in 0..nr {
                for c in 0..=mid {
                    let (i, j) = (idx(r, c), idx(r, nc - 1 - c));
                    let (theta, phi) = angles[i];
                    let fi = raw(theta, phi);
                    let fj = reflect(raw(-theta, phi));
                    // parity +1: f(mirror v) = R f(v); parity -1: f(mirror v) = -R f(v)
                    let mut val = [0.0; 3];
                    for k in 0..3 {
                        val[k] = 0.5 * (fi[k] + parity * fj[k]);
                    }
                    if c == mid {
                        // fixed points of the mirror must satisfy v = parity·R v
                        let rv = reflect(val);
                        for k in 0..3 {
                            val[k] = 0.5 * (val[k] + parity * rv[k]);
                        }
                    }
                    out[i] = val;
                    let rv = reflect(val);
                    out[j] = [0, 1, 2].map(|k| parity * rv[k]);
                }
            }
            out
        };

    let columns = |rng: &mut ChaCha8Rng,
                   k: usize,
                   amplitude: f64,
                   antisymmetric_every: usize,
                   negate_x: bool| {
        let mut data = vec![0.0; 3 * v_count * k];
        for col in 0..k {
            let parity = if antisymmetric_every > 0
                && col % antisymmetric_every == antisymmetric_every - 1
            {
                -1.0
            } else {
                1.0
            };
            let f = field(rng, amplitude, parity, negate_x);
            for (v, d) in f.iter().enumerate() {
                for (dim, val) in d.iter().enumerate() {
                    data[(3 * v + dim) * k + col] = *val;
                }
            }
        }
        data
    };

    let id_basis = columns(&mut rng, cfg.k_id, 0.06, 0, true);
    let exp_basis = columns(&mut rng, cfg.k_exp, 0.04, 2, true);
    let tex_basis = columns(&mut rng, cfg.k_tex, 0.03, 0, false);

    let skin = [0.80, 0.62, 0.52];
    let mean_texture = angles
        .iter()
        .map(|&(theta, _)| {
            let shade = 0.9 + 0.1 * theta.cos();
            skin.map(|s| s * shade)
        })
        .collect();

    MorphableBasis::from_parts(BasisParts {
        mean_shape,
        id_basis,
        k_id: cfg.k_id,
        exp_basis,
        k_exp: cfg.k_exp,
        mean_texture,
        tex_basis,
        k_tex: cfg.k_tex,
        triangles,
        mirror_map,
    })
    .expect("procedural basis satisfies its invariants")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> MorphableBasis {
        MorphableBasis::synthetic(7)
    }

    fn random_coeffs(basis: &MorphableBasis, seed: u64) -> FaceCoefficients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |k: usize| {
            (0..k)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<f64>>()
        };
        FaceCoefficients {
            alpha_id: draw(basis.k_id()),
            alpha_exp: draw(basis.k_exp()),
            alpha_tex: draw(basis.k_tex()),
            projection: Projection::identity(),
        }
    }

    fn max_diff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn synthetic_basis_has_expected_size_and_invariants() {
        let b = basis();
        assert_eq!(b.vertex_count(), 1023);
        assert_eq!(b.triangles().len(), 1920);
        assert_eq!((b.k_id(), b.k_exp(), b.k_tex()), (8, 8, 8));
        for (i, &j) in b.mirror_map().iter().enumerate() {
            assert_eq!(b.mirror_map()[j], i);
        }
    }

    #[test]
    fn zero_coefficients_give_means() {
        let b = basis();
        let z = FaceCoefficients::zeros(&b);
        assert_eq!(evaluate_shape(&b, &z).unwrap(), b.mean_shape());
        assert_eq!(evaluate_texture(&b, &z).unwrap(), b.mean_texture());
    }

    #[test]
    fn unit_identity_coefficient_adds_first_column() {
        let b = basis();
        let mut c = FaceCoefficients::zeros(&b);
        c.alpha_id[0] = 1.0;
        let s = evaluate_shape(&b, &c).unwrap();
        let want: Vec<[f64; 3]> = b
            .mean_shape()
            .iter()
            .zip(b.id_column(0))
            .map(|(m, d)| [m[0] + d[0], m[1] + d[1], m[2] + d[2]])
            .collect();
        assert!(max_diff(&s, &want) < 1e-15);
    }

    #[test]
    fn shape_superposition_matches_direct_sum() {
        let b = basis();
        let c = random_coeffs(&b, 1);
        let mut only_id = FaceCoefficients::zeros(&b);
        only_id.alpha_id = c.alpha_id.clone();
        let mut only_exp = FaceCoefficients::zeros(&b);
        only_exp.alpha_exp = c.alpha_exp.clone();
        let both = evaluate_shape(&b, &c).unwrap();
        let a = evaluate_shape(&b, &only_id).unwrap();
        let e = evaluate_shape(&b, &only_exp).unwrap();
        let mean = b.mean_shape();
        let summed: Vec<[f64; 3]> = (0..mean.len())
            .map(|v| [0, 1, 2].map(|d| a[v][d] + e[v][d] - mean[v][d]))
            .collect();
        assert!(max_diff(&both, &summed) < 1e-7);
    }

    #[test]
    fn texture_matches_dense_matmul_and_scales_linearly() {
        let b = basis();
        let c = random_coeffs(&b, 2);
        let t = evaluate_texture(&b, &c).unwrap();
        // explicit triple loop oracle
        let mean = b.mean_texture();
        let cols: Vec<Vec<[f64; 3]>> = (0..b.k_tex()).map(|k| b.tex_column(k)).collect();
        let oracle: Vec<[f64; 3]> = (0..mean.len())
            .map(|v| {
                [0, 1, 2].map(|d| {
                    let mut acc = mean[v][d];
                    for (k, col) in cols.iter().enumerate() {
                        acc += col[v][d] * c.alpha_tex[k];
                    }
                    acc
                })
            })
            .collect();
        assert!(max_diff(&t, &oracle) < 1e-7);

        let mut doubled = c.clone();
        doubled.alpha_tex.iter_mut().for_each(|x| *x *= 2.0);
        let t2 = evaluate_texture(&b, &doubled).unwrap();
        for v in 0..mean.len() {
            for d in 0..3 {
                let dev1 = t[v][d] - mean[v][d];
                let dev2 = t2[v][d] - mean[v][d];
                assert!((dev2 - 2.0 * dev1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_names_axis() {
        let b = basis();
        let mut c = FaceCoefficients::zeros(&b);
        c.alpha_exp.pop();
        match evaluate_shape(&b, &c) {
            Err(Error::DimensionMismatch { axis, .. }) => assert_eq!(axis, "alpha_exp"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(evaluate_texture(&b, &c).is_err());
    }

    #[test]
    fn symmetric_identity_keeps_mirror_symmetry() {
        let b = basis();
        let mut c = random_coeffs(&b, 3);
        c.alpha_exp.iter_mut().for_each(|x| *x = 0.0);
        let s = evaluate_shape(&b, &c).unwrap();
        for (i, &j) in b.mirror_map().iter().enumerate() {
            assert!((s[i][0] + s[j][0]).abs() < 1e-5);
            assert!((s[i][1] - s[j][1]).abs() < 1e-5);
            assert!((s[i][2] - s[j][2]).abs() < 1e-5);
        }
    }

    fn landmark_indices(b: &MorphableBasis) -> Vec<usize> {
        (0..b.vertex_count()).step_by(7).collect()
    }

    #[test]
    fn fit_recovers_exact_coefficients() {
        let b = basis();
        let c = random_coeffs(&b, 4);
        let s = evaluate_shape(&b, &c).unwrap();
        let idx = landmark_indices(&b);
        let lm: Vec<[f64; 3]> = idx.iter().map(|&i| s[i]).collect();
        let fit = fit_coefficients(&lm, &idx, &b, 0.0).unwrap();
        for (x, y) in fit.coefficients.alpha_id.iter().zip(&c.alpha_id) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
        for (x, y) in fit.coefficients.alpha_exp.iter().zip(&c.alpha_exp) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn fit_of_mean_landmarks_is_zero() {
        let b = basis();
        let idx = landmark_indices(&b);
        let mean = b.mean_shape();
        let lm: Vec<[f64; 3]> = idx.iter().map(|&i| mean[i]).collect();
        let fit = fit_coefficients(&lm, &idx, &b, 0.0).unwrap();
        assert!(fit
            .coefficients
            .alpha_id
            .iter()
            .chain(&fit.coefficients.alpha_exp)
            .all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn ridge_shrinks_coefficients_monotonically() {
        let b = basis();
        let c = random_coeffs(&b, 5);
        let s = evaluate_shape(&b, &c).unwrap();
        let idx = landmark_indices(&b);
        let lm: Vec<[f64; 3]> = idx.iter().map(|&i| s[i]).collect();
        let mut last = f64::INFINITY;
        for reg in [1e-6, 1e-3, 1e-1, 1.0, 10.0, 1e3, 1e6] {
            let f = fit_coefficients(&lm, &idx, &b, reg).unwrap().coefficients;
            let n = f
                .alpha_id
                .iter()
                .chain(&f.alpha_exp)
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            assert!(n <= last + 1e-12, "norm grew at {reg}");
            last = n;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn rank_deficient_fit_without_ridge_is_singular() {
        let b = basis();
        // all landmarks on one vertex: rank ≤ 3 < 16
        let idx = vec![0; 20];
        let lm = vec![b.mean_shape()[0]; 20];
        assert!(matches!(
            fit_coefficients(&lm, &idx, &b, 0.0),
            Err(Error::SingularSystem(_))
        ));
        assert!(fit_coefficients(&lm, &idx, &b, 0.1).is_ok());
        assert!(matches!(
            fit_coefficients(&lm[..4], &idx[..4], &b, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identity_projection_keeps_xy() {
        let pts = vec![[0.5, -1.0, 2.0], [3.0, 4.0, -5.0]];
        let p = project(&pts, &Projection::identity());
        assert_eq!(p.xy, vec![[0.5, -1.0], [3.0, 4.0]]);
        assert_eq!(p.depth, vec![2.0, -5.0]);
    }

    #[test]
    fn translation_shifts_projections() {
        let pts = basis().mean_shape();
        let base = Projection::weak_perspective(10.0, 5.0, 0.0, 30.0, 0.0, 0.0);
        let mut moved = base;
        moved.0[0][3] = 7.5;
        moved.0[1][3] = -2.25;
        let (p0, p1) = (project(&pts, &base), project(&pts, &moved));
        for (a, b) in p0.xy.iter().zip(&p1.xy) {
            assert!((b[0] - a[0] - 7.5).abs() < 1e-12 && (b[1] - a[1] + 2.25).abs() < 1e-12);
        }
    }

    #[test]
    fn rotating_vertices_equals_rotating_camera() {
        let pts = basis().mean_shape();
        let yaw = 25f64.to_radians();
        let (s, c) = yaw.sin_cos();
        let rotated: Vec<[f64; 3]> = pts
            .iter()
            .map(|v| [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]])
            .collect();
        let frontal = Projection::weak_perspective(0.0, 0.0, 0.0, 40.0, 64.0, 64.0);
        let yawed = Projection::weak_perspective(25.0, 0.0, 0.0, 40.0, 64.0, 64.0);
        let (a, b) = (project(&rotated, &frontal), project(&pts, &yawed));
        for (p, q) in a.xy.iter().zip(&b.xy) {
            assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
        }
        yawed.validate().unwrap();
    }

    #[test]
    fn invalid_projection_is_rejected() {
        let mut p = Projection::identity();
        p.0[1][1] = 2.0;
        assert!(p.validate().is_err());
        let mut q = Projection::identity();
        q.0[1][0] = 0.3;
        assert!(q.validate().is_err());
    }

    #[test]
    fn coefficient_clamp() {
        let b = basis();
        let mut c = FaceCoefficients::zeros(&b);
        c.alpha_id[2] = 5.0;
        assert!(c.validate(COEFF_CLAMP).is_err());
        let c = c.clamped(COEFF_CLAMP);
        assert_eq!(c.alpha_id[2], 4.0);
        c.validate(COEFF_CLAMP).unwrap();
    }
}
