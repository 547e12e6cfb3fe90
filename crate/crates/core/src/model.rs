//! Linear statistical face model: shape and texture as mean plus
//! basis-weighted offsets, a perspective pinhole camera, and a procedural
//! generator for synthetic models and identities.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::image::{Image, UvMap};
use crate::rng::{self, SeededRng};

/// Vertices closer to the camera plane than this are rejected by [`project`].
pub const NEAR_PLANE: f64 = 1e-9;
/// Default render/fit image side in pixels.
pub const DEFAULT_IMAGE_SIZE: usize = 128;
/// Distance of the face centre from the camera in the default pose.
pub const DEFAULT_DISTANCE: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vertex {index} lies at or behind the camera plane (z = {z})")]
    BehindCamera { index: usize, z: f64 },
    #[error("invalid model size: {0}")]
    InvalidSize(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Dense column-major `rows x cols` matrix holding a model basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Basis {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Basis {
    pub fn from_columns(rows: usize, columns: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let cols = columns.len();
        let mut data = Vec::with_capacity(rows * cols);
        for c in columns {
            if c.len() != rows {
                return Err(ModelError::DimensionMismatch { expected: rows, got: c.len() });
            }
            data.extend(c);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_column_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn column_major(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    /// `offset + B * coeffs`.
    pub fn apply(&self, offset: &[f64], coeffs: &[f64]) -> Vec<f64> {
        let mut out = offset.to_vec();
        for (j, &a) in coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.column(j)) {
                *o += a * b;
            }
        }
        out
    }

    /// `max |B^T B - I|` over all entries.
    pub fn orthonormality_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.cols {
            for j in i..self.cols {
                let dot: f64 = self.column(i).iter().zip(self.column(j)).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Raw model contents before validation (used by loaders and generators).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParts {
    pub mean_shape: Vec<f64>,
    pub shape_basis: Basis,
    pub shape_eigenvalues: Vec<f64>,
    pub mean_texture: Vec<f64>,
    pub texture_basis: Basis,
    pub texture_eigenvalues: Vec<f64>,
    pub triangles: Vec<[u32; 3]>,
    pub uv_coords: Vec<[f64; 2]>,
    pub landmark_indices: Vec<usize>,
    pub seed: u64,
}

/// Statistical face model. Immutable once built; all invariants are checked
/// by [`MorphableModel::from_parts`].
#[derive(Clone, Debug, PartialEq)]
pub struct MorphableModel {
    parts: ModelParts,
}

impl MorphableModel {
    pub fn from_parts(parts: ModelParts) -> Result<Self, ModelError> {
        let n3 = parts.mean_shape.len();
        if n3 == 0 || n3 % 3 != 0 {
            return Err(ModelError::Invalid("mean shape length must be a positive multiple of 3".into()));
        }
        let n = n3 / 3;
        check_len(parts.mean_texture.len(), n3)?;
        check_len(parts.shape_basis.rows(), n3)?;
        check_len(parts.texture_basis.rows(), n3)?;
        check_len(parts.shape_eigenvalues.len(), parts.shape_basis.cols())?;
        check_len(parts.texture_eigenvalues.len(), parts.texture_basis.cols())?;
        check_len(parts.uv_coords.len(), n)?;
        for (name, ev) in [("shape", &parts.shape_eigenvalues), ("texture", &parts.texture_eigenvalues)] {
            if ev.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
                return Err(ModelError::Invalid(alloc::format!("{name} eigenvalues must be positive")));
            }
            if ev.windows(2).any(|w| w[1] > w[0]) {
                return Err(ModelError::Invalid(alloc::format!("{name} eigenvalues must be non-increasing")));
            }
        }
        for (name, basis) in [("shape", &parts.shape_basis), ("texture", &parts.texture_basis)] {
            if basis.orthonormality_residual() >= 1e-8 {
                return Err(ModelError::Invalid(alloc::format!("{name} basis is not orthonormal")));
            }
        }
        if parts.triangles.iter().flatten().any(|&i| i as usize >= n) {
            return Err(ModelError::Invalid("triangle index out of range".into()));
        }
        if parts.uv_coords.iter().flatten().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(ModelError::Invalid("uv coordinate outside [0,1]".into()));
        }
        if parts.landmark_indices.iter().any(|&i| i >= n) {
            return Err(ModelError::Invalid("landmark index out of range".into()));
        }
        if parts.mean_shape.iter().chain(&parts.mean_texture).any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid("non-finite mean".into()));
        }
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &ModelParts {
        &self.parts
    }

    pub fn seed(&self) -> u64 {
        self.parts.seed
    }

    pub fn vertex_count(&self) -> usize {
        self.parts.mean_shape.len() / 3
    }

    pub fn shape_dim(&self) -> usize {
        self.parts.shape_basis.cols()
    }

    pub fn texture_dim(&self) -> usize {
        self.parts.texture_basis.cols()
    }

    pub fn mean_shape(&self) -> &[f64] {
        &self.parts.mean_shape
    }

    pub fn mean_texture(&self) -> &[f64] {
        &self.parts.mean_texture
    }

    pub fn shape_basis(&self) -> &Basis {
        &self.parts.shape_basis
    }

    pub fn texture_basis(&self) -> &Basis {
        &self.parts.texture_basis
    }

    pub fn shape_eigenvalues(&self) -> &[f64] {
        &self.parts.shape_eigenvalues
    }

    pub fn texture_eigenvalues(&self) -> &[f64] {
        &self.parts.texture_eigenvalues
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.parts.triangles
    }

    pub fn uv_coords(&self) -> &[[f64; 2]] {
        &self.parts.uv_coords
    }

    pub fn landmark_indices(&self) -> &[usize] {
        &self.parts.landmark_indices
    }

    /// Diagonal length of the mean shape's bounding box.
    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal(&to_points(&self.parts.mean_shape))
    }
}

fn check_len(got: usize, expected: usize) -> Result<(), ModelError> {
    if got == expected {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch { expected, got })
    }
}

pub(crate) fn to_points(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn bbox_diagonal(points: &[[f64; 3]]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    libm::sqrt((0..3).map(|k| (hi[k] - lo[k]) * (hi[k] - lo[k])).sum())
}

/// `mean_shape + U_s p` as an `N x 3` vertex list.
pub fn instantiate_shape(model: &MorphableModel, p: &[f64]) -> Result<Vec<[f64; 3]>, ModelError> {
    check_len(p.len(), model.shape_dim())?;
    Ok(to_points(&model.shape_basis().apply(model.mean_shape(), p)))
}

/// `mean_texture + U_t lambda` as per-vertex RGB. Not clamped.
pub fn instantiate_texture(model: &MorphableModel, lambda: &[f64]) -> Result<Vec<[f64; 3]>, ModelError> {
    check_len(lambda.len(), model.texture_dim())?;
    Ok(to_points(&model.texture_basis().apply(model.mean_texture(), lambda)))
}

/// Perspective pinhole camera. Rotation is intrinsic yaw (about the vertical
/// axis), then pitch (about x), then roll (about the optical axis); the camera
/// looks down -Z. Image `v` grows with model `Y`, so the synthetic face keeps
/// its forehead at negative `Y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub translation: [f64; 3],
    pub focal: f64,
    pub principal_point: [f64; 2],
}

pub type Mat3 = [[f64; 3]; 3];

impl Camera {
    /// Frontal pose centred in a `width x height` image.
    pub fn frontal(width: usize, height: usize) -> Self {
        Self {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            translation: [0.0, 0.0, -DEFAULT_DISTANCE],
            focal: 1.5 * width.min(height) as f64,
            principal_point: [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
        }
    }

    pub fn with_yaw(mut self, yaw: f64) -> Self {
        self.yaw = yaw;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(ModelError::InvalidCamera("focal must be positive".into()));
        }
        let pi = core::f64::consts::PI;
        for (name, a) in [("yaw", self.yaw), ("pitch", self.pitch), ("roll", self.roll)] {
            if !(a.abs() <= pi) {
                return Err(ModelError::InvalidCamera(alloc::format!("|{name}| must be <= pi")));
            }
        }
        if self.translation.iter().chain(&self.principal_point).any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidCamera("non-finite translation or principal point".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3 {
        let [ry, rx, rz] = self.factors();
        mat_mul(&rz, &mat_mul(&rx, &ry))
    }

    /// Derivatives of the rotation matrix w.r.t. yaw, pitch and roll.
    pub fn rotation_derivatives(&self) -> [Mat3; 3] {
        let [ry, rx, rz] = self.factors();
        let (sy, cy) = sincos(self.yaw);
        let (sp, cp) = sincos(self.pitch);
        let (sr, cr) = sincos(self.roll);
        let dry = [[-sy, 0.0, -cy], [0.0, 0.0, 0.0], [cy, 0.0, -sy]];
        let drx = [[0.0, 0.0, 0.0], [0.0, -sp, -cp], [0.0, cp, -sp]];
        let drz = [[-sr, -cr, 0.0], [cr, -sr, 0.0], [0.0, 0.0, 0.0]];
        [
            mat_mul(&rz, &mat_mul(&rx, &dry)),
            mat_mul(&rz, &mat_mul(&drx, &ry)),
            mat_mul(&drz, &mat_mul(&rx, &ry)),
        ]
    }

    fn factors(&self) -> [Mat3; 3] {
        let (sy, cy) = sincos(self.yaw);
        let (sp, cp) = sincos(self.pitch);
        let (sr, cr) = sincos(self.roll);
        // Positive yaw swings the face's -x side away from the camera.
        let ry = [[cy, 0.0, -sy], [0.0, 1.0, 0.0], [sy, 0.0, cy]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        [ry, rx, rz]
    }

    /// Model point to camera space.
    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        add3(mat_vec(&r, p), self.translation)
    }

    /// Camera-space point to pixel coordinates. No near-plane check.
    #[inline]
    pub fn to_pixel(&self, q: [f64; 3]) -> [f64; 2] {
        let w = -q[2];
        [
            self.principal_point[0] + self.focal * q[0] / w,
            self.principal_point[1] + self.focal * q[1] / w,
        ]
    }

    /// Unit-free ray direction through a pixel, in camera space.
    pub fn pixel_ray(&self, x: f64, y: f64) -> [f64; 3] {
        [(x - self.principal_point[0]) / self.focal, (y - self.principal_point[1]) / self.focal, -1.0]
    }
}

impl Default for Camera {
    fn default() -> Self {
        Self::frontal(DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE)
    }
}

/// Shape coefficients `p`, texture coefficients `lambda` and camera `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct FitParams {
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub camera: Camera,
}

impl FitParams {
    /// Mean face in the given camera.
    pub fn mean(model: &MorphableModel, camera: Camera) -> Self {
        Self { p: vec![0.0; model.shape_dim()], lambda: vec![0.0; model.texture_dim()], camera }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(&self.lambda).all(|v| v.is_finite())
            && self.camera.translation.iter().all(|v| v.is_finite())
            && [self.camera.yaw, self.camera.pitch, self.camera.roll].iter().all(|v| v.is_finite())
    }
}

/// Projects model-space vertices through the camera.
pub fn project(vertices: &[[f64; 3]], camera: &Camera) -> Result<Vec<[f64; 2]>, ModelError> {
    let r = camera.rotation();
    vertices
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            let q = add3(mat_vec(&r, v), camera.translation);
            if q[2] >= -NEAR_PLANE {
                return Err(ModelError::BehindCamera { index, z: q[2] });
            }
            Ok(camera.to_pixel(q))
        })
        .collect()
}

/// Jacobian of `to_pixel` w.r.t. the camera-space point (2 x 3, row-major).
#[inline]
pub fn pixel_jacobian(camera: &Camera, q: [f64; 3]) -> [[f64; 3]; 2] {
    let w = -q[2];
    let f = camera.focal;
    [[f / w, 0.0, f * q[0] / (w * w)], [0.0, f / w, f * q[1] / (w * w)]]
}

/// Shape parameters `p_i ~ N(0, sigma_i^2)` and texture coefficients likewise,
/// in the default frontal camera.
pub fn sample_identity(model: &MorphableModel, seed: u64) -> FitParams {
    let mut rng = rng::seeded(seed);
    let p = model.shape_eigenvalues().iter().map(|&e| libm::sqrt(e) * rng::standard_normal(&mut rng)).collect();
    let lambda = model.texture_eigenvalues().iter().map(|&e| libm::sqrt(e) * rng::standard_normal(&mut rng)).collect();
    FitParams { p, lambda, camera: Camera::default() }
}

/// Rasterizes per-vertex colors into UV space by barycentric interpolation
/// over each UV triangle. Texels not covered by any triangle stay black.
pub fn bake_texture(model: &MorphableModel, colors: &[[f64; 3]], width: usize, height: usize) -> UvMap {
    let mut uv = Image::new(width, height);
    let uvs = model.uv_coords();
    for tri in model.triangles() {
        let idx = tri.map(|i| i as usize);
        let pts = idx.map(|i| [uvs[i][0] * width as f64, uvs[i][1] * height as f64]);
        crate::raster::for_each_texel(&pts, width, height, |tx, ty, b| {
            let mut c = [0.0; 3];
            for k in 0..3 {
                for ch in 0..3 {
                    c[ch] += b[k] * colors[idx[k]][ch];
                }
            }
            uv.set(tx, ty, c.map(|v| v.clamp(0.0, 1.0)));
        });
    }
    uv
}

/// Signed volume enclosed by the triangles relative to the origin.
pub fn signed_volume(vertices: &[[f64; 3]], triangles: &[[u32; 3]]) -> f64 {
    triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| vertices[i as usize]);
            dot3(a, cross3(b, c)) / 6.0
        })
        .sum()
}

/// Grid layout used by [`make_synthetic_model`]: `rows x cols` vertices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
}

impl GridLayout {
    /// Largest near-square grid with an odd column count (so the face midline
    /// is a vertex column) and at most `n_vertices` vertices.
    pub fn for_vertex_count(n_vertices: usize) -> Result<Self, ModelError> {
        let mut cols = libm::round(libm::sqrt(n_vertices as f64 * 1.25)) as usize;
        if cols % 2 == 0 {
            cols += 1;
        }
        let rows = if cols == 0 { 0 } else { n_vertices / cols };
        if cols < 5 || rows < 5 {
            return Err(ModelError::InvalidSize(alloc::format!("{n_vertices} vertices is too few for a face mesh")));
        }
        Ok(Self { rows, cols })
    }
}

const HALF_WIDTH: f64 = 1.0;
const HALF_HEIGHT: f64 = 1.35;
const HALF_DEPTH: f64 = 0.9;
const MAX_LATITUDE: f64 = 1.2;

/// Landmark targets in (longitude, latitude) radians: eye corners, brows,
/// nose tip, mouth corners, chin and jaw.
const LANDMARK_TARGETS: [(f64, f64); 13] = [
    (-0.6, 0.28),
    (-0.2, 0.28),
    (0.2, 0.28),
    (0.6, 0.28),
    (-0.4, 0.5),
    (0.4, 0.5),
    (0.0, -0.08),
    (-0.3, -0.42),
    (0.3, -0.42),
    (0.0, -0.85),
    (-0.95, -0.5),
    (0.95, -0.5),
    (0.0, 0.75),
];

fn gaussian(t: f64, center: f64, width: f64) -> f64 {
    let d = (t - center) / width;
    libm::exp(-0.5 * d * d)
}

fn face_relief(theta: f64, phi: f64) -> f64 {
    let nose = 0.38 * gaussian(theta, 0.0, 0.13) * gaussian(phi, -0.02, 0.22);
    let eyes = -0.09 * (gaussian(theta, -0.4, 0.16) + gaussian(theta, 0.4, 0.16)) * gaussian(phi, 0.28, 0.1);
    let brow = 0.07 * gaussian(theta, 0.0, 0.55) * gaussian(phi, 0.47, 0.08);
    let lips = 0.06 * gaussian(theta, 0.0, 0.25) * gaussian(phi, -0.42, 0.08);
    let chin = 0.08 * gaussian(theta, 0.0, 0.3) * gaussian(phi, -0.85, 0.12);
    nose + eyes + brow + lips + chin
}

fn face_albedo(theta: f64, phi: f64) -> [f64; 3] {
    let mut c = [0.78, 0.58, 0.47];
    let shade = 0.9 + 0.1 * libm::cos(theta);
    let eye = (gaussian(theta, -0.4, 0.12) + gaussian(theta, 0.4, 0.12)) * gaussian(phi, 0.28, 0.07);
    let brow = (gaussian(theta, -0.4, 0.2) + gaussian(theta, 0.4, 0.2)) * gaussian(phi, 0.46, 0.05);
    let lips = gaussian(theta, 0.0, 0.22) * gaussian(phi, -0.42, 0.06);
    let hair = 1.0 / (1.0 + libm::exp(-(phi - 0.95) / 0.05));
    let eye_color = [0.15, 0.12, 0.1];
    let brow_color = [0.3, 0.2, 0.15];
    let lip_color = [0.72, 0.3, 0.3];
    let hair_color = [0.25, 0.18, 0.12];
    for k in 0..3 {
        c[k] *= shade;
        c[k] += 0.8 * eye * (eye_color[k] - c[k]);
        c[k] += 0.7 * brow * (brow_color[k] - c[k]);
        c[k] += 0.8 * lips * (lip_color[k] - c[k]);
        c[k] += hair * (hair_color[k] - c[k]);
    }
    c
}

/// Deterministic synthetic morphable model: a half-ellipsoid face with nose,
/// eye, brow, lip and chin relief, mostly-symmetric smooth random bases
/// (orthonormalized by two-pass modified Gram-Schmidt), geometrically decaying
/// eigenvalues and an ear-to-ear cylindrical UV unwrap.
///
/// The mesh is a `rows x cols` latitude/longitude grid chosen by
/// [`GridLayout::for_vertex_count`], so the vertex count is at most
/// `n_vertices`.
pub fn make_synthetic_model(seed: u64, n_vertices: usize, n_s: usize, n_t: usize) -> Result<MorphableModel, ModelError> {
    let layout = GridLayout::for_vertex_count(n_vertices)?;
    make_synthetic_model_with_layout(seed, layout, n_s, n_t)
}

pub fn make_synthetic_model_with_layout(
    seed: u64,
    layout: GridLayout,
    n_s: usize,
    n_t: usize,
) -> Result<MorphableModel, ModelError> {
    let GridLayout { rows, cols } = layout;
    if rows < 5 || cols < 5 || cols % 2 == 0 {
        return Err(ModelError::InvalidSize("grid needs >= 5 rows and an odd column count >= 5".into()));
    }
    let n = rows * cols;
    if n_s == 0 || n_t == 0 {
        return Err(ModelError::InvalidSize("need at least one shape and one texture component".into()));
    }
    if n_s > n || n_t > n {
        return Err(ModelError::InvalidSize("more components than vertices".into()));
    }
    let pi = core::f64::consts::PI;
    let angles: Vec<(f64, f64)> = (0..n)
        .map(|v| {
            let (i, j) = (v % cols, v / cols);
            let theta = -pi / 2.0 + pi * i as f64 / (cols - 1) as f64;
            let phi = MAX_LATITUDE - 2.0 * MAX_LATITUDE * j as f64 / (rows - 1) as f64;
            (theta, phi)
        })
        .collect();
    let mirror: Vec<usize> = (0..n).map(|v| (v / cols) * cols + (cols - 1 - v % cols)).collect();

    let mut mean_shape = Vec::with_capacity(3 * n);
    let mut mean_texture = Vec::with_capacity(3 * n);
    for &(theta, phi) in &angles {
        let (st, ct) = sincos(theta);
        let (sp, cp) = sincos(phi);
        let base = [HALF_WIDTH * cp * st, -HALF_HEIGHT * sp, HALF_DEPTH * cp * ct];
        let normal = normalize3([base[0] / (HALF_WIDTH * HALF_WIDTH), base[1] / (HALF_HEIGHT * HALF_HEIGHT), base[2] / (HALF_DEPTH * HALF_DEPTH)]);
        let h = face_relief(theta, phi);
        mean_shape.extend((0..3).map(|k| base[k] + h * normal[k]));
        mean_texture.extend(face_albedo(theta, phi));
    }

    let mut rng = rng::seeded(seed);
    let shape_fields: Vec<Vec<f64>> = (0..n_s)
        .map(|k| smooth_field(&mut rng, &angles, &mirror, 1.0 + 0.15 * k as f64, 0.25, true))
        .collect();
    let texture_fields: Vec<Vec<f64>> = (0..n_t)
        .map(|k| smooth_field(&mut rng, &angles, &mirror, 1.5 + 0.25 * k as f64, 0.3, false))
        .collect();
    let shape_basis = Basis::from_columns(3 * n, orthonormalize(shape_fields)?)?;
    let texture_basis = Basis::from_columns(3 * n, orthonormalize(texture_fields)?)?;
    let dims = (3 * n) as f64;
    let shape_eigenvalues = (0..n_s).map(|k| dims * 0.04 * 0.04 * libm::pow(0.75, k as f64)).collect();
    let texture_eigenvalues = (0..n_t).map(|k| dims * 0.06 * 0.06 * libm::pow(0.85, k as f64)).collect();

    let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    let half = (cols - 1) / 2;
    for j in 0..rows - 1 {
        for i in 0..cols - 1 {
            let v00 = (j * cols + i) as u32;
            let v10 = v00 + 1;
            let v01 = v00 + cols as u32;
            let v11 = v01 + 1;
            // Diagonals mirror across the midline so the mesh is symmetric.
            if i < half {
                triangles.push([v00, v10, v01]);
                triangles.push([v10, v11, v01]);
            } else {
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
    }
    let uv_coords = (0..n).map(|v| [(v % cols) as f64 / (cols - 1) as f64, (v / cols) as f64 / (rows - 1) as f64]).collect();
    let mut landmark_indices: Vec<usize> = Vec::new();
    for &(t, p) in &LANDMARK_TARGETS {
        let best = (0..n)
            .min_by(|&a, &b| {
                let da = sq(angles[a].0 - t) + sq(angles[a].1 - p);
                let db = sq(angles[b].0 - t) + sq(angles[b].1 - p);
                da.partial_cmp(&db).unwrap_or(core::cmp::Ordering::Equal)
            })
            .unwrap_or(0);
        if !landmark_indices.contains(&best) {
            landmark_indices.push(best);
        }
    }
    MorphableModel::from_parts(ModelParts {
        mean_shape,
        shape_basis,
        shape_eigenvalues,
        mean_texture,
        texture_basis,
        texture_eigenvalues,
        triangles,
        uv_coords,
        landmark_indices,
        seed,
    })
}

/// Low-frequency random field over the grid, split into a mirror-symmetric
/// part plus an attenuated antisymmetric part. For geometry the x component
/// flips sign under mirroring.
fn smooth_field(
    rng: &mut SeededRng,
    angles: &[(f64, f64)],
    mirror: &[usize],
    max_freq: f64,
    asymmetry: f64,
    geometric: bool,
) -> Vec<f64> {
    const TERMS: usize = 6;
    let waves: Vec<[f64; 7]> = (0..TERMS)
        .map(|_| {
            [
                rng::uniform(rng, 0.3, max_freq),
                rng::uniform(rng, 0.3, max_freq),
                rng::uniform(rng, 0.0, core::f64::consts::TAU),
                rng::uniform(rng, 0.0, core::f64::consts::TAU),
                rng::standard_normal(rng),
                rng::standard_normal(rng),
                rng::standard_normal(rng),
            ]
        })
        .collect();
    let raw: Vec<[f64; 3]> = angles
        .iter()
        .map(|&(theta, phi)| {
            let mut v = [0.0; 3];
            for w in &waves {
                let s = libm::cos(w[0] * theta + w[2]) * libm::cos(w[1] * phi + w[3]);
                for k in 0..3 {
                    v[k] += w[4 + k] * s;
                }
            }
            v
        })
        .collect();
    let flip = if geometric { [-1.0, 1.0, 1.0] } else { [1.0, 1.0, 1.0] };
    let mut out = Vec::with_capacity(3 * angles.len());
    for (v, &m) in mirror.iter().enumerate() {
        let a = raw[v];
        let b = raw[m];
        for k in 0..3 {
            let sym = 0.5 * (a[k] + flip[k] * b[k]);
            let anti = 0.5 * (a[k] - flip[k] * b[k]);
            out.push(sym + asymmetry * anti);
        }
    }
    out
}

fn orthonormalize(mut columns: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, ModelError> {
    for k in 0..columns.len() {
        for _pass in 0..2 {
            for j in 0..k {
                let (done, rest) = columns.split_at_mut(k);
                let d: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
                for (a, b) in rest[0].iter_mut().zip(&done[j]) {
                    *a -= d * b;
                }
            }
        }
        let norm = libm::sqrt(columns[k].iter().map(|a| a * a).sum());
        if !(norm > 1e-10) {
            return Err(ModelError::Invalid("degenerate basis field".into()));
        }
        for a in &mut columns[k] {
            *a /= norm;
        }
    }
    Ok(columns)
}

#[inline]
pub(crate) fn sq(x: f64) -> f64 {
    x * x
}

#[inline]
pub(crate) fn sincos(a: f64) -> (f64, f64) {
    (libm::sin(a), libm::cos(a))
}

#[inline]
pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[inline]
pub(crate) fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

#[inline]
pub(crate) fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = libm::sqrt(dot3(a, a));
    if n > 0.0 {
        [a[0] / n, a[1] / n, a[2] / n]
    } else {
        a
    }
}
