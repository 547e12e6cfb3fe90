//! Analysis-by-synthesis fitting of shape, texture and pose to an image with
//! a landmark term and Gaussian priors, solved by damped Gauss-Newton.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::image::Image;
use crate::model::{self, instantiate_shape, mat_vec, Camera, FitParams, ModelError, MorphableModel};
use crate::raster;

/// Camera entries appended after `p` and `lambda` in the packed vector:
/// yaw, pitch, roll, tx, ty, tz.
pub const POSE_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no visible vertex samples the image")]
    NoVisibleVertices,
    #[error("invalid fit weights: {0}")]
    InvalidWeights(&'static str),
    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(&'static str),
    #[error("yaw {0} rad is outside the pose-bin range")]
    PoseOutOfRange(f64),
    #[error("empty image list")]
    Empty,
    #[error("image {index} is {got:?}, expected {expected:?}")]
    ShapeMismatch { index: usize, expected: (usize, usize), got: (usize, usize) },
}

/// Term weights. `photometric` scales the image term and may be set to 0 to
/// fit landmarks and priors only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitWeights {
    pub alpha_l: f64,
    pub alpha_s: f64,
    pub alpha_t: f64,
    pub photometric: f64,
}

impl Default for FitWeights {
    fn default() -> Self {
        Self { alpha_l: 10.0, alpha_s: 1e-3, alpha_t: 1e-3, photometric: 1.0 }
    }
}

impl FitWeights {
    pub fn validate(&self) -> Result<(), FitError> {
        for (name, w) in [
            ("alpha_l", self.alpha_l),
            ("alpha_s", self.alpha_s),
            ("alpha_t", self.alpha_t),
            ("photometric", self.photometric),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(FitError::InvalidWeights(name));
            }
        }
        Ok(())
    }
}

/// 2D landmark observations paired with model vertex indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Landmarks {
    points: Vec<[f64; 2]>,
    indices: Vec<usize>,
}

impl Landmarks {
    pub const MIN_COUNT: usize = 4;

    pub fn new(points: Vec<[f64; 2]>, indices: Vec<usize>) -> Result<Self, FitError> {
        if points.len() != indices.len() {
            return Err(FitError::InvalidLandmarks("points and indices differ in length"));
        }
        if points.len() < Self::MIN_COUNT {
            return Err(FitError::InvalidLandmarks("need at least 4 landmarks"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FitError::InvalidLandmarks("non-finite coordinate"));
        }
        Ok(Self { points, indices })
    }

    /// Exact projections of the model's landmark vertices.
    pub fn project(model: &MorphableModel, params: &FitParams) -> Result<Self, FitError> {
        let vertices = instantiate_shape(model, &params.p)?;
        let indices = model.landmark_indices().to_vec();
        let pts: Vec<[f64; 3]> = indices.iter().map(|&i| vertices[i]).collect();
        let points = model::project(&pts, &params.camera)?;
        Self::new(points, indices)
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-landmark flag: inside `[0, W-1] x [0, H-1]`.
    pub fn in_bounds(&self, width: usize, height: usize) -> Vec<bool> {
        self.points
            .iter()
            .map(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (width - 1) as f64 && p[1] <= (height - 1) as f64)
            .collect()
    }

    fn check(&self, model: &MorphableModel) -> Result<(), FitError> {
        if self.indices.iter().any(|&i| i >= model.vertex_count()) {
            return Err(FitError::InvalidLandmarks("vertex index out of range"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub params: FitParams,
    /// Energy before the first step, then after every accepted step.
    pub cost_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Energy split into its weighted terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTerms {
    pub photometric: f64,
    pub landmark: f64,
    pub shape_prior: f64,
    pub texture_prior: f64,
    pub visible_vertices: usize,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.photometric + self.landmark + self.shape_prior + self.texture_prior
    }
}

/// Bilinear colors at pixel positions; `None` for points outside the image.
pub fn sample_image(image: &Image, points: &[[f64; 2]]) -> Vec<Option<[f64; 3]>> {
    points.iter().map(|p| image.sample_bilinear(p[0], p[1])).collect()
}

/// Weighted cost of `params`. Fails when the image term is active and no
/// vertex is visible inside the frame.
pub fn energy(
    image: &Image,
    landmarks: &Landmarks,
    model: &MorphableModel,
    params: &FitParams,
    weights: &FitWeights,
) -> Result<f64, FitError> {
    energy_terms(image, landmarks, model, params, weights).map(|t| t.total())
}

pub fn energy_terms(
    image: &Image,
    landmarks: &Landmarks,
    model: &MorphableModel,
    params: &FitParams,
    weights: &FitWeights,
) -> Result<EnergyTerms, FitError> {
    let problem = Problem::new(image, landmarks, model, weights)?.with_camera(params.camera);
    problem.evaluate(&pack(params), None)
}

/// Energy gradient w.r.t. the packed parameter vector with visibility held
/// at its value for `params`.
pub fn energy_gradient(
    image: &Image,
    landmarks: &Landmarks,
    model: &MorphableModel,
    params: &FitParams,
    weights: &FitWeights,
) -> Result<Vec<f64>, FitError> {
    let problem = Problem::new(image, landmarks, model, weights)?.with_camera(params.camera);
    let n = problem.dim();
    let mut normal = Normal::new(n);
    problem.evaluate(&pack(params), Some(&mut normal))?;
    Ok(normal.jtr.iter().map(|g| 2.0 * g).collect())
}

/// Flattens `[p, lambda, yaw, pitch, roll, tx, ty, tz]`.
pub fn pack(params: &FitParams) -> Vec<f64> {
    let c = &params.camera;
    let mut x = Vec::with_capacity(params.p.len() + params.lambda.len() + POSE_DIM);
    x.extend_from_slice(&params.p);
    x.extend_from_slice(&params.lambda);
    x.extend_from_slice(&[c.yaw, c.pitch, c.roll]);
    x.extend_from_slice(&c.translation);
    x
}

/// Inverse of [`pack`]; focal length and principal point come from `base`.
pub fn unpack(x: &[f64], n_s: usize, n_t: usize, base: &Camera) -> FitParams {
    let o = n_s + n_t;
    FitParams {
        p: x[..n_s].to_vec(),
        lambda: x[n_s..o].to_vec(),
        camera: Camera {
            yaw: x[o],
            pitch: x[o + 1],
            roll: x[o + 2],
            translation: [x[o + 3], x[o + 4], x[o + 5]],
            ..*base
        },
    }
}

/// Accumulated normal equations `J^T J` and `J^T r`.
struct Normal {
    n: usize,
    jtj: Vec<f64>,
    jtr: Vec<f64>,
}

impl Normal {
    fn new(n: usize) -> Self {
        Self { n, jtj: vec![0.0; n * n], jtr: vec![0.0; n] }
    }

    /// Adds one residual row given as (column, value) pairs.
    fn add_sparse(&mut self, r: f64, row: &[(usize, f64)]) {
        for &(i, gi) in row {
            self.jtr[i] += gi * r;
            let base = i * self.n;
            for &(j, gj) in row {
                self.jtj[base + j] += gi * gj;
            }
        }
    }
}

struct Problem<'a> {
    image: &'a Image,
    landmarks: &'a Landmarks,
    model: &'a MorphableModel,
    weights: FitWeights,
    base: Camera,
    neighbours: Vec<Vec<u32>>,
}

impl<'a> Problem<'a> {
    fn new(
        image: &'a Image,
        landmarks: &'a Landmarks,
        model: &'a MorphableModel,
        weights: &FitWeights,
    ) -> Result<Self, FitError> {
        weights.validate()?;
        landmarks.check(model)?;
        let neighbours = raster::vertex_neighbours(model.vertex_count(), model.triangles());
        Ok(Self { image, landmarks, model, weights: *weights, base: Camera::default(), neighbours })
    }

    fn with_camera(mut self, camera: Camera) -> Self {
        self.base = camera;
        self
    }

    fn dim(&self) -> usize {
        self.model.shape_dim() + self.model.texture_dim() + POSE_DIM
    }

    /// Energy at `x`; when `normal` is given also accumulates the
    /// Gauss-Newton system of the residuals `r` with `E = |r|^2`.
    fn evaluate(&self, x: &[f64], mut normal: Option<&mut Normal>) -> Result<EnergyTerms, FitError> {
        let model = self.model;
        let (n_s, n_t) = (model.shape_dim(), model.texture_dim());
        let params = unpack(x, n_s, n_t, &self.base);
        params.camera.validate()?;
        if !params.is_finite() {
            return Err(FitError::Model(ModelError::Invalid("non-finite parameters".into())));
        }
        let camera = &params.camera;
        let vertices = instantiate_shape(model, &params.p)?;
        let rot = camera.rotation();
        let drot = camera.rotation_derivatives();
        let cam = raster::to_camera_space(&vertices, camera);
        let pose0 = n_s + n_t;
        let shape_basis = model.shape_basis();
        let tex_basis = model.texture_basis();

        // d(camera-space point of vertex v)/d(x), as (column, 3-vector) pairs.
        let point_jacobian = |v: usize, out: &mut Vec<(usize, [f64; 3])>| {
            out.clear();
            for k in 0..n_s {
                let b = [shape_basis.at(3 * v, k), shape_basis.at(3 * v + 1, k), shape_basis.at(3 * v + 2, k)];
                out.push((k, mat_vec(&rot, b)));
            }
            for (a, d) in drot.iter().enumerate() {
                out.push((pose0 + a, mat_vec(d, vertices[v])));
            }
            for a in 0..3 {
                let mut e = [0.0; 3];
                e[a] = 1.0;
                out.push((pose0 + 3 + a, e));
            }
        };
        let mut dq = Vec::with_capacity(n_s + POSE_DIM);
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(n_s + n_t + POSE_DIM);

        let mut terms =
            EnergyTerms { photometric: 0.0, landmark: 0.0, shape_prior: 0.0, texture_prior: 0.0, visible_vertices: 0 };

        if self.weights.photometric > 0.0 {
            for q in &cam {
                if q[2] >= -model::NEAR_PLANE {
                    return Err(FitError::Model(ModelError::BehindCamera { index: 0, z: q[2] }));
                }
            }
            let (w, h) = self.image.dims();
            let depth = raster::rasterize_camera_space(&cam, model.triangles(), camera, w, h);
            let eps = raster::default_eps(&vertices);
            let visible = raster::visible_camera_space(&cam, model.triangles(), camera, &depth, eps);
            let texture = model::instantiate_texture(model, &params.lambda)?;
            let triangles = model.triangles();
            let sw = libm::sqrt(self.weights.photometric);
            for v in (0..cam.len()).filter(|&v| visible[v]) {
                let px = camera.to_pixel(cam[v]);
                // Taps must land on the vertex's own surface patch, so samples
                // next to silhouettes and occlusion edges are left out.
                let ring = &self.neighbours[v];
                let local = |t: usize| triangles[t].iter().any(|u| ring.binary_search(u).is_ok());
                if !raster::taps_on(&depth, px, local) {
                    continue;
                }
                let Some(s) = self.image.sample_with_gradient(px[0], px[1]) else { continue };
                terms.visible_vertices += 1;
                // Colors are clamped at render time; the clamp is flat outside [0, 1].
                let resid = [0, 1, 2].map(|c| sw * (s.value[c] - texture[v][c].clamp(0.0, 1.0)));
                terms.photometric += resid.iter().map(|r| r * r).sum::<f64>();
                let Some(normal) = normal.as_deref_mut() else { continue };
                let pj = model::pixel_jacobian(camera, cam[v]);
                point_jacobian(v, &mut dq);
                for c in 0..3 {
                    // Chain rule: d I_c / d q = grad I_c . d pixel / d q.
                    let g = [
                        s.d_dx[c] * pj[0][0] + s.d_dy[c] * pj[1][0],
                        s.d_dx[c] * pj[0][1] + s.d_dy[c] * pj[1][1],
                        s.d_dx[c] * pj[0][2] + s.d_dy[c] * pj[1][2],
                    ];
                    row.clear();
                    for &(col, d) in &dq {
                        row.push((col, sw * model::dot3(g, d)));
                    }
                    if (0.0..=1.0).contains(&texture[v][c]) {
                        for k in 0..n_t {
                            row.push((n_s + k, -sw * tex_basis.at(3 * v + c, k)));
                        }
                    }
                    normal.add_sparse(resid[c], &row);
                }
            }
            if terms.visible_vertices == 0 {
                return Err(FitError::NoVisibleVertices);
            }
        }

        if self.weights.alpha_l > 0.0 {
            let sl = libm::sqrt(self.weights.alpha_l);
            for (&v, target) in self.landmarks.indices.iter().zip(&self.landmarks.points) {
                let q = cam[v];
                if q[2] >= -model::NEAR_PLANE {
                    return Err(FitError::Model(ModelError::BehindCamera { index: v, z: q[2] }));
                }
                let px = camera.to_pixel(q);
                let resid = [sl * (px[0] - target[0]), sl * (px[1] - target[1])];
                terms.landmark += resid[0] * resid[0] + resid[1] * resid[1];
                let Some(normal) = normal.as_deref_mut() else { continue };
                let pj = model::pixel_jacobian(camera, q);
                point_jacobian(v, &mut dq);
                for axis in 0..2 {
                    row.clear();
                    for &(col, d) in &dq {
                        row.push((col, sl * model::dot3(pj[axis], d)));
                    }
                    normal.add_sparse(resid[axis], &row);
                }
            }
        }

        let priors = [
            (self.weights.alpha_s, &params.p, model.shape_eigenvalues(), 0usize),
            (self.weights.alpha_t, &params.lambda, model.texture_eigenvalues(), n_s),
        ];
        for (idx, (alpha, coeffs, eig, offset)) in priors.into_iter().enumerate() {
            if alpha <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for (k, (&c, &e)) in coeffs.iter().zip(eig).enumerate() {
                let scale = libm::sqrt(alpha / e);
                let r = scale * c;
                acc += r * r;
                if let Some(normal) = normal.as_deref_mut() {
                    normal.add_sparse(r, &[(offset + k, scale)]);
                }
            }
            if idx == 0 {
                terms.shape_prior = acc;
            } else {
                terms.texture_prior = acc;
            }
        }
        Ok(terms)
    }

    fn total(&self, x: &[f64]) -> f64 {
        match self.evaluate(x, None) {
            Ok(t) => t.total(),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Levenberg-damped Gauss-Newton. Each iteration solves
/// `(J^T J + mu diag(J^T J)) delta = -J^T r` and raises `mu` until the step
/// does not increase the energy; stops when `|dE| / E < tol`.
///
/// When both the image and landmark terms are active the solve is also run
/// from a landmark-and-prior warm start, and the run ending at the lower
/// energy is reported. `cost_history` starts at the full energy of the start
/// point that run used.
pub fn gauss_newton_fit(
    image: &Image,
    landmarks: &Landmarks,
    model: &MorphableModel,
    init: &FitParams,
    weights: &FitWeights,
    max_iter: usize,
    tol: f64,
) -> Result<FitReport, FitError> {
    let problem = Problem::new(image, landmarks, model, weights)?.with_camera(init.camera);
    let x0 = pack(init);
    let e0 = problem.evaluate(&x0, None)?.total();
    let mut best = levenberg(&problem, x0.clone(), e0, max_iter, tol);
    if weights.photometric > 0.0 && weights.alpha_l > 0.0 {
        let stage = FitWeights { photometric: 0.0, alpha_t: 0.0, ..*weights };
        let warm = Problem::new(image, landmarks, model, &stage)?.with_camera(init.camera);
        let start = levenberg(&warm, x0.clone(), warm.total(&x0), max_iter, tol).x;
        let e_start = problem.total(&start);
        if e_start.is_finite() {
            let alt = levenberg(&problem, start, e_start, max_iter, tol);
            if alt.energy() < best.energy() {
                best = alt;
            }
        }
    }
    Ok(FitReport {
        params: unpack(&best.x, model.shape_dim(), model.texture_dim(), &init.camera),
        cost_history: best.history,
        converged: best.converged,
        iterations: best.iterations,
    })
}

struct LevenbergOutcome {
    x: Vec<f64>,
    /// Start energy, then the energy after each accepted step.
    history: Vec<f64>,
    converged: bool,
    iterations: usize,
}

impl LevenbergOutcome {
    fn energy(&self) -> f64 {
        *self.history.last().unwrap_or(&f64::INFINITY)
    }
}

fn levenberg(problem: &Problem<'_>, mut x: Vec<f64>, mut e: f64, max_iter: usize, tol: f64) -> LevenbergOutcome {
    const MAX_ATTEMPTS: usize = 12;
    let n = problem.dim();
    let mut history = vec![e];
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        if e == 0.0 {
            converged = true;
            break;
        }
        let mut normal = Normal::new(n);
        if problem.evaluate(&x, Some(&mut normal)).is_err() {
            break;
        }
        let jtj = DMatrix::from_row_slice(n, n, &normal.jtj);
        let neg_grad = -DVector::from_column_slice(&normal.jtr);
        let diag_max = (0..n).map(|i| jtj[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * a[(i, i)] + 1e-12 * diag_max;
            }
            if let Some(chol) = a.cholesky() {
                let delta = chol.solve(&neg_grad);
                let trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
                let e_new = problem.total(&trial);
                if e_new <= e {
                    accepted = Some((trial, e_new));
                    break;
                }
            }
            mu *= 4.0;
        }
        iterations += 1;
        let Some((trial, e_new)) = accepted else {
            // No descent even under heavy damping: stationary up to round-off
            // counts as converged, anything else is reported as a stall.
            let g = normal.jtr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            converged = g <= 1e-9 * (1.0 + e);
            break;
        };
        let decrease = e - e_new;
        x = trial;
        e = e_new;
        history.push(e);
        mu = (mu / 3.0).max(1e-9);
        if decrease <= tol * e.max(f64::MIN_POSITIVE) || e <= 1e-24 {
            converged = true;
            break;
        }
    }
    LevenbergOutcome { x, history, converged, iterations }
}

/// Pose initialisation from landmarks alone: the mean face is fitted to the
/// landmarks from a 15-degree grid of starting yaws, keeping the best.
pub fn initialize_from_landmarks(
    image: &Image,
    landmarks: &Landmarks,
    model: &MorphableModel,
    weights: &FitWeights,
) -> Result<FitParams, FitError> {
    let (w, h) = image.dims();
    let base = Camera::frontal(w, h);
    let lw = FitWeights { photometric: 0.0, alpha_t: 0.0, ..*weights };
    let mut best: Option<(f64, FitParams)> = None;
    for k in -6i32..=6 {
        let start = FitParams::mean(model, base.with_yaw((15.0 * k as f64).to_radians()));
        let Ok(report) = gauss_newton_fit(image, landmarks, model, &start, &lw, 30, 1e-10) else { continue };
        let cost = *report.cost_history.last().unwrap_or(&f64::INFINITY);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, report.params));
        }
    }
    best.map(|(_, p)| p).ok_or(FitError::NoVisibleVertices)
}

/// Root-mean-square distance between projected landmark vertices and targets.
pub fn landmark_rmse(model: &MorphableModel, params: &FitParams, landmarks: &Landmarks) -> Result<f64, FitError> {
    let vertices = instantiate_shape(model, &params.p)?;
    let pts: Vec<[f64; 3]> = landmarks.indices.iter().map(|&i| vertices[i]).collect();
    let proj = model::project(&pts, &params.camera)?;
    let sum: f64 = proj.iter().zip(&landmarks.points).map(|(a, b)| model::sq(a[0] - b[0]) + model::sq(a[1] - b[1])).sum();
    Ok(libm::sqrt(sum / proj.len() as f64))
}

/// Pose group 1..=13 for bins centred at -90, -75, ..., 90 degrees, each
/// covering `[centre - 7.5, centre + 7.5)`.
pub fn pose_bin(yaw: f64) -> Result<usize, FitError> {
    let deg = yaw.to_degrees();
    if !(-97.5..97.5).contains(&deg) {
        return Err(FitError::PoseOutOfRange(yaw));
    }
    Ok((libm::floor((deg + 97.5) / 15.0) as usize + 1).min(13))
}

/// Per-pixel arithmetic mean of equally sized images.
pub fn mean_face(images: &[Image]) -> Result<Image, FitError> {
    let first = images.first().ok_or(FitError::Empty)?;
    let dims = first.dims();
    let mut acc = vec![0.0; first.data().len()];
    for (index, img) in images.iter().enumerate() {
        if img.dims() != dims {
            return Err(FitError::ShapeMismatch { index, expected: dims, got: img.dims() });
        }
        for (a, v) in acc.iter_mut().zip(img.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / images.len() as f64;
    let data = acc.into_iter().map(|v| v * inv).collect();
    Ok(Image::from_raw(dims.0, dims.1, data).expect("same length"))
}
