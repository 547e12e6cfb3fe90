//! UV-space operations: texture extraction with visibility, masks, generator
//! input construction, central crops and gradient-domain (Poisson) blending.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::image::{Image, UvMap};
use crate::model::{cross3, dot3, instantiate_shape, sub3, FitParams, ModelError, MorphableModel};
use crate::raster;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UvError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("crop ratio {0} outside (0, 1]")]
    BadRatio(f64),
    #[error("blend region touches the image border")]
    RegionTouchesBorder,
    #[error("poisson solver stalled at residual {0}")]
    NotConverged(f64),
}

/// Per-texel visibility, `true` where the texel was observed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    width: usize,
    height: usize,
    visible: Vec<bool>,
}

impl VisibilityMask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, visible: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                visible.push(f(x, y));
            }
        }
        Self { width, height, visible }
    }

    pub fn from_raw(width: usize, height: usize, visible: Vec<bool>) -> Option<Self> {
        (visible.len() == width * height).then_some(Self { width, height, visible })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.visible[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.visible[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn crop(&self, left: usize, top: usize, width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| self.get(left + x, top + y))
    }
}

/// Fraction of texels that are *not* visible.
pub fn mask_fraction(mask: &VisibilityMask) -> f64 {
    let total = mask.visible.len();
    if total == 0 {
        return 0.0;
    }
    (total - mask.visible_count()) as f64 / total as f64
}

/// Samples the image onto the model's UV layout. A texel is kept when its
/// surface point faces the camera, passes the z-buffer test, and all four
/// bilinear taps land on pixels covered by the mesh (so silhouettes never
/// bleed background into the texture). Uncovered or occluded texels are black
/// and masked out.
pub fn extract_uv(
    image: &Image,
    model: &MorphableModel,
    params: &FitParams,
    uv_width: usize,
    uv_height: usize,
) -> Result<(UvMap, VisibilityMask), UvError> {
    let vertices = instantiate_shape(model, &params.p)?;
    let camera = &params.camera;
    let cam = raster::to_camera_space(&vertices, camera);
    let triangles = model.triangles();
    let depth = raster::rasterize_camera_space(&cam, triangles, camera, image.width(), image.height());
    let eps = raster::default_eps(&vertices);
    let mut uv = Image::new(uv_width, uv_height);
    let mut mask = VisibilityMask::new(uv_width, uv_height, false);
    let uvs = model.uv_coords();
    for (ti, tri) in triangles.iter().enumerate() {
        let q = tri.map(|i| cam[i as usize]);
        let normal = cross3(sub3(q[1], q[0]), sub3(q[2], q[0]));
        let corners = tri.map(|i| [uvs[i as usize][0] * uv_width as f64, uvs[i as usize][1] * uv_height as f64]);
        raster::for_each_texel(&corners, uv_width, uv_height, |tx, ty, b| {
            let p = [
                b[0] * q[0][0] + b[1] * q[1][0] + b[2] * q[2][0],
                b[0] * q[0][1] + b[1] * q[1][1] + b[2] * q[2][1],
                b[0] * q[0][2] + b[1] * q[1][2] + b[2] * q[2][2],
            ];
            if dot3(normal, p) >= 0.0 {
                return;
            }
            let owns = |t: usize| t == ti || triangles[t].iter().any(|v| tri.contains(v));
            if !raster::depth_test(p, camera, &cam, triangles, &depth, eps, owns) {
                return;
            }
            let px = camera.to_pixel(p);
            if !raster::taps_covered(&depth, px) {
                return;
            }
            if let Some(color) = image.sample_bilinear(px[0], px[1]) {
                uv.set(tx, ty, color);
                mask.set(tx, ty, true);
            }
        });
    }
    Ok((uv, mask))
}

/// Visibility mask alone (no image needed).
pub fn visibility_mask(
    model: &MorphableModel,
    params: &FitParams,
    image_width: usize,
    image_height: usize,
    uv_width: usize,
    uv_height: usize,
) -> Result<VisibilityMask, UvError> {
    let probe = Image::new(image_width, image_height);
    extract_uv(&probe, model, params, uv_width, uv_height).map(|(_, m)| m)
}

/// Generator input as a `[6, H, W]` channel-major buffer: channels 0-2 are
/// the UV map with masked texels replaced by seeded uniform `[0,1)` noise,
/// channels 3-5 are their horizontal mirror.
pub fn make_generator_input(uv: &UvMap, mask: &VisibilityMask, seed: u64) -> Result<Vec<f64>, UvError> {
    check_dims(uv, mask)?;
    let (w, h) = uv.dims();
    let plane = w * h;
    let mut rng = rng::seeded(seed);
    let mut out = vec![0.0; 6 * plane];
    for y in 0..h {
        for x in 0..w {
            let color = if mask.get(x, y) { uv.get(x, y) } else { core::array::from_fn(|_| rng::unit(&mut rng)) };
            for c in 0..3 {
                out[c * plane + y * w + x] = color[c];
                out[(c + 3) * plane + y * w + (w - 1 - x)] = color[c];
            }
        }
    }
    Ok(out)
}

/// The incomplete UV with masked texels zeroed.
pub fn masked_uv(uv: &UvMap, mask: &VisibilityMask) -> Result<UvMap, UvError> {
    check_dims(uv, mask)?;
    Ok(Image::from_fn(uv.width(), uv.height(), |x, y| if mask.get(x, y) { uv.get(x, y) } else { [0.0; 3] }))
}

/// Replaces masked texels with noise (the first half of the generator input).
pub fn noise_filled(uv: &UvMap, mask: &VisibilityMask, seed: u64) -> Result<UvMap, UvError> {
    let input = make_generator_input(uv, mask, seed)?;
    let (w, h) = uv.dims();
    let plane = w * h;
    Ok(Image::from_fn(w, h, |x, y| core::array::from_fn(|c| input[c * plane + y * w + x])))
}

fn check_dims(uv: &UvMap, mask: &VisibilityMask) -> Result<(), UvError> {
    if uv.dims() != (mask.width, mask.height) {
        return Err(UvError::DimensionMismatch(uv.width(), uv.height(), mask.width, mask.height));
    }
    Ok(())
}

/// Placement of a centred square crop: `(left, top, side)`.
pub fn central_crop_rect(width: usize, height: usize, ratio: f64) -> Result<(usize, usize, usize), UvError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(UvError::BadRatio(ratio));
    }
    let side = (libm::round(ratio * width.min(height) as f64) as usize).max(1);
    Ok(((width - side) / 2, (height - side) / 2, side))
}

/// Axis-centred square crop of side `ratio * min(W, H)`.
pub fn central_crop(uv: &UvMap, ratio: f64) -> Result<UvMap, UvError> {
    let (left, top, side) = central_crop_rect(uv.width(), uv.height(), ratio)?;
    Ok(uv.crop(left, top, side, side))
}

/// Guided interpolation: inside `region` the result has the discrete
/// Laplacian of `source`; outside it equals `target`, which also supplies the
/// Dirichlet boundary. Solved per channel by conjugate gradients.
pub fn poisson_blend(source: &UvMap, target: &UvMap, region: &VisibilityMask) -> Result<UvMap, UvError> {
    if source.dims() != target.dims() {
        return Err(UvError::DimensionMismatch(source.width(), source.height(), target.width(), target.height()));
    }
    check_dims(target, region)?;
    let (w, h) = target.dims();
    let mut index = vec![usize::MAX; w * h];
    let mut cells = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if region.get(x, y) {
                if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                    return Err(UvError::RegionTouchesBorder);
                }
                index[y * w + x] = cells.len();
                cells.push((x, y));
            }
        }
    }
    let mut out = target.clone();
    if cells.is_empty() {
        return Ok(out);
    }
    let n = cells.len();
    let neighbours = |x: usize, y: usize| [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)];
    for c in 0..3 {
        let mut rhs = vec![0.0; n];
        for (k, &(x, y)) in cells.iter().enumerate() {
            let s = source.get(x, y)[c];
            for (nx, ny) in neighbours(x, y) {
                rhs[k] += s - source.get(nx, ny)[c];
                if index[ny * w + nx] == usize::MAX {
                    rhs[k] += target.get(nx, ny)[c];
                }
            }
        }
        let apply = |v: &[f64], out: &mut [f64]| {
            for (k, &(x, y)) in cells.iter().enumerate() {
                let mut acc = 4.0 * v[k];
                for (nx, ny) in neighbours(x, y) {
                    let j = index[ny * w + nx];
                    if j != usize::MAX {
                        acc -= v[j];
                    }
                }
                out[k] = acc;
            }
        };
        let init: Vec<f64> = cells.iter().map(|&(x, y)| target.get(x, y)[c]).collect();
        let solution = conjugate_gradient(apply, &rhs, init, 1e-10)?;
        for (k, &(x, y)) in cells.iter().enumerate() {
            let mut px = out.get(x, y);
            px[c] = solution[k];
            out.set(x, y, px);
        }
    }
    Ok(out)
}

fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    rhs: &[f64],
    mut x: Vec<f64>,
    tol: f64,
) -> Result<Vec<f64>, UvError> {
    let n = rhs.len();
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let mut ap = vec![0.0; n];
    let max_iter = 10 * n + 100;
    for _ in 0..max_iter {
        let worst = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if worst < tol {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    // Recompute the true residual before giving up.
    apply(&x, &mut ax);
    let worst = rhs.iter().zip(&ax).fold(0.0f64, |m, (b, a)| m.max((b - a).abs()));
    if worst < tol {
        Ok(x)
    } else {
        Err(UvError::NotConverged(worst))
    }
}

/// Max-abs residual of the discrete Poisson equation inside `region`.
pub fn poisson_residual(result: &UvMap, source: &UvMap, region: &VisibilityMask) -> f64 {
    let (w, h) = result.dims();
    let mut worst: f64 = 0.0;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !region.get(x, y) {
                continue;
            }
            for c in 0..3 {
                let lap = |img: &Image| {
                    4.0 * img.get(x, y)[c]
                        - img.get(x - 1, y)[c]
                        - img.get(x + 1, y)[c]
                        - img.get(x, y - 1)[c]
                        - img.get(x, y + 1)[c]
                };
                worst = worst.max((lap(result) - lap(source)).abs());
            }
        }
    }
    worst
}
