//! Software rasterization: z-buffered depth with triangle ids, per-vertex
//! visibility, and textured rendering through a per-pixel UV lookup table.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::{Image, UvMap};
use crate::model::{self, cross3, dot3, instantiate_shape, sub3, Camera, FitParams, ModelError, MorphableModel, NEAR_PLANE};

pub const NO_TRIANGLE: u32 = u32::MAX;

/// Scan-converts a 2D triangle. Sample points are `(x + offset, y + offset)`
/// for integer `x in 0..width`, `y in 0..height`. Samples exactly on an edge
/// are owned by exactly one of the two triangles sharing it (top-left rule).
/// The callback receives affine barycentric weights of the three corners.
/// Returns `false` (and emits nothing) for zero-area triangles.
pub fn scan_triangle(
    pts: &[[f64; 2]; 3],
    width: usize,
    height: usize,
    offset: f64,
    mut f: impl FnMut(usize, usize, [f64; 3]),
) -> bool {
    let [a, b, c] = *pts;
    let area = edge(a, b, c);
    if !(area.abs() > 1e-12) || !area.is_finite() {
        return false;
    }
    let s = if area > 0.0 { 1.0 } else { -1.0 };
    let inv = 1.0 / (s * area);
    // Edge opposite corner k, in effective positive orientation.
    let edges = [(b, c), (c, a), (a, b)];
    let top_left = edges.map(|(p, q)| {
        let dx = s * (q[0] - p[0]);
        let dy = s * (q[1] - p[1]);
        dy < 0.0 || (dy == 0.0 && dx > 0.0)
    });
    let min_x = a[0].min(b[0]).min(c[0]) - offset;
    let max_x = a[0].max(b[0]).max(c[0]) - offset;
    let min_y = a[1].min(b[1]).min(c[1]) - offset;
    let max_y = a[1].max(b[1]).max(c[1]) - offset;
    if max_x < 0.0 || max_y < 0.0 || min_x > (width as f64 - 1.0) || min_y > (height as f64 - 1.0) {
        return true;
    }
    let x0 = libm::ceil(min_x).max(0.0) as usize;
    let y0 = libm::ceil(min_y).max(0.0) as usize;
    let x1 = (libm::floor(max_x) as usize).min(width - 1);
    let y1 = (libm::floor(max_y) as usize).min(height - 1);
    for y in y0..=y1 {
        let py = y as f64 + offset;
        for x in x0..=x1 {
            let p = [x as f64 + offset, py];
            let w = [s * edge(b, c, p), s * edge(c, a, p), s * edge(a, b, p)];
            let inside = (0..3).all(|k| w[k] > 0.0 || (w[k] == 0.0 && top_left[k]));
            if inside {
                f(x, y, [w[0] * inv, w[1] * inv, w[2] * inv]);
            }
        }
    }
    true
}

/// UV-space scan with texel centres at `i + 0.5` (corner coordinates given in
/// texel units, i.e. `u * W`, `v * H`).
pub fn for_each_texel(pts: &[[f64; 2]; 3], width: usize, height: usize, f: impl FnMut(usize, usize, [f64; 3])) -> bool {
    scan_triangle(pts, width, height, 0.5, f)
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Per-pixel nearest depth (`-Z` in camera space, `+inf` where empty) and the
/// id of the triangle that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthBuffer {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    triangle: Vec<u32>,
    /// Zero-area projected triangles that were skipped.
    pub degenerate: usize,
    /// Triangles with a corner at or behind the camera plane, skipped.
    pub clipped: usize,
}

impl DepthBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![f64::INFINITY; width * height],
            triangle: vec![NO_TRIANGLE; width * height],
            degenerate: 0,
            clipped: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    /// Triangle covering the pixel centre, if any.
    pub fn triangle(&self, x: usize, y: usize) -> Option<usize> {
        let t = self.triangle[y * self.width + x];
        (t != NO_TRIANGLE).then_some(t as usize)
    }

    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.triangle[y * self.width + x] != NO_TRIANGLE
    }

    pub fn covered_pixels(&self) -> usize {
        self.triangle.iter().filter(|&&t| t != NO_TRIANGLE).count()
    }
}

/// Transforms model-space vertices into camera space.
pub fn to_camera_space(vertices: &[[f64; 3]], camera: &Camera) -> Vec<[f64; 3]> {
    let r = camera.rotation();
    vertices.iter().map(|&v| model::add3(model::mat_vec(&r, v), camera.translation)).collect()
}

/// Z-buffer of the mesh with perspective-correct (ray-exact) depth.
pub fn rasterize_depth(
    vertices: &[[f64; 3]],
    triangles: &[[u32; 3]],
    camera: &Camera,
    width: usize,
    height: usize,
) -> DepthBuffer {
    let cam = to_camera_space(vertices, camera);
    rasterize_camera_space(&cam, triangles, camera, width, height)
}

pub(crate) fn rasterize_camera_space(
    cam: &[[f64; 3]],
    triangles: &[[u32; 3]],
    camera: &Camera,
    width: usize,
    height: usize,
) -> DepthBuffer {
    let mut buf = DepthBuffer::empty(width, height);
    if width == 0 || height == 0 {
        return buf;
    }
    for (ti, tri) in triangles.iter().enumerate() {
        let q = tri.map(|i| cam[i as usize]);
        if q.iter().any(|p| p[2] >= -NEAR_PLANE) {
            buf.clipped += 1;
            continue;
        }
        let pts = q.map(|p| camera.to_pixel(p));
        let inv_w = q.map(|p| -1.0 / p[2]);
        let (depth, ids) = (&mut buf.depth, &mut buf.triangle);
        let ok = scan_triangle(&pts, width, height, 0.0, |x, y, b| {
            let d = 1.0 / (b[0] * inv_w[0] + b[1] * inv_w[1] + b[2] * inv_w[2]);
            let i = y * width + x;
            if d < depth[i] {
                depth[i] = d;
                ids[i] = ti as u32;
            }
        });
        if !ok {
            buf.degenerate += 1;
        }
    }
    buf
}

/// Depth along the ray through camera-space point `q` where it meets the plane
/// of triangle `t`. Falls back to `fallback` for rays parallel to the plane.
pub(crate) fn plane_depth_along(cam: &[[f64; 3]], tri: &[u32; 3], q: [f64; 3], fallback: f64) -> f64 {
    let [a, b, c] = tri.map(|i| cam[i as usize]);
    let n = cross3(sub3(b, a), sub3(c, a));
    let denom = dot3(n, q);
    if denom.abs() < 1e-300 {
        return fallback;
    }
    let s = dot3(n, a) / denom;
    s * -q[2]
}

/// Decision shared by vertex and texel visibility. `owns(t)` reports whether
/// triangle `t` belongs to the queried surface patch.
pub(crate) fn depth_test(
    q: [f64; 3],
    camera: &Camera,
    cam: &[[f64; 3]],
    triangles: &[[u32; 3]],
    depth: &DepthBuffer,
    eps: f64,
    owns: impl Fn(usize) -> bool,
) -> bool {
    if q[2] >= -NEAR_PLANE {
        return false;
    }
    let px = camera.to_pixel(q);
    let (x, y) = (libm::round(px[0]), libm::round(px[1]));
    if !(x >= 0.0 && y >= 0.0 && x < depth.width as f64 && y < depth.height as f64) {
        return false;
    }
    let (x, y) = (x as usize, y as usize);
    let Some(t) = depth.triangle(x, y) else {
        return true;
    };
    if owns(t) {
        return true;
    }
    let front = plane_depth_along(cam, &triangles[t], q, depth.depth(x, y));
    -q[2] <= front + eps
}

/// Area-weighted vertex normals of camera-space points.
pub(crate) fn vertex_normals(cam: &[[f64; 3]], triangles: &[[u32; 3]]) -> Vec<[f64; 3]> {
    let mut normals = vec![[0.0; 3]; cam.len()];
    for tri in triangles {
        let [a, b, c] = tri.map(|i| cam[i as usize]);
        let n = cross3(sub3(b, a), sub3(c, a));
        for &i in tri {
            normals[i as usize] = model::add3(normals[i as usize], n);
        }
    }
    normals
}

/// Per-vertex visibility: in front of the camera, inside the frame, facing
/// the camera (area-weighted normal), and not behind the nearest surface at
/// its pixel by more than `eps`.
pub fn visible_vertices(
    vertices: &[[f64; 3]],
    triangles: &[[u32; 3]],
    camera: &Camera,
    depth: &DepthBuffer,
    eps: f64,
) -> Vec<bool> {
    let cam = to_camera_space(vertices, camera);
    visible_camera_space(&cam, triangles, camera, depth, eps)
}

pub(crate) fn visible_camera_space(
    cam: &[[f64; 3]],
    triangles: &[[u32; 3]],
    camera: &Camera,
    depth: &DepthBuffer,
    eps: f64,
) -> Vec<bool> {
    let normals = vertex_normals(cam, triangles);
    (0..cam.len())
        .map(|v| {
            let q = cam[v];
            dot3(normals[v], q) < 0.0
                && depth_test(q, camera, cam, triangles, depth, eps, |t| triangles[t].contains(&(v as u32)))
        })
        .collect()
}

/// True when all four bilinear taps around `px` are covered by the mesh.
pub(crate) fn taps_covered(depth: &DepthBuffer, px: [f64; 2]) -> bool {
    taps_on(depth, px, |_| true)
}

/// True when all four bilinear taps around `px` are covered by triangles
/// accepted by `accept`.
pub(crate) fn taps_on(depth: &DepthBuffer, px: [f64; 2], accept: impl Fn(usize) -> bool) -> bool {
    let (w, h) = (depth.width(), depth.height());
    if !(px[0] >= 0.0 && px[1] >= 0.0 && px[0] <= (w - 1) as f64 && px[1] <= (h - 1) as f64) {
        return false;
    }
    let x0 = libm::floor(px[0]) as usize;
    let y0 = libm::floor(px[1]) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].iter().all(|&(x, y)| depth.triangle(x, y).is_some_and(&accept))
}

/// Sorted one-ring vertex neighbourhood (including the vertex itself).
pub(crate) fn vertex_neighbours(n: usize, triangles: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = (0..n as u32).map(|v| vec![v]).collect();
    for tri in triangles {
        for &a in tri {
            for &b in tri {
                out[a as usize].push(b);
            }
        }
    }
    for list in &mut out {
        list.sort_unstable();
        list.dedup();
    }
    out
}

/// Default visibility tolerance: `1e-4` of the mesh bounding-box diagonal.
pub fn default_eps(vertices: &[[f64; 3]]) -> f64 {
    1e-4 * model::bbox_diagonal(vertices)
}

/// Per-pixel UV coordinate of the visible surface, built once per geometry
/// and reusable for any texture.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderMap {
    width: usize,
    height: usize,
    samples: Vec<Option<[f64; 2]>>,
}

impl RenderMap {
    pub fn build(model: &MorphableModel, params: &FitParams, width: usize, height: usize) -> Result<Self, ModelError> {
        let vertices = instantiate_shape(model, &params.p)?;
        Ok(Self::from_geometry(&vertices, model.triangles(), model.uv_coords(), &params.camera, width, height))
    }

    pub fn from_geometry(
        vertices: &[[f64; 3]],
        triangles: &[[u32; 3]],
        uvs: &[[f64; 2]],
        camera: &Camera,
        width: usize,
        height: usize,
    ) -> Self {
        let cam = to_camera_space(vertices, camera);
        let depth = rasterize_camera_space(&cam, triangles, camera, width, height);
        let mut samples = vec![None; width * height];
        for y in 0..height {
            for x in 0..width {
                let Some(t) = depth.triangle(x, y) else { continue };
                let tri = triangles[t];
                let q = tri.map(|i| cam[i as usize]);
                let pts = q.map(|p| camera.to_pixel(p));
                let b = affine_barycentric(&pts, [x as f64, y as f64]);
                // Perspective-correct weights.
                let mut w = [b[0] / -q[0][2], b[1] / -q[1][2], b[2] / -q[2][2]];
                let total = w[0] + w[1] + w[2];
                for k in &mut w {
                    *k /= total;
                }
                let mut uv = [0.0; 2];
                for k in 0..3 {
                    let c = uvs[tri[k] as usize];
                    uv[0] += w[k] * c[0];
                    uv[1] += w[k] * c[1];
                }
                samples[y * width + x] = Some(uv);
            }
        }
        Self { width, height, samples }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn sample(&self, x: usize, y: usize) -> Option<[f64; 2]> {
        self.samples[y * self.width + x]
    }

    pub fn covered_pixels(&self) -> usize {
        self.samples.iter().filter(|s| s.is_some()).count()
    }

    /// Textured image; background is black.
    pub fn apply(&self, uv: &UvMap) -> Image {
        Image::from_fn(self.width, self.height, |x, y| match self.sample(x, y) {
            Some([u, v]) => uv.sample_uv(u, v),
            None => [0.0; 3],
        })
    }

    /// Linear weights from UV texels to (optionally box-pooled) output pixels,
    /// as `(texel index, weight)` lists per pooled pixel. The bilinear taps
    /// match [`Image::sample_uv`].
    pub fn texel_weights(&self, uv_width: usize, uv_height: usize, pool: usize) -> Vec<Vec<(usize, f64)>> {
        assert!(pool >= 1 && self.width % pool == 0 && self.height % pool == 0);
        let (ow, oh) = (self.width / pool, self.height / pool);
        let norm = 1.0 / (pool * pool) as f64;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ow * oh];
        for y in 0..self.height {
            for x in 0..self.width {
                let Some([u, v]) = self.sample(x, y) else { continue };
                let row = &mut rows[(y / pool) * ow + x / pool];
                for (idx, w) in bilinear_taps(u, v, uv_width, uv_height) {
                    if w == 0.0 {
                        continue;
                    }
                    match row.iter_mut().find(|(i, _)| *i == idx) {
                        Some(entry) => entry.1 += w * norm,
                        None => row.push((idx, w * norm)),
                    }
                }
            }
        }
        rows
    }
}

/// Bilinear taps (texel index, weight) of a clamped UV lookup.
pub(crate) fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let x = (u * width as f64 - 0.5).clamp(0.0, (width - 1) as f64);
    let y = (v * height as f64 - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = if width < 2 { 0 } else { (libm::floor(x) as usize).min(width - 2) };
    let y0 = if height < 2 { 0 } else { (libm::floor(y) as usize).min(height - 2) };
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

pub(crate) fn affine_barycentric(pts: &[[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let [a, b, c] = *pts;
    let area = edge(a, b, c);
    [edge(b, c, p) / area, edge(c, a, p) / area, edge(a, b, p) / area]
}

/// Rendered image plus coverage diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: Image,
    pub covered_pixels: usize,
}

impl Rendered {
    /// True when no face pixel landed in the frame.
    pub fn is_blank(&self) -> bool {
        self.covered_pixels == 0
    }
}

/// Z-buffered textured rasterization with bilinear texture sampling.
pub fn render(model: &MorphableModel, params: &FitParams, uv: &UvMap, width: usize, height: usize) -> Result<Rendered, ModelError> {
    let map = RenderMap::build(model, params, width, height)?;
    Ok(Rendered { image: map.apply(uv), covered_pixels: map.covered_pixels() })
}
