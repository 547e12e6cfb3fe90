//! Independent reference implementations used by the integration tests and
//! the acceptance harness. They follow the textbook formulas directly and
//! share no code with the library beyond plain data types.

#![allow(dead_code)]

pub mod gradcheck;

use nalgebra::{DMatrix, DVector};
use uvforge_core::image::Image;
use uvforge_core::model::Camera;

pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut mse = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        mse += (x - y).powi(2);
    }
    mse /= a.data().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// SSIM from the definition: explicit 2D Gaussian window, two-pass local
/// statistics, valid windows only, per-channel average.
pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (w, h) = a.dims();
    let size = 11usize;
    let sigma = 1.5f64;
    let mut window = vec![vec![0.0; size]; size];
    let mut norm = 0.0;
    for (i, row) in window.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            norm += *v;
        }
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - size {
            for x0 in 0..=w - size {
                let px = |img: &Image, i: usize, j: usize| img.get(x0 + j, y0 + i)[c];
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let g = window[i][j] / norm;
                        mu_a += g * px(a, i, j);
                        mu_b += g * px(b, i, j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let g = window[i][j] / norm;
                        let da = px(a, i, j) - mu_a;
                        let db = px(b, i, j) - mu_b;
                        va += g * da * da;
                        vb += g * db * db;
                        cov += g * da * db;
                    }
                }
                acc += (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2) / ((mu_a.powi(2) + mu_b.powi(2) + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Dense solve of the 4-neighbour Poisson system on `region`, with source
/// Laplacian guidance and target Dirichlet values.
pub fn poisson_dense_oracle(source: &Image, target: &Image, region: &[bool]) -> Image {
    let (w, h) = target.dims();
    let cells: Vec<usize> = (0..w * h).filter(|&i| region[i]).collect();
    let index = |i: usize| cells.iter().position(|&c| c == i);
    let n = cells.len();
    let mut out = target.clone();
    for c in 0..3 {
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for (k, &cell) in cells.iter().enumerate() {
            let (x, y) = (cell % w, cell / w);
            a[(k, k)] = 4.0;
            let s = source.get(x, y)[c];
            for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
                rhs[k] += s - source.get(nx, ny)[c];
                match index(ny * w + nx) {
                    Some(j) => a[(k, j)] = -1.0,
                    None => rhs[k] += target.get(nx, ny)[c],
                }
            }
        }
        let sol = a.lu().solve(&rhs).expect("poisson system is non-singular");
        for (k, &cell) in cells.iter().enumerate() {
            let (x, y) = (cell % w, cell / w);
            let mut p = out.get(x, y);
            p[c] = sol[k];
            out.set(x, y, p);
        }
    }
    out
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Moller-Trumbore: ray parameter `t` of the hit, if any.
pub fn ray_triangle(dir: [f64; 3], tri: [[f64; 3]; 3]) -> Option<f64> {
    let e1 = sub(tri[1], tri[0]);
    let e2 = sub(tri[2], tri[0]);
    let p = cross(dir, e2);
    let det = dot(e1, p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = sub([0.0; 3], tri[0]);
    let u = dot(s, p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(s, e1);
    let v = dot(dir, q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot(e2, q) * inv;
    (t > 0.0).then_some(t)
}

/// Brute-force vertex visibility. For each vertex the ray through the centre
/// of its (rounded) pixel is intersected with every triangle; the vertex is
/// visible if it faces the camera and either nothing is hit, the nearest hit
/// is an incident triangle, or the vertex is no deeper than the nearest hit
/// triangle's plane along the vertex's own line of sight plus `eps`.
pub fn visibility_oracle(vertices: &[[f64; 3]], triangles: &[[u32; 3]], camera: &Camera, w: usize, h: usize, eps: f64) -> Vec<bool> {
    let r = camera.rotation();
    let cam: Vec<[f64; 3]> = vertices
        .iter()
        .map(|v| {
            let mut q = camera.translation;
            for i in 0..3 {
                for j in 0..3 {
                    q[i] += r[i][j] * v[j];
                }
            }
            q
        })
        .collect();
    let mut normals = vec![[0.0; 3]; cam.len()];
    for t in triangles {
        let n = cross(sub(cam[t[1] as usize], cam[t[0] as usize]), sub(cam[t[2] as usize], cam[t[0] as usize]));
        for &i in t {
            for k in 0..3 {
                normals[i as usize][k] += n[k];
            }
        }
    }
    (0..cam.len())
        .map(|v| {
            let q = cam[v];
            if q[2] >= -1e-9 || dot(normals[v], q) >= 0.0 {
                return false;
            }
            let px = camera.principal_point[0] + camera.focal * q[0] / -q[2];
            let py = camera.principal_point[1] + camera.focal * q[1] / -q[2];
            let (x, y) = (px.round(), py.round());
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                return false;
            }
            let dir = [(x - camera.principal_point[0]) / camera.focal, (y - camera.principal_point[1]) / camera.focal, -1.0];
            let mut nearest: Option<(f64, usize)> = None;
            for (ti, t) in triangles.iter().enumerate() {
                let tri = t.map(|i| cam[i as usize]);
                if tri.iter().any(|p| p[2] >= -1e-9) {
                    continue;
                }
                if let Some(s) = ray_triangle(dir, tri) {
                    if nearest.is_none_or(|(best, _)| s < best) {
                        nearest = Some((s, ti));
                    }
                }
            }
            let Some((_, ti)) = nearest else { return true };
            let t = triangles[ti];
            if t.contains(&(v as u32)) {
                return true;
            }
            let tri = t.map(|i| cam[i as usize]);
            let n = cross(sub(tri[1], tri[0]), sub(tri[2], tri[0]));
            let s = dot(n, tri[0]) / dot(n, q);
            -q[2] <= s * -q[2] + eps
        })
        .collect()
}
