//! Z-buffered triangle rasterization and a brute-force ray-casting oracle.
//!
//! Two independent routes to the same image: the production path projects
//! vertices and walks per-triangle bounding boxes with 2-D edge functions and
//! perspective-correct interpolation; the oracle intersects every pixel ray
//! with every triangle via Möller-Trumbore and keeps the nearest hit. Both
//! apply the same triangle skip rule (any vertex at z ≤ Z_NEAR) and the same
//! tie rule (strictly nearer z wins, earlier triangle on exact ties), so on
//! meshes with shared-vertex attributes they agree pixel for pixel.

use crate::camera::{project, ray_direction, transform, Intrinsics, Pose, Vec3};
use crate::diffmath::DTensor;
use crate::evalx::DepthMap;

use super::texture::Texture;
use super::SynthError;

pub const Z_NEAR: f64 = 1e-6;

/// Triangle mesh in reference-camera coordinates with per-vertex texture
/// coordinates (reference pixel units).
#[derive(Clone, Debug)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub uv: Vec<[f64; 2]>,
    pub tris: Vec<[usize; 3]>,
}

/// One sample buffer at `w`×`h`: color, z-depth, winning triangle (-1 none).
#[derive(Clone, Debug)]
pub struct RasterBuf {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub tri: Vec<i64>,
}

impl RasterBuf {
    fn new(width: usize, height: usize) -> RasterBuf {
        RasterBuf {
            width,
            height,
            color: vec![0.0; width * height * 3],
            depth: vec![f64::INFINITY; width * height],
            tri: vec![-1; width * height],
        }
    }
}

struct Projected {
    uvz: Vec<(f64, f64, f64)>,
    cam: Vec<Vec3>,
    skip: Vec<bool>,
    all_skipped: bool,
}

fn project_mesh(mesh: &TriMesh, pose: &Pose, k: &Intrinsics) -> Projected {
    let cam: Vec<Vec3> = mesh.vertices.iter().map(|v| transform(pose, *v)).collect();
    let uvz: Vec<(f64, f64, f64)> = cam
        .iter()
        .map(|p| {
            let (u, v, _) = project(k, *p);
            (u, v, p[2])
        })
        .collect();
    let skip: Vec<bool> = mesh
        .tris
        .iter()
        .map(|t| t.iter().any(|&i| cam[i][2] <= Z_NEAR))
        .collect();
    let all_skipped = !skip.is_empty() && skip.iter().all(|s| *s);
    Projected { uvz, cam, skip, all_skipped }
}

/// Rasterize at `s`× supersampling. Sample `(sj, si)` sits at base-pixel
/// position `((sj + 0.5)/s - 0.5, (si + 0.5)/s - 0.5)`, so `s = 1` samples
/// exactly the integer pixel centers.
pub fn rasterize(mesh: &TriMesh, tex: &Texture, pose: &Pose, k: &Intrinsics, s: usize) -> Result<RasterBuf, SynthError> {
    assert!(s >= 1, "supersample must be >= 1");
    let proj = project_mesh(mesh, pose, k);
    if proj.all_skipped {
        return Err(SynthError::MeshBehindCamera);
    }
    let (ws, hs) = (k.width * s, k.height * s);
    let mut buf = RasterBuf::new(ws, hs);
    let sf = s as f64;

    for (ti, t) in mesh.tris.iter().enumerate() {
        if proj.skip[ti] {
            continue;
        }
        let (p0, p1, p2) = (proj.uvz[t[0]], proj.uvz[t[1]], proj.uvz[t[2]]);
        let umin = p0.0.min(p1.0).min(p2.0);
        let umax = p0.0.max(p1.0).max(p2.0);
        let vmin = p0.1.min(p1.1).min(p2.1);
        let vmax = p0.1.max(p1.1).max(p2.1);
        // Sample-index range covering the bbox.
        let j0 = (((umin + 0.5) * sf - 0.5).ceil().max(0.0)) as usize;
        let j1 = (((umax + 0.5) * sf - 0.5).floor().min((ws - 1) as f64)) as i64;
        let i0 = (((vmin + 0.5) * sf - 0.5).ceil().max(0.0)) as usize;
        let i1 = (((vmax + 0.5) * sf - 0.5).floor().min((hs - 1) as f64)) as i64;
        if j1 < j0 as i64 || i1 < i0 as i64 {
            continue;
        }
        let (uv0, uv1, uv2) = (mesh.uv[t[0]], mesh.uv[t[1]], mesh.uv[t[2]]);
        for si in i0..=(i1 as usize) {
            let y = (si as f64 + 0.5) / sf - 0.5;
            for sj in j0..=(j1 as usize) {
                let x = (sj as f64 + 0.5) / sf - 0.5;
                let w0 = edge(p1, p2, x, y);
                let w1 = edge(p2, p0, x, y);
                let w2 = edge(p0, p1, x, y);
                let inside = (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
                if !inside {
                    continue;
                }
                let denom = w0 + w1 + w2;
                if denom == 0.0 {
                    continue;
                }
                let (l0, l1, l2) = (w0 / denom, w1 / denom, w2 / denom);
                let inv_z = l0 / p0.2 + l1 / p1.2 + l2 / p2.2;
                let z = 1.0 / inv_z;
                let idx = si * ws + sj;
                if z < buf.depth[idx] {
                    let tu = z * (l0 * uv0[0] / p0.2 + l1 * uv1[0] / p1.2 + l2 * uv2[0] / p2.2);
                    let tv = z * (l0 * uv0[1] / p0.2 + l1 * uv1[1] / p1.2 + l2 * uv2[1] / p2.2);
                    let c = tex.eval(tu, tv);
                    buf.depth[idx] = z;
                    buf.tri[idx] = ti as i64;
                    buf.color[idx * 3..idx * 3 + 3].copy_from_slice(&c);
                }
            }
        }
    }
    Ok(buf)
}

#[inline]
fn edge(a: (f64, f64, f64), b: (f64, f64, f64), px: f64, py: f64) -> f64 {
    (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
}

/// Brute-force reference: every pixel ray against every triangle,
/// Möller-Trumbore, nearest strict-z hit.
pub fn render_oracle(mesh: &TriMesh, tex: &Texture, pose: &Pose, k: &Intrinsics) -> Result<RasterBuf, SynthError> {
    let proj = project_mesh(mesh, pose, k);
    if proj.all_skipped {
        return Err(SynthError::MeshBehindCamera);
    }
    let mut buf = RasterBuf::new(k.width, k.height);
    for i in 0..k.height {
        for j in 0..k.width {
            let dir = ray_direction(k, j as f64, i as f64).dir;
            let idx = i * k.width + j;
            for (ti, t) in mesh.tris.iter().enumerate() {
                if proj.skip[ti] {
                    continue;
                }
                let Some((tz, bu, bv)) = moller_trumbore(&proj.cam[t[0]], &proj.cam[t[1]], &proj.cam[t[2]], &dir)
                else {
                    continue;
                };
                if tz <= Z_NEAR || tz >= buf.depth[idx] {
                    continue;
                }
                let l0 = 1.0 - bu - bv;
                let (uv0, uv1, uv2) = (mesh.uv[t[0]], mesh.uv[t[1]], mesh.uv[t[2]]);
                let tu = l0 * uv0[0] + bu * uv1[0] + bv * uv2[0];
                let tv = l0 * uv0[1] + bu * uv1[1] + bv * uv2[1];
                let c = tex.eval(tu, tv);
                buf.depth[idx] = tz;
                buf.tri[idx] = ti as i64;
                buf.color[idx * 3..idx * 3 + 3].copy_from_slice(&c);
            }
        }
    }
    Ok(buf)
}

/// Ray (origin 0, z-normalized `dir`) vs triangle. Returns `(t, u, v)` —
/// since `dir.z == 1`, `t` is z-depth. Inclusive edges, double-sided.
fn moller_trumbore(v0: &Vec3, v1: &Vec3, v2: &Vec3, dir: &Vec3) -> Option<(f64, f64, f64)> {
    use crate::camera::{cross3, dot3, sub3};
    let e1 = sub3(v1, v0);
    let e2 = sub3(v2, v0);
    let pvec = cross3(dir, &e2);
    let det = dot3(&e1, &pvec);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = [-v0[0], -v0[1], -v0[2]];
    let u = dot3(&tvec, &pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = cross3(&tvec, &e1);
    let v = dot3(dir, &qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some((dot3(&e2, &qvec) * inv, u, v))
}

/// Render a frame: color at `supersample`² samples box-filtered to sensor
/// resolution, plus z-depth and hit mask at exact pixel centers.
pub fn render_frame(
    mesh: &TriMesh,
    tex: &Texture,
    pose: &Pose,
    k: &Intrinsics,
    supersample: usize,
) -> Result<(DTensor, DepthMap), SynthError> {
    let ss = rasterize(mesh, tex, pose, k, supersample)?;
    let centers = if supersample == 1 { None } else { Some(rasterize(mesh, tex, pose, k, 1)?) };
    let c1 = centers.as_ref().unwrap_or(&ss);

    let (w, h, s) = (k.width, k.height, supersample);
    let mut color = vec![0.0; w * h * 3];
    let inv = 1.0 / (s * s) as f64;
    for i in 0..h {
        for j in 0..w {
            let mut acc = [0.0; 3];
            for si in 0..s {
                for sj in 0..s {
                    let idx = (i * s + si) * (w * s) + (j * s + sj);
                    for c in 0..3 {
                        acc[c] += ss.color[idx * 3 + c];
                    }
                }
            }
            for c in 0..3 {
                color[(i * w + j) * 3 + c] = acc[c] * inv;
            }
        }
    }
    let depths: Vec<f64> = c1.depth.iter().map(|z| if z.is_finite() { *z } else { 0.0 }).collect();
    let depth = DepthMap::new(w, h, depths);
    Ok((DTensor::new(vec![h, w, 3], color).expect("finite render"), depth))
}
