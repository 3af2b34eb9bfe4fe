use super::scene::BoxObj;
use crate::body::BodyMesh;
use crate::geometry::{CameraIntrinsics, SE3Pose, Vec3};

/// Nearest surface hit along a ray: distance parameter and unit normal.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

/// Camera-frame ray direction through pixel `(u, v)` with unit z, so the
/// ray parameter equals the z-depth.
pub fn pixel_ray(intr: &CameraIntrinsics, u: f64, v: f64) -> Vec3 {
    Vec3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0)
}

/// Exit point of a ray leaving the inside of the room box.
pub fn room_hit(o: &Vec3, d: &Vec3, half: f64, height: f64) -> Option<Hit> {
    let lo = [-half, 0.0, -half];
    let hi = [half, height, half];
    let mut best: Option<Hit> = None;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            continue;
        }
        let (wall, sign) = if d[a] > 0.0 { (hi[a], -1.0) } else { (lo[a], 1.0) };
        let t = (wall - o[a]) / d[a];
        if t > 0.0 && best.is_none_or(|b| t < b.t) {
            let mut n = Vec3::zeros();
            n[a] = sign;
            best = Some(Hit { t, normal: n });
        }
    }
    best
}

/// Entry point of a ray into an axis-aligned box (slab test).
pub fn box_hit(o: &Vec3, d: &Vec3, b: &BoxObj) -> Option<Hit> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = 0.0;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((b.min[a] - o[a]) / d[a], (b.max[a] - o[a]) / d[a]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        if lo > t0 {
            t0 = lo;
            axis = a;
            sign = -d[a].signum();
        }
        t1 = t1.min(hi);
    }
    if t0 > t1 || t0 <= 0.0 {
        return None;
    }
    let mut n = Vec3::zeros();
    n[axis] = sign;
    Some(Hit { t: t0, normal: n })
}

/// Möller–Trumbore ray/triangle intersection; returns the ray parameter.
pub fn triangle_hit(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

/// Per-pixel rasterization of body meshes into a z-buffer.
#[derive(Clone, Debug)]
pub struct BodyRaster {
    /// Camera z-depth of the nearest body surface, `INFINITY` where none.
    pub depth: Vec<f64>,
    /// Index into the input body list of the surface owning each pixel.
    pub ids: Vec<Option<usize>>,
    /// Camera-frame unit normal facing the camera.
    pub normals: Vec<Vec3>,
}

/// Z-buffered triangle rasterization. Each triangle is tested against the
/// pixel rays inside its projected bounding box; nearest hit wins.
pub fn rasterize_bodies(
    bodies: &[BodyMesh],
    faces: &[[usize; 3]],
    cam_to_world: &SE3Pose,
    intr: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> BodyRaster {
    let n = width * height;
    let mut out = BodyRaster {
        depth: vec![f64::INFINITY; n],
        ids: vec![None; n],
        normals: vec![Vec3::zeros(); n],
    };
    let w2c = cam_to_world.inverse();
    for (k, body) in bodies.iter().enumerate() {
        let verts: Vec<Vec3> = body.verts.iter().map(|v| w2c.transform_point(v)).collect();
        for f in faces {
            let (a, b, c) = (&verts[f[0]], &verts[f[1]], &verts[f[2]]);
            if a.z < 0.05 || b.z < 0.05 || c.z < 0.05 {
                continue;
            }
            let px: Vec<(f64, f64)> = [a, b, c].iter().map(|p| intr.project(p).expect("z > 0")).collect();
            let umin = px.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0);
            let umax = px.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil();
            let vmin = px.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0);
            let vmax = px.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil();
            if umax < 0.0 || vmax < 0.0 {
                continue;
            }
            let umax = umax.min(width as f64 - 1.0) as usize;
            let vmax = vmax.min(height as f64 - 1.0) as usize;
            let mut normal = (b - a).cross(&(c - a));
            if normal.norm() < 1e-15 {
                continue;
            }
            normal.normalize_mut();
            for v in vmin as usize..=vmax {
                for u in umin as usize..=umax {
                    let d = pixel_ray(intr, u as f64, v as f64);
                    if let Some(t) = triangle_hit(&Vec3::zeros(), &d, a, b, c) {
                        let i = v * width + u;
                        if t < out.depth[i] {
                            out.depth[i] = t;
                            out.ids[i] = Some(k);
                            out.normals[i] = if normal.dot(&d) > 0.0 { -normal } else { normal };
                        }
                    }
                }
            }
        }
    }
    out
}

/// Patch containing image point `(u, v)`, with pixel centers at integers.
pub fn patch_of(u: f64, v: f64, width: usize, height: usize, patch: usize) -> Option<usize> {
    let (x, y) = ((u + 0.5).floor(), (v + 0.5).floor());
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
        return None;
    }
    let (gw, _) = (width / patch, height / patch);
    Some((y as usize / patch) * gw + x as usize / patch)
}

/// Head-patch labels per person. A head counts as visible when the
/// person owns a pixel within one pixel of the projected head joint.
/// When two heads fall in the same or adjacent patches only the nearer
/// one is labelled, so labels are always strict 3×3 local peaks.
pub fn head_labels(
    ids: &[Option<usize>],
    heads_cam: &[Vec3],
    intr: &CameraIntrinsics,
    width: usize,
    height: usize,
    patch: usize,
) -> Vec<Option<usize>> {
    let gw = width / patch;
    let mut labels: Vec<Option<usize>> = heads_cam
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let (u, v) = intr.project(h)?;
            let p = patch_of(u, v, width, height, patch)?;
            let (x, y) = ((u + 0.5).floor() as isize, (v + 0.5).floor() as isize);
            let seen = (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (xx, yy) = (x + dx, y + dy);
                    xx >= 0
                        && yy >= 0
                        && (xx as usize) < width
                        && (yy as usize) < height
                        && ids[yy as usize * width + xx as usize] == Some(k)
                })
            });
            seen.then_some(p)
        })
        .collect();
    let mut order: Vec<usize> = (0..heads_cam.len()).collect();
    order.sort_by(|&a, &b| heads_cam[a].z.total_cmp(&heads_cam[b].z));
    for (i, &a) in order.iter().enumerate() {
        let Some(pa) = labels[a] else { continue };
        for &b in &order[i + 1..] {
            if let Some(pb) = labels[b] {
                let (ra, ca) = ((pa / gw) as isize, (pa % gw) as isize);
                let (rb, cb) = ((pb / gw) as isize, (pb % gw) as isize);
                if (ra - rb).abs() <= 1 && (ca - cb).abs() <= 1 {
                    labels[b] = None;
                }
            }
        }
    }
    labels
}
