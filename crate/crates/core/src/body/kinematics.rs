use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::template::BodyTemplate;
use crate::diffcore::{Real, SmoothFn};
use crate::error::{Error, Result};
use crate::geometry::{SE3Pose, Vec3};

pub type Mat3<R> = [[R; 3]; 3];

/// Axis-angle to rotation matrix, generic over plain and dual scalars.
/// Small angles use a series expansion so derivatives stay finite at zero.
pub fn rodrigues_r<R: Real>(aa: [R; 3]) -> Mat3<R> {
    let [x, y, z] = aa;
    let t2 = x * x + y * y + z * z;
    let (a, b) = if t2.value() < 1e-8 {
        (
            R::one() - t2 / R::cst(6.0) + t2 * t2 / R::cst(120.0),
            R::cst(0.5) - t2 / R::cst(24.0) + t2 * t2 / R::cst(720.0),
        )
    } else {
        let t = t2.sqrt();
        (t.sin() / t, (R::one() - t.cos()) / t2)
    };
    let k = [[R::zero(), -z, y], [z, R::zero(), -x], [-y, x, R::zero()]];
    let mut r = [[R::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut kk = R::zero();
            for m in 0..3 {
                kk += k[i][m] * k[m][j];
            }
            let id = if i == j { R::one() } else { R::zero() };
            r[i][j] = id + a * k[i][j] + b * kk;
        }
    }
    r
}

pub fn rodrigues(aa: &Vec3) -> Matrix3<f64> {
    let r = rodrigues_r([aa.x, aa.y, aa.z]);
    Matrix3::from_fn(|i, j| r[i][j])
}

/// Rotation matrix of a raw quaternion `(w, x, y, z)`, normalized inside.
/// A vanishing quaternion maps to the identity.
pub fn quat_to_mat_r<R: Real>(q: [R; 4]) -> Mat3<R> {
    let n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
    if !(n2.value() > 1e-24) {
        let (o, z) = (R::one(), R::zero());
        return [[o, z, z], [z, o, z], [z, z, o]];
    }
    let n = n2.sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let two = R::cst(2.0);
    let one = R::one();
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

fn matmul3<R: Real>(a: &Mat3<R>, b: &Mat3<R>) -> Mat3<R> {
    let mut r = [[R::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = R::zero();
            for m in 0..3 {
                s += a[i][m] * b[m][j];
            }
            r[i][j] = s;
        }
    }
    r
}

fn matvec3<R: Real>(a: &Mat3<R>, v: &[R; 3]) -> [R; 3] {
    let mut r = [R::zero(); 3];
    for i in 0..3 {
        r[i] = a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2];
    }
    r
}

/// Body-frame (unrooted) posed vertices and joints.
///
/// `theta` holds `(K−1)·3` axis-angle entries for joints `1..K`; the root
/// joint's orientation comes from the root pose instead.
pub fn pose_local<R: Real>(
    tpl: &BodyTemplate,
    theta: &[R],
    beta: &[R],
    alpha: &[R],
) -> (Vec<[R; 3]>, Vec<[R; 3]>) {
    let d = tpl.dims;
    let (nv, nk, nb, na) = (d.n_verts, d.n_joints, d.n_beta, d.n_alpha);

    let mut shaped = Vec::with_capacity(nv);
    for v in 0..nv {
        let mut p = [R::zero(); 3];
        for c in 0..3 {
            let mut x = R::cst(tpl.template[v * 3 + c]);
            let row = (v * 3 + c) * nb;
            for b in 0..nb {
                let s = tpl.shape_basis[row + b];
                if s != 0.0 {
                    x += R::cst(s) * beta[b];
                }
            }
            let row = (v * 3 + c) * na;
            for a in 0..na {
                let s = tpl.expr_basis[row + a];
                if s != 0.0 {
                    x += R::cst(s) * alpha[a];
                }
            }
            p[c] = x;
        }
        shaped.push(p);
    }

    let mut rest_j = vec![[R::zero(); 3]; nk];
    for (k, j) in rest_j.iter_mut().enumerate() {
        for v in 0..nv {
            let w = tpl.joint_regressor[k * nv + v];
            if w != 0.0 {
                for c in 0..3 {
                    j[c] += R::cst(w) * shaped[v][c];
                }
            }
        }
    }

    let (o, z) = (R::one(), R::zero());
    let mut g_rot: Vec<Mat3<R>> = Vec::with_capacity(nk);
    let mut g_t: Vec<[R; 3]> = Vec::with_capacity(nk);
    g_rot.push([[o, z, z], [z, o, z], [z, z, o]]);
    g_t.push(rest_j[0]);
    for k in 1..nk {
        let p = tpl.parents[k].expect("validated tree");
        let local = rodrigues_r([theta[(k - 1) * 3], theta[(k - 1) * 3 + 1], theta[(k - 1) * 3 + 2]]);
        let off = [
            rest_j[k][0] - rest_j[p][0],
            rest_j[k][1] - rest_j[p][1],
            rest_j[k][2] - rest_j[p][2],
        ];
        let moved = matvec3(&g_rot[p], &off);
        g_t.push([moved[0] + g_t[p][0], moved[1] + g_t[p][1], moved[2] + g_t[p][2]]);
        g_rot.push(matmul3(&g_rot[p], &local));
    }

    let mut verts = Vec::with_capacity(nv);
    for v in 0..nv {
        let mut out = [R::zero(); 3];
        for k in 0..nk {
            let w = tpl.skin_weights[v * nk + k];
            if w == 0.0 {
                continue;
            }
            let rel = [
                shaped[v][0] - rest_j[k][0],
                shaped[v][1] - rest_j[k][1],
                shaped[v][2] - rest_j[k][2],
            ];
            let r = matvec3(&g_rot[k], &rel);
            for c in 0..3 {
                out[c] += R::cst(w) * (r[c] + g_t[k][c]);
            }
        }
        verts.push(out);
    }
    (verts, g_t)
}

/// Which frame the root pose of a [`BodyParams`] is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "frame", content = "pose", rename_all = "snake_case")]
pub enum Root {
    World(SE3Pose),
    Camera(SE3Pose),
}

impl Root {
    pub fn pose(&self) -> &SE3Pose {
        match self {
            Root::World(p) | Root::Camera(p) => p,
        }
    }

    /// World-frame root given the camera-to-world transform `cam_to_world`.
    pub fn to_world(&self, cam_to_world: &SE3Pose) -> SE3Pose {
        match self {
            Root::World(p) => *p,
            Root::Camera(p) => compose_root(cam_to_world, p),
        }
    }

    pub fn to_camera(&self, cam_to_world: &SE3Pose) -> SE3Pose {
        match self {
            Root::World(p) => decompose_root(p, cam_to_world),
            Root::Camera(p) => *p,
        }
    }
}

/// Pose, shape and expression coefficients plus the authoritative root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub root: Root,
}

impl BodyParams {
    /// Rest pose with the given root.
    pub fn rest(tpl: &BodyTemplate, root: Root) -> Self {
        Self {
            theta: vec![[0.0; 3]; tpl.dims.n_theta()],
            beta: vec![0.0; tpl.dims.n_beta],
            alpha: vec![0.0; tpl.dims.n_alpha],
            root,
        }
    }

    pub fn check(&self, tpl: &BodyTemplate) -> Result<()> {
        let d = tpl.dims;
        if self.theta.len() != d.n_theta() || self.beta.len() != d.n_beta || self.alpha.len() != d.n_alpha {
            return Err(Error::Contract(format!(
                "body params (θ {}, β {}, α {}) do not match template (θ {}, β {}, α {})",
                self.theta.len(),
                self.beta.len(),
                self.alpha.len(),
                d.n_theta(),
                d.n_beta,
                d.n_alpha
            )));
        }
        Ok(())
    }

    pub fn theta_flat(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyMesh {
    pub verts: Vec<Vec3>,
    pub joints: Vec<Vec3>,
}

/// Poses the template and applies the authoritative root rigidly.
pub fn pose_body(tpl: &BodyTemplate, p: &BodyParams) -> Result<BodyMesh> {
    p.check(tpl)?;
    let (verts, joints) = pose_local(tpl, &p.theta_flat(), &p.beta, &p.alpha);
    let root = p.root.pose();
    let place = |a: &[f64; 3]| root.transform_point(&Vec3::new(a[0], a[1], a[2]));
    Ok(BodyMesh {
        verts: verts.iter().map(place).collect(),
        joints: joints.iter().map(place).collect(),
    })
}

/// `P = T · P^cam`.
pub fn compose_root(t: &SE3Pose, p_cam: &SE3Pose) -> SE3Pose {
    t.compose(p_cam)
}

/// `P^cam = T⁻¹ · P`.
pub fn decompose_root(p: &SE3Pose, t: &SE3Pose) -> SE3Pose {
    t.inverse().compose(p)
}

/// Skinning as a differentiable tape op. Inputs, concatenated:
/// θ `(K−1)·3`, β, α, raw root quaternion `(w, x, y, z)`, root translation.
/// Output: `V·3` vertices followed by `K·3` joints, in the root's frame.
pub struct BodySkinFn<'a> {
    pub tpl: &'a BodyTemplate,
}

impl BodySkinFn<'_> {
    pub fn input_len(&self) -> usize {
        let d = self.tpl.dims;
        d.n_theta() * 3 + d.n_beta + d.n_alpha + 7
    }
}

impl SmoothFn for BodySkinFn<'_> {
    fn n_in(&self) -> usize {
        self.input_len()
    }

    fn n_out(&self) -> usize {
        (self.tpl.dims.n_verts + self.tpl.dims.n_joints) * 3
    }

    fn eval<R: Real>(&self, x: &[R]) -> Vec<R> {
        let d = self.tpl.dims;
        let nt = d.n_theta() * 3;
        let (theta, rest) = x.split_at(nt);
        let (beta, rest) = rest.split_at(d.n_beta);
        let (alpha, rest) = rest.split_at(d.n_alpha);
        let rot = quat_to_mat_r([rest[0], rest[1], rest[2], rest[3]]);
        let t = [rest[4], rest[5], rest[6]];
        let (verts, joints) = pose_local(self.tpl, theta, beta, alpha);
        let mut out = Vec::with_capacity(self.n_out());
        for p in verts.iter().chain(&joints) {
            let r = matvec3(&rot, p);
            out.extend_from_slice(&[r[0] + t[0], r[1] + t[1], r[2] + t[2]]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{jacobian, Dual};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_params(tpl: &BodyTemplate, rng: &mut ChaCha8Rng) -> BodyParams {
        BodyParams {
            theta: (0..tpl.dims.n_theta())
                .map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)])
                .collect(),
            beta: (0..tpl.dims.n_beta).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            alpha: vec![],
            root: Root::World(SE3Pose::from_axis_angle(
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-3.0..3.0), 0.2),
                Vec3::new(rng.gen_range(-2.0..2.0), 0.9, rng.gen_range(-2.0..2.0)),
            )),
        }
    }

    #[test]
    fn rodrigues_trivial_cases() {
        assert_eq!(rodrigues(&Vec3::zeros()), Matrix3::identity());
        let r = rodrigues(&Vec3::new(0.0, 0.0, PI));
        assert!((r - Matrix3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0))).norm() < 1e-15);
    }

    #[test]
    fn rodrigues_matches_quaternion_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..100 {
            let s = if i % 10 == 0 { 1e-5 } else { 3.0 };
            let aa = Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
            let oracle = UnitQuaternion::from_scaled_axis(aa).to_rotation_matrix();
            assert!((rodrigues(&aa) - oracle.matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn rodrigues_is_differentiable_at_zero() {
        let r = rodrigues_r([Dual::var(0.0), Dual::new(0.0, 0.0), Dual::new(0.0, 0.0)]);
        // d/dx of R at 0 is the generator [e_x]×
        assert_eq!(r[2][1].d, 1.0);
        assert_eq!(r[1][2].d, -1.0);
    }

    #[test]
    fn rest_pose_reproduces_template() {
        let tpl = BodyTemplate::desk(0);
        let p = BodyParams::rest(&tpl, Root::World(SE3Pose::identity()));
        let m = pose_body(&tpl, &p).unwrap();
        for (v, q) in m.verts.iter().enumerate() {
            for c in 0..3 {
                assert!((q[c] - tpl.template[v * 3 + c]).abs() <= 1e-12);
            }
        }
        let t = Vec3::new(1.0, 2.0, 3.0);
        let p = BodyParams::rest(&tpl, Root::World(SE3Pose::from_translation(t)));
        let shifted = pose_body(&tpl, &p).unwrap();
        for (a, b) in shifted.verts.iter().zip(&m.verts) {
            assert!((a - b - t).norm() < 1e-12);
        }
    }

    #[test]
    fn root_equivariance() {
        let tpl = BodyTemplate::desk(0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = random_params(&tpl, &mut rng);
            let base = pose_body(&tpl, &p).unwrap();
            let g = SE3Pose::from_axis_angle(
                Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
            );
            let mut q = p.clone();
            q.root = Root::World(g.compose(p.root.pose()));
            let moved = pose_body(&tpl, &q).unwrap();
            for (a, b) in moved.verts.iter().zip(&base.verts) {
                assert!((a - g.transform_point(b)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let tpl = BodyTemplate::desk(0);
        let mut p = BodyParams::rest(&tpl, Root::World(SE3Pose::identity()));
        p.beta.push(0.0);
        assert!(matches!(pose_body(&tpl, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn root_composition() {
        let p_cam = SE3Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let t = SE3Pose::from_axis_angle(Vec3::new(0.0, 0.0, PI / 2.0), Vec3::zeros());
        let w = compose_root(&t, &p_cam);
        assert!((w.translation - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert_eq!(compose_root(&SE3Pose::identity(), &p_cam), p_cam);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let rnd = |rng: &mut ChaCha8Rng| {
                SE3Pose::from_axis_angle(
                    Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                    Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
                )
            };
            let (t, pc) = (rnd(&mut rng), rnd(&mut rng));
            let back = decompose_root(&compose_root(&t, &pc), &t);
            assert!(back.rotation_angle_to(&pc) < 1e-12);
            assert!((back.translation - pc.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn skin_fn_matches_pose_body() {
        let tpl = BodyTemplate::desk(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&tpl, &mut rng);
        let mesh = pose_body(&tpl, &p).unwrap();
        let root = p.root.pose();
        let mut x = p.theta_flat();
        x.extend(&p.beta);
        x.extend(root.quat_wxyz().map(|v| 2.0 * v));
        x.extend(root.translation.iter());
        let f = BodySkinFn { tpl: &tpl };
        let out = f.eval(&x);
        for (v, q) in mesh.verts.iter().enumerate() {
            for c in 0..3 {
                assert!((out[v * 3 + c] - q[c]).abs() < 1e-12);
            }
        }
        let (_, jac) = jacobian(&f, &x);
        assert!(jac.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_is_linear_at_rest_pose() {
        let tpl = BodyTemplate::desk(0);
        let nb = tpl.dims.n_beta;
        let base = BodyParams::rest(&tpl, Root::World(SE3Pose::identity()));
        for b in 0..nb {
            let mut p = base.clone();
            p.beta[b] = 1e-3;
            let m = pose_body(&tpl, &p).unwrap();
            for (v, q) in m.verts.iter().enumerate() {
                for c in 0..3 {
                    let slope = (q[c] - tpl.template[v * 3 + c]) / 1e-3;
                    assert!((slope - tpl.shape_basis[(v * 3 + c) * nb + b]).abs() < 1e-9);
                }
            }
        }
    }
}
