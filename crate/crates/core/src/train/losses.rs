use serde::{Deserialize, Serialize};

use crate::body::{quat_to_mat_r, BodySkinFn, BodyTemplate};
use crate::diffcore::{Real, SmoothFn, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, SE3Pose, Vec3};

/// Per-term loss weights and the confidence regularizer λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_pointmap: f64,
    pub w_pose: f64,
    pub w_det: f64,
    pub w_smpl: f64,
    pub w_mesh: f64,
    pub w_reproj: f64,
    pub w_mask: f64,
    pub conf_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_pointmap: 1.0,
            w_pose: 1.0,
            w_det: 1.0,
            w_smpl: 1.0,
            w_mesh: 1.0,
            w_reproj: 0.1,
            w_mask: 1.0,
            conf_reg: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_pointmap,
            self.w_pose,
            self.w_det,
            self.w_smpl,
            self.w_mesh,
            self.w_reproj,
            self.w_mask,
            self.conf_reg,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Confidence-aware pointmap regression. `raw` is `N×4`: predicted xyz and
/// the raw confidence, mapped to `1 + exp(raw)`. Averages
/// `conf·‖x̂ − x‖ − λ·log conf` over valid rows.
pub fn loss_pointmap(tape: &mut Tape, raw: Var, gt: &[Vec3], valid: Option<&[bool]>, lambda: f64) -> Result<Var> {
    let shape = tape.shape(raw).to_vec();
    if shape != [gt.len(), 4] {
        return Err(Error::shape("loss_pointmap", &[gt.len(), 4], &shape));
    }
    let (raw, gt): (Var, Vec<Vec3>) = match valid {
        Some(m) if m.iter().any(|v| !v) => {
            let idx: Vec<usize> = (0..gt.len()).filter(|&i| m[i]).collect();
            if idx.is_empty() {
                return Ok(tape.constant(Tensor::scalar(0.0)));
            }
            (tape.rows(raw, &idx)?, idx.iter().map(|&i| gt[i]).collect())
        }
        _ => (raw, gt.to_vec()),
    };
    let n = gt.len();
    let xyz = tape.slice(raw, 1, 0, 3)?;
    let c = tape.slice(raw, 1, 3, 4)?;
    let c = tape.exp(c)?;
    let conf = tape.add_scalar(c, 1.0);
    let target = tape.constant(Tensor::new(vec![n, 3], gt.iter().flat_map(|p| [p.x, p.y, p.z]).collect())?);
    let diff = tape.sub(xyz, target)?;
    let res = tape.row_norm(diff)?;
    let res = tape.reshape(res, &[n, 1])?;
    let weighted = tape.mul(conf, res)?;
    let logc = tape.log(conf)?;
    let reg = tape.scale(logc, lambda);
    let per = tape.sub(weighted, reg)?;
    Ok(tape.mean(per))
}

/// Plain-value form of [`loss_pointmap`] with explicit confidences.
pub fn pointmap_loss_value(pred: &[Vec3], conf: &[f64], gt: &[Vec3], lambda: f64) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(conf)
        .zip(gt)
        .map(|((p, c), g)| c * (p - g).norm() - lambda * c.ln())
        .sum::<f64>()
        / n
}

/// Rotation geodesic plus translation distance between a raw
/// `(w, x, y, z, tx, ty, tz)` prediction and a fixed target pose.
pub struct PoseLossFn {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl PoseLossFn {
    pub fn new(target: &SE3Pose) -> Self {
        let tr = target.translation;
        Self {
            q: target.quat_wxyz(),
            t: [tr.x, tr.y, tr.z],
        }
    }
}

impl SmoothFn for PoseLossFn {
    fn n_in(&self) -> usize {
        7
    }

    fn n_out(&self) -> usize {
        1
    }

    fn eval<R: Real>(&self, x: &[R]) -> Vec<R> {
        let n = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3]).sqrt();
        let q = [x[0] / n, x[1] / n, x[2] / n, x[3] / n];
        // conj(target) ⊗ q
        let [w0, x0, y0, z0] = self.q.map(R::cst);
        let (w1, x1, y1, z1) = (q[0], q[1], q[2], q[3]);
        let w = w0 * w1 + x0 * x1 + y0 * y1 + z0 * z1;
        let vx = w0 * x1 - x0 * w1 - y0 * z1 + z0 * y1;
        let vy = w0 * y1 + x0 * z1 - y0 * w1 - z0 * x1;
        let vz = w0 * z1 - x0 * y1 + y0 * x1 - z0 * w1;
        let v2 = vx * vx + vy * vy + vz * vz;
        let angle = if v2.value() < 1e-24 {
            R::zero()
        } else {
            R::cst(2.0) * v2.sqrt().atan2(w.abs())
        };
        let d: Vec<R> = (0..3).map(|i| x[4 + i] - R::cst(self.t[i])).collect();
        let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let dist = if d2.value() < 1e-24 { R::zero() } else { d2.sqrt() };
        vec![angle + dist]
    }
}

/// Geodesic rotation angle plus translation L2, weighted 1:1. `raw` is `1×7`.
pub fn loss_pose(tape: &mut Tape, raw: Var, target: &SE3Pose) -> Result<Var> {
    let f = PoseLossFn::new(target);
    let y = tape.custom(&f, &[raw], &[1])?;
    tape.reshape(y, &[])
}

/// Unit-normalized quaternion `(w, x, y, z)` to a row-major rotation matrix.
pub struct QuatMatFn;

impl SmoothFn for QuatMatFn {
    fn n_in(&self) -> usize {
        4
    }

    fn n_out(&self) -> usize {
        9
    }

    fn eval<R: Real>(&self, x: &[R]) -> Vec<R> {
        let m = quat_to_mat_r([x[0], x[1], x[2], x[3]]);
        m.iter().flatten().copied().collect()
    }
}

/// Pinhole projection of `k` camera-frame joints, divided by the image
/// width; depth is clamped below at 0.1 m.
pub struct ProjectFn {
    pub intr: CameraIntrinsics,
    pub width: f64,
    pub k: usize,
}

pub const REPROJ_MIN_Z: f64 = 0.1;

impl SmoothFn for ProjectFn {
    fn n_in(&self) -> usize {
        3 * self.k
    }

    fn n_out(&self) -> usize {
        2 * self.k
    }

    fn eval<R: Real>(&self, x: &[R]) -> Vec<R> {
        let mut out = Vec::with_capacity(2 * self.k);
        let s = 1.0 / self.width;
        for j in 0..self.k {
            let z = x[3 * j + 2].max_c(REPROJ_MIN_Z);
            out.push((R::cst(self.intr.fx) * x[3 * j] / z + R::cst(self.intr.cx)) * R::cst(s));
            out.push((R::cst(self.intr.fy) * x[3 * j + 1] / z + R::cst(self.intr.cy)) * R::cst(s));
        }
        out
    }
}

/// Ground truth for one supervised person in camera coordinates.
#[derive(Clone, Debug)]
pub struct PersonTarget {
    /// Head patch the prompt is built at.
    pub patch: usize,
    /// θ, β and α, flattened.
    pub coeffs: Vec<f64>,
    /// Root rotation matrix, row-major.
    pub rot: [f64; 9],
    pub trans: [f64; 3],
    pub verts: Vec<Vec3>,
    /// Projected joints divided by the image width.
    pub joints_2d: Vec<[f64; 2]>,
}

/// The five human terms for one frame, each averaged over people.
pub struct HumanTerms {
    pub smpl: Var,
    pub mesh: Var,
    pub reproj: Var,
}

fn const_rows(tape: &mut Tape, rows: usize, data: Vec<f64>) -> Result<Var> {
    let cols = data.len() / rows.max(1);
    Ok(tape.constant(Tensor::new(vec![rows, cols], data)?))
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// ℒ_smpl, ℒ_mesh and ℒ_reproj for the rows of `raw` (`n×human_out`),
/// matched one-to-one with `people`.
pub fn loss_human(
    tape: &mut Tape,
    tpl: &BodyTemplate,
    raw: Option<Var>,
    people: &[PersonTarget],
    intr: &CameraIntrinsics,
    width: usize,
) -> Result<HumanTerms> {
    let Some(raw) = raw else {
        if !people.is_empty() {
            return Err(Error::Contract("human targets without predictions".into()));
        }
        return Ok(HumanTerms {
            smpl: zero(tape),
            mesh: zero(tape),
            reproj: zero(tape),
        });
    };
    let n = people.len();
    let dims = tpl.dims;
    let nc = dims.n_theta() * 3 + dims.n_beta + dims.n_alpha;
    let cols = nc + 7;
    if tape.shape(raw) != [n, cols] {
        return Err(Error::shape("loss_human", &[n, cols], tape.shape(raw)));
    }
    let (nv, nk) = (dims.n_verts, dims.n_joints);
    let skin = BodySkinFn { tpl };
    let proj = ProjectFn {
        intr: *intr,
        width: width as f64,
        k: nk,
    };
    let (mut smpl, mut mesh, mut reproj) = (Vec::new(), Vec::new(), Vec::new());
    for (i, p) in people.iter().enumerate() {
        let row = tape.slice(raw, 0, i, i + 1)?;
        let coeffs = tape.slice(row, 1, 0, nc)?;
        let quat = tape.slice(row, 1, nc, nc + 4)?;
        let trans = tape.slice(row, 1, nc + 4, cols)?;
        let rot = tape.custom(&QuatMatFn, &[quat], &[1, 9])?;
        let pred = tape.concat(&[coeffs, rot, trans], 1)?;
        let mut target = p.coeffs.clone();
        target.extend_from_slice(&p.rot);
        target.extend_from_slice(&p.trans);
        let target = const_rows(tape, 1, target)?;
        let d = tape.sub(pred, target)?;
        smpl.push(tape.l1(d));

        let out = tape.custom(&skin, &[row], &[nv + nk, 3])?;
        let verts = tape.slice(out, 0, 0, nv)?;
        let gv = const_rows(tape, nv, p.verts.iter().flat_map(|v| [v.x, v.y, v.z]).collect())?;
        let d = tape.sub(verts, gv)?;
        mesh.push(tape.l1(d));

        let joints = tape.slice(out, 0, nv, nv + nk)?;
        let joints = tape.reshape(joints, &[1, 3 * nk])?;
        let uv = tape.custom(&proj, &[joints], &[nk, 2])?;
        let g2 = const_rows(tape, nk, p.joints_2d.iter().flatten().copied().collect())?;
        let d = tape.sub(uv, g2)?;
        reproj.push(tape.l1(d));
    }
    let avg = |tape: &mut Tape, xs: Vec<Var>| -> Result<Var> {
        if xs.is_empty() {
            return Ok(zero(tape));
        }
        let k = xs.len();
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = tape.add(acc, x)?;
        }
        Ok(tape.scale(acc, 1.0 / k as f64))
    };
    Ok(HumanTerms {
        smpl: avg(tape, smpl)?,
        mesh: avg(tape, mesh)?,
        reproj: avg(tape, reproj)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn pointmap_zero_residual_limit() {
        let gt: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 1.0, 2.0)).collect();
        let mut tape = Tape::new();
        let raw: Vec<f64> = gt.iter().flat_map(|p| [p.x, p.y, p.z, 0.3]).collect();
        let x = tape.leaf(Tensor::new(vec![5, 4], raw).unwrap(), true);
        let l = loss_pointmap(&mut tape, x, &gt, None, 0.2).unwrap();
        let conf = 1.0 + 0.3f64.exp();
        assert!((tape.value(l).item() + 0.2 * conf.ln()).abs() < 1e-12);
        let l0 = loss_pointmap(&mut tape, x, &gt, None, 0.0).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);
        // growing confidence lowers the loss at zero residual
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap()[3] < 0.0);
    }

    #[test]
    fn pointmap_gradient_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt: Vec<Vec3> = (0..16).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen_range(1.0..3.0))).collect();
        let x = Tensor::from_fn(vec![16, 4], |_| rng.gen_range(-1.0..1.0));
        let r = grad_check(|t, v| loss_pointmap(t, v, &gt, None, 0.2), &x, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-5, "{}", r.max_rel_err);
        let valid: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        let r = grad_check(|t, v| loss_pointmap(t, v, &gt, Some(&valid), 0.2), &x, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-5);
        assert!(r.analytic[0..4].iter().all(|&g| g == 0.0));
        // masked loss equals the loss on the kept rows
        let kept: Vec<usize> = (0..16).filter(|&i| valid[i]).collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let a = loss_pointmap(&mut tape, xv, &gt, Some(&valid), 0.2).unwrap();
        let pred: Vec<Vec3> = kept.iter().map(|&i| Vec3::new(x.row(i)[0], x.row(i)[1], x.row(i)[2])).collect();
        let conf: Vec<f64> = kept.iter().map(|&i| 1.0 + x.row(i)[3].exp()).collect();
        let g: Vec<Vec3> = kept.iter().map(|&i| gt[i]).collect();
        assert!((tape.value(a).item() - pointmap_loss_value(&pred, &conf, &g, 0.2)).abs() < 1e-12);
    }

    #[test]
    fn pose_loss_cases() {
        let id = SE3Pose::identity();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 7], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), true);
        let l = loss_pose(&mut tape, x, &id).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let half = SE3Pose::from_axis_angle(Vec3::new(0.0, 0.0, PI), Vec3::zeros());
        let l = loss_pose(&mut tape, x, &half).unwrap();
        assert!((tape.value(l).item() - PI).abs() < 1e-12);
        // unnormalized raw quaternion and translation offset
        let x2 = tape.leaf(Tensor::new(vec![1, 7], vec![2.0, 0.0, 0.0, 0.0, 3.0, 4.0, 0.0]).unwrap(), true);
        let l = loss_pose(&mut tape, x2, &id).unwrap();
        assert!((tape.value(l).item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pose_loss_gradient() {
        let target = SE3Pose::from_axis_angle(Vec3::new(0.2, -0.4, 0.3), Vec3::new(0.5, -1.0, 2.0));
        let x = Tensor::new(vec![1, 7], vec![0.9, 0.1, -0.3, 0.2, 0.1, 0.2, 0.3]).unwrap();
        let r = grad_check(|t, v| loss_pose(t, v, &target), &x, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }

    #[test]
    fn quat_matrix_matches_pose() {
        let p = SE3Pose::from_axis_angle(Vec3::new(0.3, 0.5, -0.2), Vec3::zeros());
        let m = QuatMatFn.eval(&p.quat_wxyz());
        let r = p.rotation_matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i * 3 + j] - r[(i, j)]).abs() < 1e-12);
            }
        }
    }
}
