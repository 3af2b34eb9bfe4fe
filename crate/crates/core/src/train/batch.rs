use serde::{Deserialize, Serialize};

use super::losses::{loss_human, loss_pointmap, loss_pose, LossWeights, PersonTarget, REPROJ_MIN_Z};
use crate::body::{pose_body, BodyTemplate};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, SE3Pose, Vec3};
use crate::netcore::{to_patch_order, FrameVars, Graph, Group, Model};
use crate::synth::Frame;

/// Supervision for one frame, with pixel quantities in patch order and
/// world quantities relative to the window's first camera.
#[derive(Clone, Debug)]
pub struct FrameTargets {
    pub cam_pts: Vec<Vec3>,
    pub world_pts: Vec<Vec3>,
    pub valid: Vec<bool>,
    pub pose: SE3Pose,
    pub heads: Vec<f64>,
    pub mask: Vec<f64>,
    pub people: Vec<PersonTarget>,
    pub intr: CameraIntrinsics,
    pub width: usize,
}

fn points_patch_order(pts: &[Vec3], grid: (usize, usize), p: usize) -> Vec<Vec3> {
    let flat: Vec<f64> = pts.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    to_patch_order(&flat, grid, p, 3)
        .chunks(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect()
}

/// Camera-frame supervision for every person with a labelled head.
pub fn person_targets(frame: &Frame, tpl: &BodyTemplate) -> Result<Vec<PersonTarget>> {
    let intr = frame.gt.intrinsics;
    let w = frame.width() as f64;
    let mut out = Vec::new();
    for p in &frame.gt.people {
        let Some(patch) = p.head_patch else { continue };
        let mesh = pose_body(tpl, &p.params_cam)?;
        let root = p.params_cam.root.pose();
        let r = root.rotation_matrix();
        let mut coeffs = p.params_cam.theta_flat();
        coeffs.extend_from_slice(&p.params_cam.beta);
        coeffs.extend_from_slice(&p.params_cam.alpha);
        let joints_2d = mesh
            .joints
            .iter()
            .map(|j| {
                let z = j.z.max(REPROJ_MIN_Z);
                [(intr.fx * j.x / z + intr.cx) / w, (intr.fy * j.y / z + intr.cy) / w]
            })
            .collect();
        out.push(PersonTarget {
            patch,
            coeffs,
            rot: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            trans: [root.translation.x, root.translation.y, root.translation.z],
            verts: mesh.verts,
            joints_2d,
        });
    }
    Ok(out)
}

/// Builds the targets of `frame` inside a window whose first camera is `origin`.
pub fn frame_targets(frame: &Frame, origin: &SE3Pose, tpl: &BodyTemplate, patch: usize) -> Result<FrameTargets> {
    let (w, h) = (frame.width(), frame.height());
    let grid = (h / patch, w / patch);
    let cam = frame.xcam()?;
    let rel = origin.inverse().compose(&frame.gt.pose);
    let world: Vec<Vec3> = cam.points.iter().map(|p| rel.transform_point(p)).collect();
    let valid: Vec<f64> = cam.confidence.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect();
    Ok(FrameTargets {
        cam_pts: points_patch_order(&cam.points, grid, patch),
        world_pts: points_patch_order(&world, grid, patch),
        valid: to_patch_order(&valid, grid, patch, 1).iter().map(|&v| v > 0.5).collect(),
        pose: rel,
        heads: frame.head_map(patch),
        mask: to_patch_order(&frame.mask(), grid, patch, 1),
        people: person_targets(frame, tpl)?,
        intr: frame.gt.intrinsics,
        width: w,
    })
}

/// Targets for an ordered window of frames; the first defines the world frame.
pub fn window_targets(frames: &[&Frame], tpl: &BodyTemplate, patch: usize) -> Result<Vec<FrameTargets>> {
    let origin = frames[0].gt.pose;
    frames.iter().map(|f| frame_targets(f, &origin, tpl, patch)).collect()
}

/// Loss terms, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pointmap: f64,
    pub pose: f64,
    pub det: f64,
    pub smpl: f64,
    pub mesh: f64,
    pub reproj: f64,
    pub mask: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 7] = ["pointmap", "pose", "det", "smpl", "mesh", "reproj", "mask"];

    pub fn values(&self) -> [f64; 7] {
        [self.pointmap, self.pose, self.det, self.smpl, self.mesh, self.reproj, self.mask]
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        w.w_pointmap * self.pointmap
            + w.w_pose * self.pose
            + w.w_det * self.det
            + w.w_smpl * self.smpl
            + w.w_mesh * self.mesh
            + w.w_reproj * self.reproj
            + w.w_mask * self.mask
    }

    pub fn add(&mut self, o: &LossTerms, s: f64) {
        self.pointmap += s * o.pointmap;
        self.pose += s * o.pose;
        self.det += s * o.det;
        self.smpl += s * o.smpl;
        self.mesh += s * o.mesh;
        self.reproj += s * o.reproj;
        self.mask += s * o.mask;
    }
}

/// Every term of one frame on the tape, plus the weighted total.
pub fn frame_loss(
    tape: &mut Tape,
    model: &Model,
    tpl: &BodyTemplate,
    out: &FrameVars,
    tg: &FrameTargets,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let cfg = &model.cfg;
    let n = cfg.n_patches() * cfg.mask_pixels();
    let cam = tape.reshape(out.cam_raw, &[n, 4])?;
    let world = tape.reshape(out.world_raw, &[n, 4])?;
    let lc = loss_pointmap(tape, cam, &tg.cam_pts, Some(&tg.valid), w.conf_reg)?;
    let lw = loss_pointmap(tape, world, &tg.world_pts, Some(&tg.valid), w.conf_reg)?;
    let pointmap = tape.add(lc, lw)?;
    let pose = loss_pose(tape, out.pose_raw, &tg.pose)?;
    let det = tape.bce_with_logits(out.det_logits, &tg.heads)?;
    let mask = tape.bce_with_logits(out.mask_logits, &tg.mask)?;
    let human = loss_human(tape, tpl, out.human_raw, &tg.people, &tg.intr, tg.width)?;
    let parts = [
        (pointmap, w.w_pointmap),
        (pose, w.w_pose),
        (det, w.w_det),
        (human.smpl, w.w_smpl),
        (human.mesh, w.w_mesh),
        (human.reproj, w.w_reproj),
        (mask, w.w_mask),
    ];
    let mut total = tape.scale(parts[0].0, parts[0].1);
    for &(v, k) in &parts[1..] {
        let s = tape.scale(v, k);
        total = tape.add(total, s)?;
    }
    let val = |v: Var| tape.value(v).item();
    let terms = LossTerms {
        pointmap: val(pointmap),
        pose: val(pose),
        det: val(det),
        smpl: val(human.smpl),
        mesh: val(human.mesh),
        reproj: val(human.reproj),
        mask: val(mask),
    };
    Ok((total, terms))
}

/// Result of one unrolled window.
pub struct WindowResult {
    pub total: f64,
    pub terms: LossTerms,
    /// Per-parameter gradients when requested.
    pub grads: Option<Vec<Vec<f64>>>,
}

/// Unrolls the vanilla recurrence over a window with prompts teacher-forced
/// at the labelled head patches and sums the frame losses. Gradients are
/// computed when `frozen` is given (the groups listed there stay fixed).
pub fn window_loss(
    model: &Model,
    tpl: &BodyTemplate,
    images: &[&Tensor],
    targets: &[FrameTargets],
    w: &LossWeights,
    frozen: Option<&[Group]>,
) -> Result<WindowResult> {
    let mut g = Graph::new(&model.store, frozen.is_some(), frozen.unwrap_or(&[]));
    let mut state = g.p(model.state0_id());
    let mut total: Option<Var> = None;
    let mut terms = LossTerms::default();
    for (img, tg) in images.iter().zip(targets) {
        let u: Vec<usize> = tg.people.iter().map(|p| p.patch).collect();
        let out = model.frame_forward(&mut g, img, &u, state, false)?;
        let (t, parts) = frame_loss(&mut g.tape, model, tpl, &out, tg, w)?;
        terms.add(&parts, 1.0);
        total = Some(match total {
            Some(acc) => g.tape.add(acc, t)?,
            None => t,
        });
        state = out.state;
    }
    let total = total.ok_or_else(|| crate::error::Error::Contract("empty window".into()))?;
    let value = g.tape.value(total).item();
    let grads = if frozen.is_some() {
        g.tape.backward(total)?;
        Some(g.param_grads())
    } else {
        None
    };
    Ok(WindowResult {
        total: value,
        terms,
        grads,
    })
}
