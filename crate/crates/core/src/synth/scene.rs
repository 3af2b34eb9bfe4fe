use std::f64::consts::{PI, TAU};

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spline::NaturalSpline;
use crate::body::{joints, pose_body, BodyParams, BodyTemplate, Root};
use crate::error::{Error, Result};
use crate::geometry::{look_at, CameraIntrinsics, SE3Pose, Vec3};

/// Generator settings. Everything downstream is a deterministic function
/// of these values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Total sequence count; the last `val_sequences` form the validation split.
    pub sequences: usize,
    pub val_sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub patch: usize,
    pub people_min: usize,
    pub people_max: usize,
    pub n_boxes: usize,
    /// Half side of the square room, meters.
    pub room_half: f64,
    pub room_height: f64,
    pub fps: f64,
    pub template_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sequences: 240,
            val_sequences: 40,
            frames: 16,
            width: 64,
            height: 64,
            focal: 56.0,
            patch: 8,
            people_min: 1,
            people_max: 2,
            n_boxes: 3,
            room_half: 6.0,
            room_height: 3.5,
            fps: 10.0,
            template_seed: 0,
        }
    }
}

impl SynthConfig {
    /// Pseudo-image channels: inverse depth, normal xyz, one slot per person.
    pub fn channels(&self) -> usize {
        4 + self.people_max
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.people_min == 0 || self.people_min > self.people_max || self.people_max > 4 {
            return bad(format!(
                "people range [{}, {}] must lie within [1, 4]",
                self.people_min, self.people_max
            ));
        }
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.sequences == 0 || self.val_sequences > self.sequences {
            return bad(format!(
                "need at least one sequence and val ≤ total ({} of {})",
                self.val_sequences, self.sequences
            ));
        }
        if self.patch == 0 || !self.width.is_multiple_of(self.patch) || !self.height.is_multiple_of(self.patch) {
            return bad(format!("frame {}x{} is not a multiple of patch {}", self.width, self.height, self.patch));
        }
        if !(self.focal > 0.0 && self.fps > 0.0 && self.room_half > 4.5 && self.room_height > 2.5) {
            return bad("focal and fps must be positive; room at least 9 m wide and 2.5 m high".into());
        }
        Ok(())
    }
}

/// Axis-aligned box resting on the floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObj {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// One walker: fixed shape and pose offsets, a ground path, a gait phase.
#[derive(Clone, Debug)]
pub struct PersonSpec {
    pub track_id: u64,
    pub slot: usize,
    pub beta: Vec<f64>,
    pub offsets: Vec<[f64; 3]>,
    pub path: NaturalSpline,
    pub phase0: f64,
    pub pelvis_height: f64,
    /// Path parameter per frame and cumulative walked distance.
    pub s: Vec<f64>,
    pub dist: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    pub index: usize,
    pub frames: usize,
    pub boxes: Vec<BoxObj>,
    pub people: Vec<PersonSpec>,
    pub camera: Vec<SE3Pose>,
    pub intrinsics: CameraIntrinsics,
}

const STRIDE: f64 = 1.3;

pub(crate) fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn camera_path_rng(rng: &mut ChaCha8Rng, frames: usize) -> Vec<SE3Pose> {
    let n_wp = if frames <= 2 { 2 } else { 2 + frames.div_ceil(40) };
    let mut angle = rng.gen_range(0.0..TAU);
    let mut eyes = Vec::with_capacity(n_wp);
    let mut targets = Vec::with_capacity(n_wp);
    for _ in 0..n_wp {
        let r = rng.gen_range(3.0..4.0);
        let h = rng.gen_range(1.3..2.0);
        eyes.push(Vec3::new(r * angle.cos(), h, r * angle.sin()));
        targets.push(Vec3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(0.7..1.1),
            rng.gen_range(-0.3..0.3),
        ));
        angle += rng.gen_range(-0.35..0.35);
    }
    let (eye, target) = (NaturalSpline::new(eyes), NaturalSpline::new(targets));
    let up = Vec3::new(0.0, 1.0, 0.0);
    (0..frames)
        .map(|t| {
            let s = t as f64 * eye.max_param() / (frames - 1) as f64;
            look_at(&eye.eval(s), &target.eval(s), &up)
        })
        .collect()
}

/// Smooth camera-to-world trajectory around the origin: a natural spline
/// through random waypoints on a ring, looking at a slowly drifting target.
pub fn camera_path(seed: u64, frames: usize) -> Result<Vec<SE3Pose>> {
    if frames < 2 {
        return Err(Error::Contract(format!("camera path needs at least 2 frames, got {frames}")));
    }
    Ok(camera_path_rng(&mut ChaCha8Rng::seed_from_u64(seed), frames))
}

fn sample_person(
    rng: &mut ChaCha8Rng,
    tpl: &BodyTemplate,
    slot: usize,
    frames: usize,
) -> Result<PersonSpec> {
    let nb = tpl.dims.n_beta;
    let beta: Vec<f64> = (0..nb).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let jitter = Normal::new(0.0, 0.08).expect("finite");
    let offsets: Vec<[f64; 3]> = (0..tpl.dims.n_theta())
        .map(|_| [jitter.sample(rng), jitter.sample(rng), jitter.sample(rng)])
        .collect();

    let n_wp = 2 + frames / 20;
    let mut p = Vec3::new(rng.gen_range(-1.2..1.2), 0.0, rng.gen_range(-1.2..1.2));
    let mut wps = vec![p];
    for _ in 1..n_wp {
        let a = rng.gen_range(0.0..TAU);
        let step = rng.gen_range(0.6..1.6);
        p += Vec3::new(step * a.cos(), 0.0, step * a.sin());
        let r = (p.x * p.x + p.z * p.z).sqrt();
        if r > 2.0 {
            p *= 2.0 / r;
        }
        wps.push(p);
    }
    let path = NaturalSpline::new(wps);
    // parameter per frame: waypoints spread evenly over the sequence
    let s: Vec<f64> = (0..frames)
        .map(|t| t as f64 * path.max_param() / (frames - 1).max(1) as f64)
        .collect();
    let mut dist = vec![0.0; frames];
    for t in 1..frames {
        dist[t] = dist[t - 1] + (path.eval(s[t]) - path.eval(s[t - 1])).norm();
    }

    let rest = BodyParams {
        theta: vec![[0.0; 3]; tpl.dims.n_theta()],
        beta: beta.clone(),
        alpha: vec![0.0; tpl.dims.n_alpha],
        root: Root::World(SE3Pose::identity()),
    };
    let mesh = pose_body(tpl, &rest)?;
    let min_y = mesh.verts.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
    Ok(PersonSpec {
        track_id: slot as u64,
        slot,
        beta,
        offsets,
        path,
        phase0: rng.gen_range(0.0..TAU),
        pelvis_height: -min_y,
        s,
        dist,
    })
}

impl SceneSpec {
    /// Samples scene `index` of a dataset seeded with `cfg.seed`.
    pub fn sample(cfg: &SynthConfig, tpl: &BodyTemplate, index: usize, frames: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = scene_rng(cfg.seed, index);
        let n_people = rng.gen_range(cfg.people_min..=cfg.people_max);
        let camera = camera_path_rng(&mut rng, frames);
        let mut boxes = Vec::with_capacity(cfg.n_boxes);
        for _ in 0..cfg.n_boxes {
            let a = rng.gen_range(0.0..TAU);
            let r = rng.gen_range(1.0..2.4);
            let (hx, hz) = (rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5));
            let h = rng.gen_range(0.3..1.2);
            let (cx, cz) = (r * a.cos(), r * a.sin());
            boxes.push(BoxObj {
                min: [cx - hx, 0.0, cz - hz],
                max: [cx + hx, h, cz + hz],
            });
        }
        let people = (0..n_people)
            .map(|k| sample_person(&mut rng, tpl, k, frames))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: cfg.seed,
            index,
            frames,
            boxes,
            people,
            camera,
            intrinsics: cfg.intrinsics(),
        })
    }

    /// World-frame body parameters of person `k` at frame `t`.
    pub fn body_params(&self, k: usize, t: usize) -> BodyParams {
        use joints::*;
        let p = &self.people[k];
        let pos = p.path.eval(p.s[t]);
        let vel = p.path.derivative(p.s[t]);
        let yaw = if vel.x.hypot(vel.z) > 1e-6 { vel.x.atan2(vel.z) } else { 0.0 };
        let phi = p.phase0 + TAU * p.dist[t] / STRIDE;
        let (sp, sk) = (phi.sin(), (phi + 1.2).sin().max(0.0));
        let skr = (phi + 1.2 + PI).sin().max(0.0);
        let mut theta = p.offsets.clone();
        let mut add = |j: usize, x: f64| theta[j - 1][0] += x;
        add(L_HIP, -0.45 * sp);
        add(R_HIP, 0.45 * sp);
        add(L_KNEE, 0.6 * sk);
        add(R_KNEE, 0.6 * skr);
        add(L_SHOULDER, 0.35 * sp);
        add(R_SHOULDER, -0.35 * sp);
        add(L_ELBOW, -0.3);
        add(R_ELBOW, -0.3);
        let rot = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), yaw);
        BodyParams {
            theta,
            beta: p.beta.clone(),
            alpha: Vec::new(),
            root: Root::World(SE3Pose::new(rot, Vec3::new(pos.x, p.pelvis_height, pos.z))),
        }
    }
}
