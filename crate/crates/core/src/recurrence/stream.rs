use serde::{Deserialize, Serialize};

use super::output::{FrameOutput, HumanPrediction};
use super::update::{ttt_update_rates, ChunkAligner, UpdateMode};
use crate::body::{compose_root, BodyParams, Root};
use crate::diffcore::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{weiszfeld_focal, Pointmap, SE3Pose, Vec3};
use crate::netcore::{detect_heads, pixel_shuffle, FrameVars, Graph, Model};
use crate::tracking::{TrackerConfig, TrackletBank};

pub const DEFAULT_RESET: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamOptions {
    pub mode: UpdateMode,
    /// Reset period N in frames.
    pub reset: usize,
    /// Detection threshold; the model's τ when unset.
    pub tau: Option<f64>,
    pub tracker: TrackerConfig,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            mode: UpdateMode::Vanilla,
            reset: DEFAULT_RESET,
            tau: None,
            tracker: TrackerConfig::default(),
        }
    }
}

/// Persistent per-stream state. Single writer; frames arrive in order.
#[derive(Clone, Debug)]
pub struct StreamContext<'m> {
    model: &'m Model,
    pub opts: StreamOptions,
    pub state: Tensor,
    /// Index of the next frame.
    pub t: usize,
    pub chunk: usize,
    pub aligner: ChunkAligner,
    pub bank: TrackletBank,
    last_pose: SE3Pose,
}

/// Starts a stream from the learned initial state.
pub fn init_stream(model: &Model, mode: UpdateMode, reset: usize) -> Result<StreamContext<'_>> {
    StreamContext::new(
        model,
        StreamOptions {
            mode,
            reset,
            ..StreamOptions::default()
        },
    )
}

/// Raw per-frame outputs before globalization.
struct Raw {
    cam: Pointmap,
    world: Pointmap,
    pose: SE3Pose,
    pose_fallback: bool,
    humans: Vec<(usize, f64, BodyParams, Vec<f64>, bool)>,
    mask: Vec<f64>,
    head_scores: Vec<f64>,
    state: Tensor,
}

impl<'m> StreamContext<'m> {
    pub fn new(model: &'m Model, opts: StreamOptions) -> Result<Self> {
        if opts.reset == 0 {
            return Err(Error::Contract("reset period must be at least 1 frame".into()));
        }
        if let Some(tau) = opts.tau {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
            }
        }
        opts.tracker.validate()?;
        Ok(Self {
            model,
            opts,
            state: model.initial_state(),
            t: 0,
            chunk: 0,
            aligner: ChunkAligner::new(),
            bank: TrackletBank::new(),
            last_pose: SE3Pose::identity(),
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn mode(&self) -> UpdateMode {
        self.opts.mode
    }

    fn tau(&self) -> f64 {
        self.opts.tau.unwrap_or(self.model.cfg.tau)
    }

    /// Processes the next frame.
    pub fn step(&mut self, image: &Tensor) -> Result<FrameOutput> {
        self.model.check_image(image)?;
        let mut pose_chunk_end = None;
        let mut raw = self.run(image)?;
        if self.t > 0 && self.t.is_multiple_of(self.opts.reset) {
            // close the chunk with this frame, then restart on it
            let end = self.aligner.globalize(&raw.pose);
            pose_chunk_end = Some(end);
            self.last_pose = end;
            self.reset_and_align();
            raw = self.run(image)?;
        }
        let pose = self.aligner.globalize(&raw.pose);
        let to_global = self.aligner.chunk_to_global();
        self.state = raw.state;
        self.last_pose = pose;

        let tokens: Vec<Vec<f64>> = raw.humans.iter().map(|h| h.3.clone()).collect();
        let ids = self.bank.step(self.t, &tokens, &self.opts.tracker)?.ids(tokens.len());
        let humans = raw
            .humans
            .into_iter()
            .zip(ids)
            .map(|((patch, score, params, token, root_fallback), track_id)| HumanPrediction {
                track_id,
                patch,
                score,
                root_world: compose_root(&pose, params.root.pose()),
                params,
                token,
                root_fallback,
            })
            .collect();
        let (w, h) = (self.model.cfg.width, self.model.cfg.height);
        let focal = weiszfeld_focal(&raw.cam, w as f64 / 2.0, h as f64 / 2.0).ok();
        let out = FrameOutput {
            t: self.t,
            chunk: self.chunk,
            x_world: raw.world.transformed(&to_global),
            x_cam: raw.cam,
            pose,
            pose_chunk_end,
            pose_fallback: raw.pose_fallback,
            focal,
            humans,
            mask: raw.mask,
            head_scores: raw.head_scores,
        };
        self.t += 1;
        Ok(out)
    }

    /// Closes the current chunk: the next chunk starts at the last global
    /// pose and the state returns to S₀.
    pub fn reset_and_align(&mut self) {
        self.aligner.reset(self.last_pose);
        self.state = self.model.initial_state();
        self.chunk += 1;
    }

    /// One forward pass from the current state, without touching `self`.
    fn run(&self, image: &Tensor) -> Result<Raw> {
        let model = self.model;
        let cfg = &model.cfg;
        let mut g = Graph::new(&model.store, false, &[]);
        let f = model.encode(&mut g, image)?;
        let det = model.detect_logits(&mut g, f)?;
        let head_scores: Vec<f64> = g.tape.value(det).data().iter().map(|&x| sigmoid(x)).collect();
        let u = detect_heads(&head_scores, cfg.grid(), self.tau());
        let state = g.tape.constant(self.state.clone());
        let want_gate = self.opts.mode == UpdateMode::Ttt;
        let out = model.frame_forward_encoded(&mut g, image, f, &u, state, want_gate)?;
        decode(&g, model, &out, &u, head_scores, &self.state, self.opts.mode)
    }
}

fn decode(
    g: &Graph,
    model: &Model,
    out: &FrameVars,
    u: &[usize],
    head_scores: Vec<f64>,
    prev: &Tensor,
    mode: UpdateMode,
) -> Result<Raw> {
    let cfg = &model.cfg;
    let (w, h, p) = (cfg.width, cfg.height, cfg.patch);
    let grid = cfg.grid();
    let pointmap = |v| -> Result<Pointmap> {
        let img = pixel_shuffle(g.tape.value(v).data(), grid, p, 4);
        let mut pts = Vec::with_capacity(w * h);
        let mut conf = Vec::with_capacity(w * h);
        for c in img.chunks(4) {
            pts.push(Vec3::new(c[0], c[1], c[2]));
            conf.push(1.0 + c[3].exp());
        }
        Pointmap::new(w, h, pts, conf)
    };
    let cam = pointmap(out.cam_raw)?;
    let world = pointmap(out.world_raw)?;
    let pr = g.tape.value(out.pose_raw).data();
    let (pose, pose_fallback) = SE3Pose::from_raw([pr[0], pr[1], pr[2], pr[3]], [pr[4], pr[5], pr[6]]);
    let mask: Vec<f64> = pixel_shuffle(g.tape.value(out.mask_logits).data(), grid, p, 1)
        .into_iter()
        .map(sigmoid)
        .collect();

    let mut humans = Vec::with_capacity(u.len());
    if let (Some(hr), Some(tok)) = (out.human_raw, out.h_refined) {
        let dims = cfg.body;
        let (nt, nb, na) = (dims.n_theta(), dims.n_beta, dims.n_alpha);
        let raw = g.tape.value(hr);
        let tok = g.tape.value(tok);
        for (i, &patch) in u.iter().enumerate() {
            let r = raw.row(i);
            let theta = r[..nt * 3].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let beta = r[nt * 3..nt * 3 + nb].to_vec();
            let alpha = r[nt * 3 + nb..nt * 3 + nb + na].to_vec();
            let o = nt * 3 + nb + na;
            let (root, fb) = SE3Pose::from_raw([r[o], r[o + 1], r[o + 2], r[o + 3]], [r[o + 4], r[o + 5], r[o + 6]]);
            let params = BodyParams {
                theta,
                beta,
                alpha,
                root: Root::Camera(root),
            };
            humans.push((patch, head_scores[patch], params, tok.row(i).to_vec(), fb));
        }
    }

    let proposed = g.tape.value(out.state).clone();
    let state = match mode {
        UpdateMode::Vanilla => proposed,
        UpdateMode::Ttt => {
            let gate = out
                .gate
                .as_ref()
                .ok_or_else(|| Error::Contract("gated update needs attention rates".into()))?;
            ttt_update_rates(prev, &proposed, gate)?
        }
    };
    if !state.is_finite() {
        return Err(Error::NonFinite("state became non-finite".into()));
    }
    Ok(Raw {
        cam,
        world,
        pose,
        pose_fallback,
        humans,
        mask,
        head_scores,
        state,
    })
}
