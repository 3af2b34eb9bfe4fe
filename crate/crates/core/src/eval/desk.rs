use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{ate, depth_metrics, local_metrics, static_ate, MM};
use super::report::match_people;
use crate::body::{joints::PELVIS, pose_body, BodyTemplate};
use crate::error::{Error, Result};
use crate::geometry::{mean_distance, Vec3};
use crate::netcore::Model;
use crate::recurrence::{ExportOptions, StreamContext, StreamOptions};
use crate::synth::Frame;

/// Dataset statistics behind the trivial baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Mean ground-truth depth over all pixels.
    pub mean_depth: f64,
    /// Mean pelvis-centred camera-frame joints.
    pub mean_joints: Vec<[f64; 3]>,
}

impl Baselines {
    pub fn from_frames<'a>(seqs: impl IntoIterator<Item = &'a [Frame]>, tpl: &BodyTemplate) -> Result<Self> {
        let (mut dsum, mut dn) = (0.0, 0usize);
        let mut jsum = vec![Vec3::zeros(); tpl.n_joints()];
        let mut jn = 0usize;
        for seq in seqs {
            for f in seq {
                for &d in &f.depth {
                    if d > 0.0 && d.is_finite() {
                        dsum += d;
                        dn += 1;
                    }
                }
                for p in f.gt.people.iter().filter(|p| p.head_patch.is_some()) {
                    let j = pose_body(tpl, &p.params_cam)?.joints;
                    for (s, x) in jsum.iter_mut().zip(&j) {
                        *s += x - j[PELVIS];
                    }
                    jn += 1;
                }
            }
        }
        if dn == 0 || jn == 0 {
            return Err(Error::Degenerate("baselines need depth and labelled people".into()));
        }
        Ok(Self {
            mean_depth: dsum / dn as f64,
            mean_joints: jsum.iter().map(|s| s / jn as f64).map(|v| [v.x, v.y, v.z]).collect(),
        })
    }
}

/// Scene-level scores of a model on held-out sequences, each next to its
/// trivial baseline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneScores {
    pub frames: usize,
    pub det_precision: f64,
    pub det_recall: f64,
    pub det_f1: f64,
    pub mask_iou: f64,
    /// Matched person-frames used for the body errors.
    pub matched: usize,
    pub mpjpe: f64,
    pub mpjpe_mean_body: f64,
    /// Mean over sequences, metres.
    pub ate: f64,
    pub ate_static: f64,
    pub abs_rel: f64,
    pub abs_rel_mean_depth: f64,
}

/// Streams each sequence from a fresh state and scores detections, masks,
/// bodies, trajectories and depth.
pub fn score_model(model: &Model, seqs: &[Vec<Frame>], tpl: &BodyTemplate, base: &Baselines, opts: &StreamOptions) -> Result<SceneScores> {
    let patch = model.cfg.patch;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let (mut inter, mut union) = (0usize, 0usize);
    let (mut mp, mut mb, mut matched) = (0.0, 0.0, 0usize);
    let (mut rel, mut rel_b, mut px) = (0.0, 0.0, 0usize);
    let (mut ate_sum, mut ate_b, mut n_seq) = (0.0, 0.0, 0usize);
    let mean_j: Vec<Vec3> = base.mean_joints.iter().map(|a| Vec3::new(a[0], a[1], a[2])).collect();
    let mut frames = 0;
    for seq in seqs {
        let mut ctx = StreamContext::new(model, opts.clone())?;
        let (mut pred_t, mut gt_t) = (Vec::new(), Vec::new());
        for f in seq {
            frames += 1;
            let out = ctx.step(&f.image)?;
            let gt_heads: Vec<usize> = f.gt.people.iter().filter_map(|p| p.head_patch).collect();
            let pred_heads: Vec<usize> = out.humans.iter().map(|h| h.patch).collect();
            let hits = pred_heads.iter().filter(|p| gt_heads.contains(p)).count();
            tp += hits;
            fp += pred_heads.len() - hits;
            fneg += gt_heads.len() - hits;

            let pm: Vec<bool> = out.mask.iter().map(|&m| m > 0.5).collect();
            let gm: Vec<bool> = f.mask().iter().map(|&m| m > 0.5).collect();
            inter += pm.iter().zip(&gm).filter(|(a, b)| **a && **b).count();
            union += pm.iter().zip(&gm).filter(|(a, b)| **a || **b).count();

            let rec = out.to_record(Some(tpl), &ExportOptions::default(), Path::new("."), "")?;
            for (gi, pi) in match_people(f, &rec, f.width() / patch) {
                let g = pose_body(tpl, &f.gt.people[gi].params_cam)?;
                let p = pose_body(tpl, &out.humans[pi].params)?;
                mp += local_metrics(&p.joints, &p.verts, &g.joints, &g.verts)?.mpjpe;
                let gc: Vec<Vec3> = g.joints.iter().map(|j| j - g.joints[PELVIS]).collect();
                mb += mean_distance(&mean_j, &gc) * MM;
                matched += 1;
            }

            let dm = depth_metrics(&out.x_cam.depth(), &f.depth, None)?;
            let db = depth_metrics(&vec![base.mean_depth; f.depth.len()], &f.depth, None)?;
            rel += dm.abs_rel * dm.n as f64;
            rel_b += db.abs_rel * db.n as f64;
            px += dm.n;

            pred_t.push(out.pose.translation);
            gt_t.push(f.gt.pose.translation);
        }
        if seq.len() >= 3 {
            ate_sum += ate(&pred_t, &gt_t).unwrap_or_else(|_| static_ate(&gt_t));
            ate_b += static_ate(&gt_t);
            n_seq += 1;
        }
    }
    let prec = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
    let div = |a: f64, n: usize| if n == 0 { f64::NAN } else { a / n as f64 };
    Ok(SceneScores {
        frames,
        det_precision: prec,
        det_recall: recall,
        det_f1: if prec + recall > 0.0 { 2.0 * prec * recall / (prec + recall) } else { 0.0 },
        mask_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        matched,
        mpjpe: div(mp, matched),
        mpjpe_mean_body: div(mb, matched),
        ate: div(ate_sum, n_seq),
        ate_static: div(ate_b, n_seq),
        abs_rel: div(rel, px),
        abs_rel_mean_depth: div(rel_b, px),
    })
}
