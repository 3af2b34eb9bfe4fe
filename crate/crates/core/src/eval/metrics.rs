use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::body::joints::PELVIS;
use crate::error::{Error, Result};
use crate::geometry::{align_joints, mean_distance, rms_distance, umeyama, umeyama_min_rank, AlignMode, Vec3};

pub const MM: f64 = 1000.0;
pub const SEGMENT_LEN: usize = 100;
pub const RTE_FORMULA: &str = "RTE = 100 * mean_t |root_pred(t) - root_gt(t)| / sum_t |root_gt(t) - root_gt(t-1)|, after rigid alignment";

/// Per person-frame errors in millimetres.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub mrpe: f64,
}

fn centered(pts: &[Vec3], c: &Vec3) -> Vec<Vec3> {
    pts.iter().map(|p| p - c).collect()
}

fn check_pair(op: &'static str, a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, &[b.len(), 3], &[a.len(), 3]));
    }
    Ok(())
}

/// Camera-frame errors for one matched person. Joint 0 is the pelvis.
pub fn local_metrics(pred_j: &[Vec3], pred_v: &[Vec3], gt_j: &[Vec3], gt_v: &[Vec3]) -> Result<LocalMetrics> {
    check_pair("local_metrics joints", pred_j, gt_j)?;
    check_pair("local_metrics verts", pred_v, gt_v)?;
    let (pp, gp) = (pred_j[PELVIS], gt_j[PELVIS]);
    let pj = centered(pred_j, &pp);
    let gj = centered(gt_j, &gp);
    let pa = align_joints(pred_j, gt_j, AlignMode::ProcrustesSim)?;
    Ok(LocalMetrics {
        mpjpe: mean_distance(&pj, &gj) * MM,
        pa_mpjpe: mean_distance(&pa, gt_j) * MM,
        pve: mean_distance(&centered(pred_v, &pp), &centered(gt_v, &gp)) * MM,
        mrpe: (pp - gp).norm() * MM,
    })
}

/// Consecutive windows of `len` frames; the last may be shorter.
pub fn segments(n: usize, len: usize) -> Vec<Range<usize>> {
    (0..n).step_by(len.max(1)).map(|s| s..(s + len).min(n)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub start: usize,
    pub end: usize,
    pub w_mpjpe: f64,
    pub wa_mpjpe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalMetrics {
    pub segments: Vec<SegmentMetrics>,
    /// Frame-weighted means over segments, in millimetres.
    pub w_mpjpe: f64,
    pub wa_mpjpe: f64,
    /// Percent; `None` when the ground-truth root never moves.
    pub rte: Option<f64>,
}

fn flat(frames: &[Vec<Vec3>]) -> Vec<Vec3> {
    frames.iter().flatten().copied().collect()
}

fn aligned_error(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], fit: Range<usize>, scale: bool) -> Result<f64> {
    let sim = umeyama_min_rank(&flat(&pred[fit.clone()]), &flat(&gt[fit]), scale, 0)?;
    let p: Vec<Vec3> = flat(pred).iter().map(|x| sim.apply(x)).collect();
    Ok(mean_distance(&p, &flat(gt)))
}

/// World-frame motion errors for one track, per frame `K` joints with the
/// pelvis first. `w_scale` lets the first-two-frames fit include scale.
pub fn global_metrics(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], w_scale: bool) -> Result<GlobalMetrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("global_metrics", &[gt.len()], &[pred.len()]));
    }
    for (p, g) in pred.iter().zip(gt) {
        check_pair("global_metrics", p, g)?;
    }
    let mut segs = Vec::new();
    let (mut w_sum, mut wa_sum) = (0.0, 0.0);
    for r in segments(pred.len(), SEGMENT_LEN) {
        let (p, g) = (&pred[r.clone()], &gt[r.clone()]);
        let w = aligned_error(p, g, 0..p.len().min(2), w_scale)? * MM;
        let wa = aligned_error(p, g, 0..p.len(), false)? * MM;
        w_sum += w * r.len() as f64;
        wa_sum += wa * r.len() as f64;
        segs.push(SegmentMetrics {
            start: r.start,
            end: r.end,
            w_mpjpe: w,
            wa_mpjpe: wa,
        });
    }
    let n = pred.len() as f64;
    let roots_p: Vec<Vec3> = pred.iter().map(|f| f[PELVIS]).collect();
    let roots_g: Vec<Vec3> = gt.iter().map(|f| f[PELVIS]).collect();
    Ok(GlobalMetrics {
        segments: segs,
        w_mpjpe: w_sum / n,
        wa_mpjpe: wa_sum / n,
        rte: rte(&roots_p, &roots_g)?,
    })
}

/// Root translation error in percent of the ground-truth path length.
pub fn rte(pred: &[Vec3], gt: &[Vec3]) -> Result<Option<f64>> {
    check_pair("rte", pred, gt)?;
    let path: f64 = gt.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    if !(path > 1e-12) {
        return Ok(None);
    }
    let sim = umeyama_min_rank(pred, gt, false, 0)?;
    let p: Vec<Vec3> = pred.iter().map(|x| sim.apply(x)).collect();
    Ok(Some(mean_distance(&p, gt) / path * 100.0))
}

/// RMS of camera positions after Sim(3) alignment, in metres.
pub fn ate(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("ate", &[gt.len(), 3], &[pred.len(), 3]));
    }
    if pred.len() < 3 {
        return Err(Error::Contract(format!("ate needs at least 3 poses, got {}", pred.len())));
    }
    let sim = umeyama(pred, gt, true)?;
    let p: Vec<Vec3> = pred.iter().map(|x| sim.apply(x)).collect();
    Ok(rms_distance(&p, gt))
}

/// RMS of ground-truth positions about their centroid: the error left by
/// a motionless estimate, for which Sim(3) alignment is undefined.
pub fn static_ate(gt: &[Vec3]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let c = gt.iter().sum::<Vec3>() / gt.len() as f64;
    rms_distance(gt, &vec![c; gt.len()])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta: f64,
    pub n: usize,
}

/// Metric depth scores without any scale or shift alignment. Pixels with
/// non-positive or non-finite ground truth are skipped.
pub fn depth_metrics(pred: &[f64], gt: &[f64], valid: Option<&[bool]>) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || valid.is_some_and(|v| v.len() != gt.len()) {
        return Err(Error::shape("depth_metrics", &[gt.len()], &[pred.len()]));
    }
    let (mut rel, mut hit, mut n) = (0.0, 0usize, 0usize);
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if valid.is_some_and(|v| !v[i]) || !(g > 0.0) || !g.is_finite() {
            continue;
        }
        n += 1;
        rel += (p - g).abs() / g;
        if p > 0.0 && (p / g).max(g / p) < 1.25 {
            hit += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("no valid depth pixels".into()));
    }
    Ok(DepthMetrics {
        abs_rel: rel / n as f64,
        delta: hit as f64 / n as f64,
        n,
    })
}

/// Precision, recall and F1 of detected head patches against labels.
pub fn detection_f1(pred: &[usize], gt: &[usize]) -> (f64, f64, f64) {
    let tp = pred.iter().filter(|p| gt.contains(p)).count() as f64;
    let prec = if pred.is_empty() { 1.0 } else { tp / pred.len() as f64 };
    let rec = if gt.is_empty() { 1.0 } else { tp / gt.len() as f64 };
    let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    (prec, rec, f1)
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn mask_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SE3Pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn body(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0), rng.gen_range(2.0..4.0)))
            .collect()
    }

    #[test]
    fn local_identity_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (j, v) = (body(&mut rng, 12), body(&mut rng, 64));
        assert_eq!(local_metrics(&j, &v, &j, &v).unwrap(), LocalMetrics::default());
        let off = Vec3::new(0.05, 0.0, 0.0);
        let jo: Vec<Vec3> = j.iter().map(|p| p + off).collect();
        let vo: Vec<Vec3> = v.iter().map(|p| p + off).collect();
        let m = local_metrics(&jo, &vo, &j, &v).unwrap();
        assert!(m.mpjpe < 1e-9 && m.pve < 1e-9 && m.pa_mpjpe < 1e-6);
        assert!((m.mrpe - 50.0).abs() < 1e-9);
    }

    #[test]
    fn scaled_body_is_procrustes_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (j, v) = (body(&mut rng, 12), body(&mut rng, 64));
        let c = j[PELVIS];
        let s = |p: &Vec3| c + (p - c) * 1.1;
        let js: Vec<Vec3> = j.iter().map(s).collect();
        let vs: Vec<Vec3> = v.iter().map(s).collect();
        let m = local_metrics(&js, &vs, &j, &v).unwrap();
        assert!(m.pa_mpjpe < 1e-6);
        // every joint moves by 0.1·|p − pelvis|
        let expect = j.iter().map(|p| (p - c).norm() * 0.1).sum::<f64>() / 12.0 * MM;
        assert!((m.mpjpe - expect).abs() < 1e-9);
    }

    #[test]
    fn segment_boundaries() {
        let s = segments(250, 100);
        assert_eq!(s, vec![0..100, 100..200, 200..250]);
        assert_eq!(segments(100, 100), vec![0..100]);
        assert!(segments(0, 100).is_empty());
    }

    fn walk(n: usize) -> Vec<Vec<Vec3>> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = body(&mut rng, 12);
        (0..n)
            .map(|t| {
                let off = Vec3::new(0.02 * t as f64, 0.0, 0.01 * (t as f64 * 0.1).sin());
                shape.iter().map(|p| p + off).collect()
            })
            .collect()
    }

    #[test]
    fn rigid_motion_is_absorbed() {
        let gt = walk(120);
        let z = global_metrics(&gt, &gt, false).unwrap();
        assert_eq!((z.w_mpjpe, z.wa_mpjpe, z.rte), (0.0, 0.0, Some(0.0)));
        assert_eq!(ate(&flat(&gt), &flat(&gt)).unwrap(), 0.0);
        let tf = SE3Pose::from_axis_angle(Vec3::new(0.3, -1.0, 0.2), Vec3::new(2.0, 0.5, -1.0));
        let pred: Vec<Vec<Vec3>> = gt.iter().map(|f| f.iter().map(|p| tf.transform_point(p)).collect()).collect();
        let m = global_metrics(&pred, &gt, false).unwrap();
        assert!(m.w_mpjpe < 1e-6 && m.wa_mpjpe < 1e-6 && m.rte.unwrap() < 1e-6);
        assert_eq!(m.segments.len(), 2);
        assert_eq!((m.segments[1].start, m.segments[1].end), (100, 120));
    }

    #[test]
    fn late_drift_hurts_first_frame_alignment_more() {
        let gt = walk(100);
        let pred: Vec<Vec<Vec3>> = gt
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let d = if t > 50 { 0.01 * (t - 50) as f64 } else { 0.0 };
                f.iter().map(|p| p + Vec3::new(0.0, d, 0.0)).collect()
            })
            .collect();
        let m = global_metrics(&pred, &gt, false).unwrap();
        assert!(m.w_mpjpe > m.wa_mpjpe);
    }

    #[test]
    fn motionless_root_has_no_rte() {
        let f = walk(1).remove(0);
        let gt = vec![f.clone(); 5];
        assert_eq!(global_metrics(&gt, &gt, false).unwrap().rte, None);
    }

    #[test]
    fn ate_cases() {
        let gt: Vec<Vec3> = (0..30).map(|t| Vec3::new((t as f64 * 0.2).cos(), 0.1 * t as f64, (t as f64 * 0.2).sin())).collect();
        assert!(ate(&gt, &gt).unwrap() < 1e-12);
        let half: Vec<Vec3> = gt.iter().map(|p| p * 0.5).collect();
        assert!(ate(&half, &gt).unwrap() < 1e-9);
        let still = vec![Vec3::new(1.0, 2.0, 3.0); 30];
        assert!(matches!(ate(&still, &gt), Err(Error::Degenerate(_))));
        assert!(ate(&gt[..2], &gt[..2]).is_err());
    }

    #[test]
    fn ate_noise_matches_direct_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2000;
        let sigma = 0.01;
        let gt: Vec<Vec3> = (0..n)
            .map(|t| Vec3::new((t as f64 * 0.01).cos() * 3.0, 0.001 * t as f64, (t as f64 * 0.013).sin() * 2.0))
            .collect();
        let dist = rand_distr::Normal::new(0.0, sigma).unwrap();
        let pred: Vec<Vec3> = gt
            .iter()
            .map(|p| p + Vec3::new(rng.sample(dist), rng.sample(dist), rng.sample(dist)))
            .collect();
        // direct scalar-loop RMSE without alignment
        let mut s = 0.0;
        for (p, g) in pred.iter().zip(&gt) {
            for k in 0..3 {
                s += (p[k] - g[k]) * (p[k] - g[k]);
            }
        }
        let direct = (s / n as f64).sqrt();
        let a = ate(&pred, &gt).unwrap();
        assert!(a <= direct + 1e-12);
        assert!((a - direct).abs() / direct < 0.01);
        assert!((a - sigma * 3f64.sqrt()).abs() / (sigma * 3f64.sqrt()) < 0.05);
    }

    #[test]
    fn depth_cases() {
        let gt: Vec<f64> = (1..=50).map(|i| i as f64 * 0.1).collect();
        let m = depth_metrics(&gt, &gt, None).unwrap();
        assert_eq!((m.abs_rel, m.delta), (0.0, 1.0));
        let p13: Vec<f64> = gt.iter().map(|d| d * 1.3).collect();
        let m = depth_metrics(&p13, &gt, None).unwrap();
        assert!((m.abs_rel - 0.3).abs() < 1e-12 && m.delta == 0.0);
        let p12: Vec<f64> = gt.iter().map(|d| d * 1.2).collect();
        let m = depth_metrics(&p12, &gt, None).unwrap();
        assert!((m.abs_rel - 0.2).abs() < 1e-12 && m.delta == 1.0);
        assert!(depth_metrics(&gt, &gt, Some(&[false; 50])).is_err());
    }

    #[test]
    fn f1_and_iou() {
        assert_eq!(detection_f1(&[1, 2], &[1, 2]).2, 1.0);
        let (p, r, f) = detection_f1(&[1, 5], &[1, 2]);
        assert_eq!((p, r, f), (0.5, 0.5, 0.5));
        assert_eq!(mask_iou(&[true, true, false], &[true, false, false]), 0.5);
        assert_eq!(mask_iou(&[false], &[false]), 1.0);
    }
}
