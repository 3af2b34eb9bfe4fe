use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    ate, depth_metrics, global_metrics, local_metrics, SegmentMetrics, RTE_FORMULA,
};
use crate::body::{pose_body, BodyTemplate};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{SE3Pose, Vec3};
use crate::recurrence::{read_stream, FrameRecord, PersonRecord};
use crate::synth::{Dataset, Frame};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Include scale in the first-two-frames alignment.
    pub w_align_scale: bool,
}

/// Largest patch-grid distance between a predicted and a labelled head for
/// the two to be matched.
pub const MATCH_RADIUS: usize = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub pve: Option<f64>,
    pub mrpe: Option<f64>,
    pub w_mpjpe: Option<f64>,
    pub wa_mpjpe: Option<f64>,
    pub rte: Option<f64>,
    pub ate: Option<f64>,
    pub abs_rel: Option<f64>,
    pub delta: Option<f64>,
}

impl Metrics {
    pub const NAMES: [&'static str; 10] = [
        "mpjpe", "pa_mpjpe", "pve", "mrpe", "w_mpjpe", "wa_mpjpe", "rte", "ate", "abs_rel", "delta",
    ];

    pub fn values(&self) -> [Option<f64>; 10] {
        [
            self.mpjpe,
            self.pa_mpjpe,
            self.pve,
            self.mrpe,
            self.w_mpjpe,
            self.wa_mpjpe,
            self.rte,
            self.ate,
            self.abs_rel,
            self.delta,
        ]
    }

    pub fn undefined(&self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .filter(|(_, v)| v.is_none())
            .map(|(n, _)| *n)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSegments {
    pub track_id: u64,
    pub frames: usize,
    pub segments: Vec<SegmentMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub gt_frames: usize,
    pub pred_frames: usize,
    /// Matched over labelled person-frames.
    pub person_coverage: f64,
    pub metrics: Metrics,
    pub tracks: Vec<TrackSegments>,
    #[serde(skip)]
    weights: Weights,
}

/// Sample counts used to pool sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Weights {
    person_frames: usize,
    track_frames: usize,
    tracks_rte: usize,
    depth_px: usize,
    labelled: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceReport>,
    pub aggregate: Metrics,
    /// Fraction of ground-truth frames with a prediction record.
    pub coverage: f64,
    pub person_coverage: f64,
    pub rte_formula: String,
    pub options: EvalOptions,
}

fn v3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Camera-frame joints and vertices of a predicted person.
fn person_mesh(p: &PersonRecord, tpl: &BodyTemplate) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if let (Some(j), Some(v)) = (&p.joints_cam, &p.verts_cam) {
        return Ok((j.iter().map(v3).collect(), v.iter().map(v3).collect()));
    }
    let m = pose_body(tpl, &p.params_cam())?;
    Ok((m.joints, m.verts))
}

fn patch_dist(a: usize, b: usize, gw: usize) -> usize {
    let (ai, aj) = (a / gw, a % gw);
    let (bi, bj) = (b / gw, b % gw);
    ai.abs_diff(bi).max(aj.abs_diff(bj))
}

/// Greedy one-to-one matching of labelled people to predictions by head
/// patch distance. Returns `(gt index, pred index)` pairs.
pub fn match_people(frame: &Frame, rec: &FrameRecord, gw: usize) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (gi, g) in frame.gt.people.iter().enumerate() {
        let Some(gp) = g.head_patch else { continue };
        for (pi, p) in rec.people.iter().enumerate() {
            let d = patch_dist(gp, p.patch, gw);
            if d <= MATCH_RADIUS {
                cands.push((d, gi, pi));
            }
        }
    }
    cands.sort();
    let (mut used_g, mut used_p) = (Vec::new(), Vec::new());
    let mut out = Vec::new();
    for (_, gi, pi) in cands {
        if !used_g.contains(&gi) && !used_p.contains(&pi) {
            used_g.push(gi);
            used_p.push(pi);
            out.push((gi, pi));
        }
    }
    out.sort();
    out
}

struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn new() -> Self {
        Self { sum: 0.0, n: 0 }
    }
    fn add(&mut self, v: f64, w: usize) {
        self.sum += v * w as f64;
        self.n += w;
    }
    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Scores one sequence. `pred_depth[t]` holds the predicted depth map of
/// frame `t` when available.
pub fn evaluate_sequence(
    name: &str,
    frames: &[Frame],
    preds: &[FrameRecord],
    pred_depth: &[Option<Vec<f64>>],
    tpl: &BodyTemplate,
    patch: usize,
    opts: &EvalOptions,
) -> Result<SequenceReport> {
    let by_t: BTreeMap<usize, usize> = preds.iter().enumerate().map(|(i, r)| (r.t, i)).collect();
    let gw = frames.first().map_or(1, |f| f.width() / patch);
    let mut local = [Acc::new(), Acc::new(), Acc::new(), Acc::new()];
    let mut labelled = 0;
    let mut tracks: BTreeMap<u64, (Vec<Vec<Vec3>>, Vec<Vec<Vec3>>)> = BTreeMap::new();
    let (mut cam_p, mut cam_g) = (Vec::new(), Vec::new());
    let (mut rel, mut delta) = (Acc::new(), Acc::new());

    for f in frames {
        labelled += f.gt.people.iter().filter(|p| p.head_patch.is_some()).count();
        let Some(&ri) = by_t.get(&f.gt.t) else { continue };
        let rec = &preds[ri];
        let pose: SE3Pose = rec.pose.to_pose();
        let gt_pose = f.gt.pose.to_record().to_pose();
        cam_p.push(pose.translation);
        cam_g.push(f.gt.pose.translation);
        for (gi, pi) in match_people(f, rec, gw) {
            let g = &f.gt.people[gi];
            let gm = pose_body(tpl, &g.params_cam)?;
            let (pj, pv) = person_mesh(&rec.people[pi], tpl)?;
            let m = local_metrics(&pj, &pv, &gm.joints, &gm.verts)?;
            for (a, v) in local.iter_mut().zip([m.mpjpe, m.pa_mpjpe, m.pve, m.mrpe]) {
                a.add(v, 1);
            }
            // same arithmetic on both sides: camera joints through the frame pose
            let gw_j = gm.joints.iter().map(|p| gt_pose.transform_point(p)).collect();
            let pw_j = pj.iter().map(|p| pose.transform_point(p)).collect();
            let e = tracks.entry(g.track_id).or_default();
            e.0.push(pw_j);
            e.1.push(gw_j);
        }
        if let Some(Some(d)) = pred_depth.get(ri) {
            if let Ok(dm) = depth_metrics(d, &f.depth, None) {
                rel.add(dm.abs_rel, dm.n);
                delta.add(dm.delta, dm.n);
            }
        }
    }

    let (mut w, mut wa, mut rte) = (Acc::new(), Acc::new(), Acc::new());
    let mut track_reports = Vec::new();
    for (id, (p, g)) in &tracks {
        let gm = global_metrics(p, g, opts.w_align_scale)?;
        w.add(gm.w_mpjpe, p.len());
        wa.add(gm.wa_mpjpe, p.len());
        if let Some(r) = gm.rte {
            rte.add(r, 1);
        }
        track_reports.push(TrackSegments {
            track_id: *id,
            frames: p.len(),
            segments: gm.segments,
        });
    }
    let ate_v = if cam_p.len() >= 3 { ate(&cam_p, &cam_g).ok() } else { None };
    let matched = local[0].n;
    Ok(SequenceReport {
        name: name.to_string(),
        gt_frames: frames.len(),
        pred_frames: frames.iter().filter(|f| by_t.contains_key(&f.gt.t)).count(),
        person_coverage: if labelled == 0 { 1.0 } else { matched as f64 / labelled as f64 },
        metrics: Metrics {
            mpjpe: local[0].mean(),
            pa_mpjpe: local[1].mean(),
            pve: local[2].mean(),
            mrpe: local[3].mean(),
            w_mpjpe: w.mean(),
            wa_mpjpe: wa.mean(),
            rte: rte.mean(),
            ate: ate_v,
            abs_rel: rel.mean(),
            delta: delta.mean(),
        },
        tracks: track_reports,
        weights: Weights {
            person_frames: matched,
            track_frames: w.n,
            tracks_rte: rte.n,
            depth_px: rel.n,
            labelled,
        },
    })
}

impl EvalReport {
    /// Pools per-sequence results, weighting each metric by its sample count.
    pub fn from_sequences(sequences: Vec<SequenceReport>, opts: EvalOptions) -> Self {
        let mut acc: Vec<Acc> = (0..10).map(|_| Acc::new()).collect();
        let (mut gt, mut pred, mut matched, mut labelled) = (0, 0, 0, 0);
        for s in &sequences {
            let wt = s.weights;
            let ws = [
                wt.person_frames,
                wt.person_frames,
                wt.person_frames,
                wt.person_frames,
                wt.track_frames,
                wt.track_frames,
                wt.tracks_rte,
                1,
                wt.depth_px,
                wt.depth_px,
            ];
            for ((a, v), w) in acc.iter_mut().zip(s.metrics.values()).zip(ws) {
                if let Some(v) = v {
                    a.add(v, w);
                }
            }
            gt += s.gt_frames;
            pred += s.pred_frames;
            matched += wt.person_frames;
            labelled += wt.labelled;
        }
        let m: Vec<Option<f64>> = acc.iter().map(Acc::mean).collect();
        Self {
            aggregate: Metrics {
                mpjpe: m[0],
                pa_mpjpe: m[1],
                pve: m[2],
                mrpe: m[3],
                w_mpjpe: m[4],
                wa_mpjpe: m[5],
                rte: m[6],
                ate: m[7],
                abs_rel: m[8],
                delta: m[9],
            },
            coverage: if gt == 0 { 0.0 } else { pred as f64 / gt as f64 },
            person_coverage: if labelled == 0 { 1.0 } else { matched as f64 / labelled as f64 },
            sequences,
            rte_formula: RTE_FORMULA.into(),
            options: opts,
        }
    }

    /// Names of aggregate metrics that could not be computed.
    pub fn undefined(&self) -> Vec<&'static str> {
        self.aggregate.undefined()
    }

    /// Fails when coverage is incomplete or any aggregate is undefined.
    pub fn check_strict(&self) -> Result<()> {
        let und = self.undefined();
        if self.coverage < 1.0 || !und.is_empty() {
            return Err(Error::EstimationFailed(format!(
                "coverage {:.3}, undefined metrics: [{}]",
                self.coverage,
                und.join(", ")
            )));
        }
        Ok(())
    }

    /// Aligned text table: one row per sequence plus the aggregate.
    pub fn table(&self) -> String {
        let cols = ["MPJPE", "PA-MPJPE", "PVE", "MRPE", "W-MPJPE", "WA-MPJPE", "RTE%", "ATE", "AbsRel", "d<1.25"];
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.rte_formula);
        let _ = write!(s, "{:<12}", "sequence");
        for c in cols {
            let _ = write!(s, "{c:>10}");
        }
        s.push('\n');
        let row = |s: &mut String, name: &str, m: &Metrics| {
            let _ = write!(s, "{name:<12}");
            for v in m.values() {
                match v {
                    Some(v) => {
                        let _ = write!(s, "{v:>10.3}");
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "n/a");
                    }
                }
            }
            s.push('\n');
        };
        for q in &self.sequences {
            row(&mut s, &q.name, &q.metrics);
        }
        row(&mut s, "ALL", &self.aggregate);
        let _ = writeln!(s, "coverage {:.4}  person coverage {:.4}", self.coverage, self.person_coverage);
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let jp = dir.join("report.json");
        let js = serde_json::to_string_pretty(self).map_err(|e| Error::json(&jp, e))?;
        fs::write(&jp, js).map_err(|e| Error::io(&jp, e))?;
        let tp = dir.join("report.txt");
        fs::write(&tp, self.table()).map_err(|e| Error::io(&tp, e))
    }
}

/// Stream file of a sequence inside a prediction directory.
pub fn stream_path(pred_dir: &Path, seq: &str) -> std::path::PathBuf {
    pred_dir.join(format!("{seq}.jsonl"))
}

/// Scores every listed sequence against `pred_dir/<seq>.jsonl`, in parallel.
/// A missing stream counts as zero coverage for that sequence.
pub fn evaluate_dataset(
    ds: &Dataset,
    seqs: &[String],
    pred_dir: &Path,
    opts: &EvalOptions,
    workers: Option<usize>,
) -> Result<EvalReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let patch = ds.config().patch;
    let reports = pool.install(|| {
        seqs.par_iter()
            .map(|name| {
                let frames = ds.load_sequence(name)?;
                let path = stream_path(pred_dir, name);
                let preds = if path.exists() { read_stream(&path)? } else { Vec::new() };
                let depth = preds
                    .iter()
                    .map(|r| {
                        r.depth_file
                            .as_ref()
                            .map(|f| Tensor::load(pred_dir.join(f)).map(Tensor::into_data))
                            .transpose()
                    })
                    .collect::<Result<Vec<_>>>()?;
                evaluate_sequence(name, &frames, &preds, &depth, &ds.template, patch, opts)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(EvalReport::from_sequences(reports, *opts))
}

/// Ground truth written in prediction-stream form, for self-checks and as
/// a schema reference. Depth maps go to `dir/<stem>/` when `depth` is set.
pub fn gt_records(frames: &[Frame], tpl: &BodyTemplate, dir: &Path, stem: &str, depth: bool) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let mut people = Vec::new();
        for g in &f.gt.people {
            let Some(hp) = g.head_patch else { continue };
            let m = pose_body(tpl, &g.params_cam)?;
            let xyz = |v: &Vec3| [v.x, v.y, v.z];
            people.push(PersonRecord {
                track_id: g.track_id,
                patch: hp,
                score: 1.0,
                theta: g.params_cam.theta.clone(),
                beta: g.params_cam.beta.clone(),
                alpha: g.params_cam.alpha.clone(),
                root_cam: g.params_cam.root.pose().to_record(),
                root_world: g.params_world.root.pose().to_record(),
                joints_cam: Some(m.joints.iter().map(xyz).collect()),
                verts_cam: Some(m.verts.iter().map(xyz).collect()),
                mesh_file: None,
            });
        }
        let mut rec = FrameRecord {
            t: f.gt.t,
            pose: f.gt.pose.to_record(),
            focal: Some(f.gt.intrinsics.fx),
            people,
            depth_file: None,
            mask_file: None,
            ply_cam: None,
            ply_world: None,
        };
        if depth {
            let sub = Path::new(stem);
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            let name = format!("depth_{:05}.t4dr", f.gt.t);
            Tensor::new(vec![f.height(), f.width()], f.depth.clone())?.save(d.join(&name))?;
            rec.depth_file = Some(sub.join(name).to_string_lossy().into_owned());
        }
        out.push(rec);
    }
    Ok(out)
}
