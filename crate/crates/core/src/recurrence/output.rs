use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::body::{pose_body, write_obj, BodyParams, BodyTemplate, Root};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Pointmap, PoseRecord, SE3Pose};

/// One person as read out from a refined prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanPrediction {
    pub track_id: u64,
    /// Patch index of the detected head.
    pub patch: usize,
    pub score: f64,
    /// Coefficients with the root in the camera frame.
    pub params: BodyParams,
    /// Root in the global frame.
    pub root_world: SE3Pose,
    /// Refined prompt used for association.
    pub token: Vec<f64>,
    /// Whether the raw root quaternion vanished and was replaced.
    pub root_fallback: bool,
}

impl HumanPrediction {
    pub fn root_cam(&self) -> &SE3Pose {
        self.params.root.pose()
    }
}

/// Everything emitted for one frame, in the global frame where applicable.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub t: usize,
    pub chunk: usize,
    pub x_cam: Pointmap,
    pub x_world: Pointmap,
    /// Camera-to-world pose.
    pub pose: SE3Pose,
    /// The same frame's pose under the closing chunk, on reset frames.
    pub pose_chunk_end: Option<SE3Pose>,
    pub pose_fallback: bool,
    pub focal: Option<f64>,
    pub humans: Vec<HumanPrediction>,
    /// Per-pixel foreground probability, row-major `H×W`.
    pub mask: Vec<f64>,
    /// Per-patch head probability.
    pub head_scores: Vec<f64>,
}

/// Serialized person entry of a prediction stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub track_id: u64,
    pub patch: usize,
    pub score: f64,
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub root_cam: PoseRecord,
    pub root_world: PoseRecord,
    /// Camera-frame joints; external producers may fill these instead of
    /// relying on the template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints_cam: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verts_cam: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_file: Option<String>,
}

impl PersonRecord {
    /// Body parameters with the root in the camera frame.
    pub fn params_cam(&self) -> BodyParams {
        BodyParams {
            theta: self.theta.clone(),
            beta: self.beta.clone(),
            alpha: self.alpha.clone(),
            root: Root::Camera(self.root_cam.to_pose()),
        }
    }
}

/// One line of a prediction stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: usize,
    /// Camera-to-world pose.
    pub pose: PoseRecord,
    pub focal: Option<f64>,
    pub people: Vec<PersonRecord>,
    /// Paths relative to the stream file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ply_cam: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ply_world: Option<String>,
}

/// Optional per-frame dumps written next to a stream file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportOptions {
    /// Depth maps as T4DR (needed for depth metrics).
    pub depth: bool,
    pub mask: bool,
    /// Camera- and world-frame pointmaps as binary PLY.
    pub ply: bool,
    /// Posed meshes as OBJ.
    pub obj: bool,
}

fn xyz(v: &crate::geometry::Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl FrameOutput {
    /// Builds the stream record. With a template, camera-frame joints and
    /// vertices are included. Files are written under `dir/<stem>/`.
    pub fn to_record(
        &self,
        tpl: Option<&BodyTemplate>,
        export: &ExportOptions,
        dir: &Path,
        stem: &str,
    ) -> Result<FrameRecord> {
        let sub = PathBuf::from(stem);
        let any = export.depth || export.mask || export.ply || export.obj;
        if any {
            let d = dir.join(&sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let rel = |name: String| sub.join(name).to_string_lossy().into_owned();
        let mut people = Vec::with_capacity(self.humans.len());
        for h in &self.humans {
            let mesh = tpl.map(|tpl| pose_body(tpl, &h.params)).transpose()?;
            let mut mesh_file = None;
            if export.obj {
                if let (Some(tpl), Some(m)) = (tpl, &mesh) {
                    let name = format!("frame_{:05}_track_{}.obj", self.t, h.track_id);
                    write_obj(dir.join(&sub).join(&name), &m.verts, &tpl.faces)?;
                    mesh_file = Some(rel(name));
                }
            }
            people.push(PersonRecord {
                track_id: h.track_id,
                patch: h.patch,
                score: h.score,
                theta: h.params.theta.clone(),
                beta: h.params.beta.clone(),
                alpha: h.params.alpha.clone(),
                root_cam: h.root_cam().to_record(),
                root_world: h.root_world.to_record(),
                joints_cam: mesh.as_ref().map(|m| m.joints.iter().map(xyz).collect()),
                verts_cam: mesh.as_ref().map(|m| m.verts.iter().map(xyz).collect()),
                mesh_file,
            });
        }
        let (w, h) = (self.x_cam.width, self.x_cam.height);
        let mut rec = FrameRecord {
            t: self.t,
            pose: self.pose.to_record(),
            focal: self.focal,
            people,
            depth_file: None,
            mask_file: None,
            ply_cam: None,
            ply_world: None,
        };
        if export.depth {
            let name = format!("depth_{:05}.t4dr", self.t);
            Tensor::new(vec![h, w], self.x_cam.depth())?.save(dir.join(&sub).join(&name))?;
            rec.depth_file = Some(rel(name));
        }
        if export.mask {
            let name = format!("mask_{:05}.t4dr", self.t);
            Tensor::new(vec![h, w], self.mask.clone())?.save(dir.join(&sub).join(&name))?;
            rec.mask_file = Some(rel(name));
        }
        if export.ply {
            let cam = format!("cam_{:05}.ply", self.t);
            let world = format!("world_{:05}.ply", self.t);
            self.x_cam.write_ply(dir.join(&sub).join(&cam))?;
            self.x_world.write_ply(dir.join(&sub).join(&world))?;
            rec.ply_cam = Some(rel(cam));
            rec.ply_world = Some(rel(world));
        }
        Ok(rec)
    }
}

/// Appends records to a JSON Lines file.
pub struct StreamWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl StreamWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, rec: &FrameRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::json(&self.path, e))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads every record of a JSON Lines stream.
pub fn read_stream(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
