use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::raster::{head_labels, patch_of, pixel_ray, rasterize_bodies, room_hit, box_hit};
use super::scene::{SceneSpec, SynthConfig};
use crate::body::{decompose_root, pose_body, BodyParams, BodyTemplate, Root};
use crate::diffcore::{load_all, save_all, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{unproject, CameraIntrinsics, Pointmap, SE3Pose, Vec3};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEMPLATE_DIR: &str = "template";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonGt {
    pub track_id: u64,
    pub slot: usize,
    pub params_world: BodyParams,
    pub params_cam: BodyParams,
    /// Patch containing the projected head joint; `None` when not visible.
    pub head_patch: Option<usize>,
    pub head_px: Option<[f64; 2]>,
    /// Pixels owned by this person after occlusion.
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameGt {
    pub t: usize,
    /// Camera-to-world.
    pub pose: SE3Pose,
    pub intrinsics: CameraIntrinsics,
    pub people: Vec<PersonGt>,
}

/// One rendered frame: pseudo-image `H×W×C`, z-depth `H×W` and labels.
#[derive(Clone, Debug)]
pub struct Frame {
    pub image: Tensor,
    pub depth: Vec<f64>,
    pub gt: FrameGt,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    /// Person slot owning each pixel, read from the one-hot channels.
    pub fn ids(&self) -> Vec<Option<usize>> {
        let c = self.image.shape()[2];
        self.image
            .data()
            .chunks(c)
            .map(|px| px[4..].iter().position(|&v| v > 0.5))
            .collect()
    }

    /// Binary union of all person masks.
    pub fn mask(&self) -> Vec<f64> {
        self.ids().iter().map(|i| if i.is_some() { 1.0 } else { 0.0 }).collect()
    }

    pub fn xcam(&self) -> Result<Pointmap> {
        unproject(&self.depth, self.width(), self.height(), &self.gt.intrinsics, &SE3Pose::identity())
    }

    pub fn xworld(&self) -> Result<Pointmap> {
        unproject(&self.depth, self.width(), self.height(), &self.gt.intrinsics, &self.gt.pose)
    }

    /// Head-patch label per patch (1 where a visible head is labelled).
    pub fn head_map(&self, patch: usize) -> Vec<f64> {
        let n = (self.width() / patch) * (self.height() / patch);
        let mut out = vec![0.0; n];
        for p in &self.gt.people {
            if let Some(h) = p.head_patch {
                out[h] = 1.0;
            }
        }
        out
    }
}

/// Renders frame `t` of a scene. Also returns the world-space surface point
/// of every pixel as computed by the ray caster, for consistency checks.
pub fn render_frame(
    cfg: &SynthConfig,
    tpl: &BodyTemplate,
    scene: &SceneSpec,
    t: usize,
) -> Result<(Frame, Vec<Vec3>)> {
    let (w, h) = (cfg.width, cfg.height);
    let pose = scene.camera[t];
    let intr = scene.intrinsics;
    let params: Vec<BodyParams> = (0..scene.people.len()).map(|k| scene.body_params(k, t)).collect();
    let meshes = params.iter().map(|p| pose_body(tpl, p)).collect::<Result<Vec<_>>>()?;
    let bodies = rasterize_bodies(&meshes, &tpl.faces, &pose, &intr, w, h);

    let rot = pose.rotation;
    let eye = pose.translation;
    let c = cfg.channels();
    let mut img = vec![0.0; w * h * c];
    let mut depth = vec![0.0; w * h];
    let mut hits = vec![Vec3::zeros(); w * h];
    let mut ids = vec![None; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let dc = pixel_ray(&intr, u as f64, v as f64);
            let dw = rot * dc;
            let mut best = room_hit(&eye, &dw, cfg.room_half, cfg.room_height)
                .ok_or_else(|| Error::Degenerate(format!("ray at pixel ({u}, {v}) escaped the room")))?;
            for b in &scene.boxes {
                if let Some(hb) = box_hit(&eye, &dw, b) {
                    if hb.t < best.t {
                        best = hb;
                    }
                }
            }
            let (t_hit, n_cam) = if bodies.depth[i] < best.t {
                ids[i] = bodies.ids[i];
                (bodies.depth[i], bodies.normals[i])
            } else {
                (best.t, rot.inverse() * best.normal)
            };
            depth[i] = t_hit;
            hits[i] = eye + dw * t_hit;
            let px = &mut img[i * c..(i + 1) * c];
            px[0] = 1.0 / t_hit;
            px[1] = n_cam.x;
            px[2] = n_cam.y;
            px[3] = n_cam.z;
            if let Some(k) = ids[i] {
                px[4 + scene.people[k].slot] = 1.0;
            }
        }
    }

    let w2c = pose.inverse();
    let heads_cam: Vec<Vec3> = meshes.iter().map(|m| w2c.transform_point(&m.joints[tpl.head_joint])).collect();
    let labels = head_labels(&ids, &heads_cam, &intr, w, h, cfg.patch);
    let people = params
        .into_iter()
        .enumerate()
        .map(|(k, pw)| {
            let root_w = *pw.root.pose();
            let pc = BodyParams {
                root: Root::Camera(decompose_root(&root_w, &pose)),
                ..pw.clone()
            };
            PersonGt {
                track_id: scene.people[k].track_id,
                slot: scene.people[k].slot,
                params_world: pw,
                params_cam: pc,
                head_patch: labels[k],
                head_px: intr.project(&heads_cam[k]).map(|(a, b)| [a, b]),
                pixels: ids.iter().filter(|&&x| x == Some(k)).count(),
            }
        })
        .collect();
    let frame = Frame {
        image: Tensor::new(vec![h, w, c], img)?,
        depth: depth.clone(),
        gt: FrameGt {
            t,
            pose,
            intrinsics: intr,
            people,
        },
    };
    Ok((frame, hits))
}

/// Asserts the ground-truth invariants of one frame.
pub fn check_frame(frame: &Frame, hits: &[Vec3], patch: usize) -> Result<()> {
    let xw = frame.xworld()?;
    for (i, (p, q)) in xw.points.iter().zip(hits).enumerate() {
        if (p - q).norm() > 1e-9 {
            return Err(Error::Degenerate(format!(
                "frame {}: unprojected depth misses the surface at pixel {i} by {:e}",
                frame.gt.t,
                (p - q).norm()
            )));
        }
    }
    let (w, h) = (frame.width(), frame.height());
    for p in &frame.gt.people {
        if let (Some(lbl), Some([u, v])) = (p.head_patch, p.head_px) {
            if patch_of(u, v, w, h, patch) != Some(lbl) {
                return Err(Error::Degenerate(format!("frame {}: head label off its joint", frame.gt.t)));
            }
        }
        let composed = p.params_cam.root.to_world(&frame.gt.pose);
        let rw = p.params_world.root.pose();
        if (composed.translation - rw.translation).norm() > 1e-9 || composed.rotation_angle_to(rw) > 1e-9 {
            return Err(Error::Degenerate(format!("frame {}: world and camera roots disagree", frame.gt.t)));
        }
    }
    Ok(())
}

/// Renders and checks every frame of scene `index`, in memory.
pub fn render_sequence(cfg: &SynthConfig, tpl: &BodyTemplate, index: usize, frames: usize) -> Result<Vec<Frame>> {
    let scene = SceneSpec::sample(cfg, tpl, index, frames)?;
    (0..frames)
        .map(|t| {
            let (f, hits) = render_frame(cfg, tpl, &scene, t)?;
            check_frame(&f, &hits, cfg.patch)?;
            Ok(f)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqEntry {
    pub name: String,
    pub index: usize,
    pub split: Split,
    pub n_people: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: SynthConfig,
    pub template_dir: String,
    pub sequences: Vec<SeqEntry>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

pub fn seq_name(index: usize) -> String {
    format!("seq_{index:04}")
}

fn frame_stem(t: usize) -> String {
    format!("frame_{t:04}")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}

fn write_sequence(cfg: &SynthConfig, tpl: &BodyTemplate, dir: &Path, index: usize) -> Result<SeqEntry> {
    let frames = render_sequence(cfg, tpl, index, cfg.frames)?;
    let name = seq_name(index);
    let sdir = dir.join(&name);
    fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
    for f in &frames {
        let stem = frame_stem(f.gt.t);
        let depth = Tensor::new(vec![f.height(), f.width()], f.depth.clone())?;
        save_all(sdir.join(format!("{stem}.t4dr")), &[f.image.clone(), depth])?;
        write_json(&sdir.join(format!("{stem}.json")), &f.gt)?;
    }
    let split = if index + cfg.val_sequences >= cfg.sequences { Split::Val } else { Split::Train };
    Ok(SeqEntry {
        name,
        index,
        split,
        n_people: frames[0].gt.people.len(),
        frames: cfg.frames,
    })
}

/// Writes a dataset: `manifest.json`, the body template and
/// `seq_####/frame_####.{t4dr,json}`. Sequences render in parallel on
/// `workers` threads (all cores when `None`).
pub fn generate(cfg: &SynthConfig, out: impl AsRef<Path>, workers: Option<usize>) -> Result<Manifest> {
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let tpl = BodyTemplate::desk(cfg.template_seed);
    tpl.save(out.join(TEMPLATE_DIR))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let entries = pool.install(|| {
        (0..cfg.sequences)
            .into_par_iter()
            .map(|i| write_sequence(cfg, &tpl, out, i))
            .collect::<Result<Vec<_>>>()
    })?;
    let pick = |s: Split| entries.iter().filter(|e| e.split == s).map(|e| e.name.clone()).collect();
    let manifest = Manifest {
        version: 1,
        config: cfg.clone(),
        template_dir: TEMPLATE_DIR.into(),
        train: pick(Split::Train),
        val: pick(Split::Val),
        sequences: entries,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Read access to a generated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub template: BodyTemplate,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
        manifest.config.validate()?;
        let template = BodyTemplate::load(root.join(&manifest.template_dir))?;
        Ok(Self {
            root,
            manifest,
            template,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.manifest.config
    }

    pub fn entry(&self, name: &str) -> Result<&SeqEntry> {
        self.manifest
            .sequences
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("sequence {name} not in manifest")))
    }

    pub fn load_frame(&self, name: &str, t: usize) -> Result<Frame> {
        let dir = self.root.join(name);
        let stem = frame_stem(t);
        let tensors = load_all(dir.join(format!("{stem}.t4dr")))?;
        let gt: FrameGt = read_json(&dir.join(format!("{stem}.json")))?;
        let [image, depth]: [Tensor; 2] = tensors
            .try_into()
            .map_err(|_| Error::Format(format!("{name}/{stem}.t4dr must hold image and depth")))?;
        let cfg = self.config();
        if image.shape() != [cfg.height, cfg.width, cfg.channels()] {
            return Err(Error::shape("load_frame", &[cfg.height, cfg.width, cfg.channels()], image.shape()));
        }
        Ok(Frame {
            image,
            depth: depth.into_data(),
            gt,
        })
    }

    pub fn load_sequence(&self, name: &str) -> Result<Vec<Frame>> {
        let e = self.entry(name)?;
        (0..e.frames).map(|t| self.load_frame(name, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            sequences: 3,
            val_sequences: 1,
            frames: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generate_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate(&small(), a.path(), Some(2)).unwrap();
        generate(&small(), b.path(), Some(1)).unwrap();
        assert_eq!(m.sequences.len(), 3);
        assert_eq!(m.val, vec!["seq_0002".to_string()]);
        for e in &m.sequences {
            for f in ["frame_0000.t4dr", "frame_0003.json"] {
                let pa = fs::read(a.path().join(&e.name).join(f)).unwrap();
                let pb = fs::read(b.path().join(&e.name).join(f)).unwrap();
                assert_eq!(pa, pb);
            }
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        generate(&cfg, dir.path(), Some(1)).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let tpl = BodyTemplate::desk(cfg.template_seed);
        let mem = render_sequence(&cfg, &tpl, 1, cfg.frames).unwrap();
        let disk = ds.load_sequence("seq_0001").unwrap();
        for (a, b) in mem.iter().zip(&disk) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.gt.people.len(), b.gt.people.len());
        }
        let pm = disk[0].xcam().unwrap();
        assert_eq!(pm.n_valid(), 64 * 64);
    }

    #[test]
    fn frames_have_people_and_heads() {
        let cfg = SynthConfig::default();
        let tpl = BodyTemplate::desk(0);
        let mut labelled = 0;
        let mut total = 0;
        for i in 0..6 {
            let frames = render_sequence(&cfg, &tpl, i, 8).unwrap();
            for f in &frames {
                for p in &f.gt.people {
                    total += 1;
                    if p.head_patch.is_some() {
                        labelled += 1;
                        assert!(p.pixels > 0);
                    }
                }
                let c = f.image.shape()[2];
                assert_eq!(c, cfg.channels());
            }
        }
        assert!(labelled * 2 > total, "{labelled}/{total} heads visible");
    }
}
