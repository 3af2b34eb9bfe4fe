use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::se3::{SE3Pose, Vec3};
use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels. Pixel `(u, v)` has its center at
/// coordinates `(u, v)`: `u` indexes columns, `v` rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Contract(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Shared focal with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.cx >= 0.0 && self.cx <= width as f64 && self.cy >= 0.0 && self.cy <= height as f64
    }

    /// Camera-frame point for pixel `(u, v)` at z-depth `d`.
    pub fn unproject_pixel(&self, u: f64, v: f64, d: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx * d, (v - self.cy) / self.fy * d, d)
    }

    /// Pixel coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Per-pixel 3D points with confidences, stored row-major (`v * width + u`).
/// A confidence of zero marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointmap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub confidence: Vec<f64>,
}

impl Pointmap {
    pub fn new(width: usize, height: usize, points: Vec<Vec3>, confidence: Vec<f64>) -> Result<Self> {
        if points.len() != width * height || confidence.len() != width * height {
            return Err(Error::shape(
                "pointmap",
                &[height, width],
                &[points.len(), confidence.len()],
            ));
        }
        Ok(Self {
            width,
            height,
            points,
            confidence,
        })
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.confidence[i] > 0.0
    }

    pub fn n_valid(&self) -> usize {
        self.confidence.iter().filter(|&&c| c > 0.0).count()
    }

    pub fn at(&self, u: usize, v: usize) -> &Vec3 {
        &self.points[v * self.width + u]
    }

    /// z-components, invalid pixels set to 0.
    pub fn depth(&self) -> Vec<f64> {
        self.points
            .iter()
            .zip(&self.confidence)
            .map(|(p, &c)| if c > 0.0 { p.z } else { 0.0 })
            .collect()
    }

    pub fn transformed(&self, pose: &SE3Pose) -> Pointmap {
        Pointmap {
            width: self.width,
            height: self.height,
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            confidence: self.confidence.clone(),
        }
    }

    /// Binary little-endian PLY with float xyz and a `confidence` property.
    /// Invalid pixels are skipped.
    pub fn write_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let n = self.n_valid();
        let header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {n}\n\
             property float x\nproperty float y\nproperty float z\n\
             property float confidence\nend_header\n"
        );
        let mut body = Vec::with_capacity(n * 16);
        for (p, &c) in self.points.iter().zip(&self.confidence) {
            if c > 0.0 {
                for v in [p.x, p.y, p.z, c] {
                    body.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        w.write_all(header.as_bytes())
            .and_then(|_| w.write_all(&body))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Lifts a depth map (row-major, `height × width`) to a pointmap in the frame
/// given by `pose` (camera-to-world). Non-positive depths become invalid.
pub fn unproject(
    depth: &[f64],
    width: usize,
    height: usize,
    intr: &CameraIntrinsics,
    pose: &SE3Pose,
) -> Result<Pointmap> {
    if depth.len() != width * height {
        return Err(Error::shape("unproject", &[height, width], &[depth.len()]));
    }
    let mut points = Vec::with_capacity(depth.len());
    let mut confidence = Vec::with_capacity(depth.len());
    for v in 0..height {
        for u in 0..width {
            let d = depth[v * width + u];
            if d > 0.0 && d.is_finite() {
                let pc = intr.unproject_pixel(u as f64, v as f64, d);
                points.push(pose.transform_point(&pc));
                confidence.push(1.0);
            } else {
                points.push(Vec3::zeros());
                confidence.push(0.0);
            }
        }
    }
    Pointmap::new(width, height, points, confidence)
}
