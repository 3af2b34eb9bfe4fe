use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::se3::{PoseRecord, SE3Pose};
use crate::error::{Error, Result};

/// One line of a trajectory file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    #[serde(flatten)]
    pub pose: PoseRecord,
}

pub fn write_trajectory(path: impl AsRef<Path>, poses: &[SE3Pose]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (t, p) in poses.iter().enumerate() {
        let rec = TrajectoryRecord {
            t,
            pose: p.to_record(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a trajectory, ordering records by `t`.
pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<SE3Pose>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut recs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        recs.push(rec);
    }
    recs.sort_by_key(|r| r.t);
    Ok(recs.iter().map(|r| r.pose.to_pose()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3::Vec3;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.jsonl");
        let poses: Vec<SE3Pose> = (0..4)
            .map(|i| SE3Pose::from_axis_angle(Vec3::new(0.1 * i as f64, 0.2, -0.3), Vec3::new(i as f64, 0.0, 1.0)))
            .collect();
        write_trajectory(&path, &poses).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"t\":0"));
        let back = read_trajectory(&path).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!(a.rotation_angle_to(b) < 1e-12);
            assert!((a.translation - b.translation).norm() < 1e-12);
        }
    }
}
