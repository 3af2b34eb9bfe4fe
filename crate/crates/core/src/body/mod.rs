//! A small parametric body: shape blendshapes, a kinematic tree, linear
//! blend skinning and the world/camera root decomposition `P = T·P^cam`.

mod kinematics;
mod template;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub use kinematics::{
    compose_root, decompose_root, pose_body, pose_local, quat_to_mat_r, rodrigues, rodrigues_r,
    BodyMesh, BodyParams, BodySkinFn, Mat3, Root,
};
pub use template::{joints, BodyDims, BodyTemplate};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Writes an ASCII OBJ with the template's fixed triangle topology.
pub fn write_obj(path: impl AsRef<Path>, verts: &[Vec3], faces: &[[usize; 3]]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = String::new();
    for v in verts {
        body.push_str(&format!("v {:.6} {:.6} {:.6}\n", v.x, v.y, v.z));
    }
    for f in faces {
        body.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
