//! Poses the desk body at rest and in a random pose, places it in front of
//! a camera and writes both meshes as OBJ files.
//!
//! `cargo run --release --example body_pose -- [out_dir]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use h4d::body::{compose_root, joints, pose_body, write_obj, BodyParams, BodyTemplate, Root};
use h4d::geometry::{SE3Pose, Vec3};

fn main() -> h4d::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let tpl = BodyTemplate::desk(0);
    println!("template: {} vertices, {} joints, {} faces", tpl.n_verts(), tpl.n_joints(), tpl.faces.len());

    let rest = pose_body(&tpl, &BodyParams::rest(&tpl, Root::World(SE3Pose::identity())))?;
    write_obj(out.join("body_rest.obj"), &rest.verts, &tpl.faces)?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = BodyParams::rest(&tpl, Root::Camera(SE3Pose::from_translation(Vec3::new(0.0, 0.2, 3.0))));
    for th in p.theta.iter_mut() {
        *th = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    }
    for b in p.beta.iter_mut() {
        *b = rng.gen_range(-1.0..1.0);
    }
    let posed = pose_body(&tpl, &p)?;
    write_obj(out.join("body_posed.obj"), &posed.verts, &tpl.faces)?;

    // world root from a camera pose: P = T·P^cam
    let cam = SE3Pose::from_axis_angle(Vec3::new(0.0, 0.6, 0.0), Vec3::new(1.0, 1.5, -2.0));
    let world_root = compose_root(&cam, p.root.pose());
    let pelvis = posed.joints[joints::PELVIS];
    let head = posed.joints[joints::HEAD];
    println!("camera-frame pelvis {:.3?}, head {:.3?}", pelvis.as_slice(), head.as_slice());
    println!("world root translation {:.3?}", world_root.translation.as_slice());
    println!("wrote {} and {}", out.join("body_rest.obj").display(), out.join("body_posed.obj").display());
    Ok(())
}
