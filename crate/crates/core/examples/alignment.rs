//! Recovers a similarity transform between point clouds with Umeyama and a
//! focal length from a noisy pointmap with Weiszfeld reweighting.

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use h4d::geometry::{umeyama, weiszfeld_focal, Pointmap, Vec3};

fn main() -> h4d::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let src: Vec<Vec3> = (0..50)
        .map(|_| Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
        .collect();
    let rot = UnitQuaternion::from_scaled_axis(Vec3::new(0.3, -0.8, 0.5));
    let (s, t) = (1.7, Vec3::new(0.5, -1.0, 4.0));
    let dst: Vec<Vec3> = src.iter().map(|p| rot * p * s + t).collect();
    let sim = umeyama(&src, &dst, true)?;
    println!("scale {:.6} (true {s}), translation {:.6?}", sim.scale, sim.translation.as_slice());
    println!("rotation error {:.2e}", (sim.rotation - rot.to_rotation_matrix().matrix()).norm());

    let (w, h, f) = (64, 64, 56.0);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut pts = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let z = rng.gen_range(1.0..8.0);
            let mut p = Vec3::new((u as f64 - cx) * z / f, (v as f64 - cy) * z / f, z);
            if rng.gen_bool(0.1) {
                p = Vec3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(0.5..8.0));
            }
            pts.push(p);
        }
    }
    let pm = Pointmap::new(w, h, pts, vec![1.0; w * h])?;
    let est = weiszfeld_focal(&pm, cx, cy)?;
    println!("focal {est:.4} from a pointmap with 10% outliers (true {f})");
    Ok(())
}
