//! Property tests over geometry, bodies, transport, gating and metrics.

use nalgebra::DMatrix;
use proptest::prelude::*;

use h4d::body::{compose_root, decompose_root, pose_body, BodyParams, BodyTemplate, Root};
use h4d::diffcore::Tensor;
use h4d::eval::{depth_metrics, local_metrics, mask_iou, segments};
use h4d::geometry::{umeyama, SE3Pose, Vec3};
use h4d::recurrence::ttt_update_rates;
use h4d::tracking::{dustbin_augment, dustbin_marginals, sinkhorn};

fn vec3(s: f64) -> impl Strategy<Value = Vec3> {
    (-s..s, -s..s, -s..s).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = SE3Pose> {
    (vec3(3.0), vec3(5.0)).prop_map(|(aa, t)| SE3Pose::from_axis_angle(aa, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_inverse_round_trips(a in pose(), p in vec3(10.0)) {
        let back = a.inverse().transform_point(&a.transform_point(&p));
        prop_assert!((back - p).norm() < 1e-9);
        let id = a.compose(&a.inverse());
        prop_assert!(id.translation.norm() < 1e-9 && id.rotation.angle() < 1e-7);
    }

    #[test]
    fn composition_is_associative(a in pose(), b in pose(), c in pose(), p in vec3(5.0)) {
        let l = a.compose(&b).compose(&c).transform_point(&p);
        let r = a.compose(&b.compose(&c)).transform_point(&p);
        prop_assert!((l - r).norm() < 1e-9);
    }

    #[test]
    fn root_decomposition_inverts_composition(t in pose(), pc in pose()) {
        let back = decompose_root(&compose_root(&t, &pc), &t);
        prop_assert!((back.translation - pc.translation).norm() < 1e-9);
        prop_assert!(back.rotation_angle_to(&pc) < 1e-7);
    }

    #[test]
    fn umeyama_recovers_rigid_motion(g in pose(), pts in prop::collection::vec(vec3(2.0), 4..30)) {
        let dst: Vec<Vec3> = pts.iter().map(|p| g.transform_point(p)).collect();
        // skip nearly collinear draws
        let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
        let spread = pts.iter().map(|p| (p - c).norm_squared()).sum::<f64>();
        prop_assume!(spread > 1e-2);
        if let Ok(sim) = umeyama(&pts, &dst, false) {
            for (p, q) in pts.iter().zip(&dst) {
                prop_assert!((sim.apply(p) - q).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn skinning_is_root_equivariant(
        theta in prop::collection::vec((-0.8f64..0.8, -0.8f64..0.8, -0.8f64..0.8), 11),
        beta in prop::collection::vec(-2.0f64..2.0, 4),
        root in pose(),
        g in pose(),
    ) {
        let tpl = BodyTemplate::desk(0);
        let p = BodyParams { theta: theta.iter().map(|&(a, b, c)| [a, b, c]).collect(), beta, alpha: vec![], root: Root::World(root) };
        let base = pose_body(&tpl, &p).unwrap();
        let mut q = p.clone();
        q.root = Root::World(g.compose(&root));
        let moved = pose_body(&tpl, &q).unwrap();
        for (a, b) in moved.verts.iter().zip(&base.verts) {
            prop_assert!((a - g.transform_point(b)).norm() < 1e-9);
        }
    }

    #[test]
    fn gated_rows_stay_on_the_segment(
        rows in 1usize..6,
        seed in prop::collection::vec(-3.0f64..3.0, 48),
        beta in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let d = 4;
        let prev = Tensor::from_fn(vec![rows, d], |i| seed[i]);
        let prop_ = Tensor::from_fn(vec![rows, d], |i| seed[24 + i]);
        let out = ttt_update_rates(&prev, &prop_, &beta[..rows]).unwrap();
        for i in 0..rows {
            for k in 0..d {
                let (a, b, x) = (prev.row(i)[k], prop_.row(i)[k], out.row(i)[k]);
                prop_assert!((x - (a + beta[i] * (b - a))).abs() < 1e-12);
                prop_assert!(x >= a.min(b) - 1e-12 && x <= a.max(b) + 1e-12);
            }
        }
    }

    #[test]
    fn sinkhorn_meets_marginals(m in 0usize..5, n in 0usize..5, costs in prop::collection::vec(0.0f64..2.0, 25), gamma in 0.3f64..1.5) {
        let d = DMatrix::from_fn(m, n, |i, j| costs[i * 5 + j]);
        let dd = dustbin_augment(&d, gamma);
        let (a, b) = dustbin_marginals(m, n);
        let r = sinkhorn(&dd, &a, &b, 0.05, 500).unwrap();
        prop_assert!(r.marginal_err <= 1e-6);
        prop_assert!(r.plan.iter().all(|&x| x >= 0.0 && x.is_finite()));
    }

    #[test]
    fn pa_never_exceeds_mpjpe(
        joints in prop::collection::vec(vec3(1.0), 12),
        noise in prop::collection::vec(vec3(0.1), 12),
        g in pose(),
    ) {
        let pred: Vec<Vec3> = joints.iter().zip(&noise).map(|(p, e)| g.transform_point(p) + e).collect();
        let m = local_metrics(&pred, &pred, &joints, &joints).unwrap();
        prop_assert!(m.pa_mpjpe <= m.mpjpe + 1e-9);
        prop_assert!(m.mpjpe >= 0.0 && m.pve >= 0.0);
    }

    #[test]
    fn abs_rel_of_constant_ratio(depth in prop::collection::vec(0.5f64..8.0, 1..40), k in 0.5f64..2.0) {
        let pred: Vec<f64> = depth.iter().map(|d| d * k).collect();
        let m = depth_metrics(&pred, &depth, None).unwrap();
        prop_assert!((m.abs_rel - (k - 1.0).abs()).abs() < 1e-9);
        let inside = k.max(1.0 / k) < 1.25;
        prop_assert_eq!(m.delta, if inside { 1.0 } else { 0.0 });
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 30), b in prop::collection::vec(any::<bool>(), 30)) {
        let x = mask_iou(&a, &b);
        prop_assert_eq!(x, mask_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(mask_iou(&a, &a), 1.0);
    }

    #[test]
    fn segments_partition_the_track(n in 0usize..500, len in 1usize..120) {
        let s = segments(n, len);
        let mut next = 0;
        for r in &s {
            prop_assert_eq!(r.start, next);
            prop_assert!(r.end > r.start && r.end - r.start <= len);
            next = r.end;
        }
        prop_assert_eq!(next, n);
    }
}
