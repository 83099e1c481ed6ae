use approx::assert_relative_eq;
use nalgebra::Vector3;
use proptest::prelude::*;

use monoground::box3d::{iou3d, OrientedBox3D};
use monoground::camera::{
    backproject_center, fuse_depth, height_depth, project, real_to_virtual_depth, CameraIntrinsics, DepthMode,
    Point3D, VirtualCamera,
};
use monoground::metrics::{aggregate, QueryResult};
use monoground::rotation::{
    allocentric_to_egocentric, egocentric_to_allocentric, rot6d_to_matrix, Rot6D, RotationMatrix,
};

fn camera() -> impl Strategy<Value = CameraIntrinsics> {
    (200.0..3000.0f64, 0.8..1.2f64, 320.0..4000.0f64, 0.4..1.0f64, 0.3..0.7f64, 0.3..0.7f64).prop_map(
        |(fx, ky, w, kh, px, py)| CameraIntrinsics::new(fx, fx * ky, w * px, w * kh * py, w, w * kh).unwrap(),
    )
}

fn rotation() -> impl Strategy<Value = RotationMatrix> {
    prop::array::uniform6(-1.0..1.0f64)
        .prop_filter("non-degenerate", |v| {
            let a = Vector3::new(v[0], v[1], v[2]);
            let b = Vector3::new(v[3], v[4], v[5]);
            a.norm() > 0.1 && a.normalize().cross(&b).norm() > 0.1
        })
        .prop_map(|v| rot6d_to_matrix(&Rot6D::from_array(v)).unwrap())
}

fn oriented_box() -> impl Strategy<Value = OrientedBox3D> {
    (prop::array::uniform3(-1.0..1.0f64), prop::array::uniform3(0.3..2.0f64), rotation())
        .prop_map(|(c, d, r)| OrientedBox3D::new(Point3D::new(c[0], c[1], c[2]), d, r).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projection_round_trip(cam in camera(), x in -2.0..2.0f64, y in -2.0..2.0f64, z in 0.1..100.0f64) {
        let p = Point3D::new(x * z, y * z, z);
        let back = backproject_center(project(p, &cam).unwrap(), z, &cam).unwrap();
        prop_assert!((back.to_vector() - p.to_vector()).norm() <= 1e-9 * p.to_vector().norm());
    }

    #[test]
    fn focal_scaling_leaves_virtual_depth_unchanged(cam in camera(), z in 0.1..100.0f64, k in 0.25..4.0f64) {
        let vc = VirtualCamera::default();
        let mut scaled = cam;
        scaled.fx *= k;
        let a = real_to_virtual_depth(z, &cam, &vc).unwrap();
        let b = real_to_virtual_depth(k * z, &scaled, &vc).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn fused_depth_between_branches(z1 in 0.1..100.0f64, z2 in 0.1..100.0f64) {
        let z = fuse_depth(z1, Some(z2), DepthMode::FusedAverage).unwrap();
        prop_assert!(z >= z1.min(z2) && z <= z1.max(z2));
        prop_assert_eq!(fuse_depth(z1, Some(z2), DepthMode::VirtualOnly).unwrap(), z1);
    }

    #[test]
    fn height_depth_recovers_center_depth(cam in camera(), h in 0.2..3.0f64, z in 0.5..80.0f64) {
        let h2d = cam.fy * h / z;
        assert_relative_eq!(height_depth(h, h2d, &cam).unwrap(), z, max_relative = 1e-12);
    }

    #[test]
    fn first_column_scale_is_irrelevant(v in prop::array::uniform6(-1.0..1.0f64), k in 0.01..100.0f64) {
        let a = Vector3::new(v[0], v[1], v[2]);
        let b = Vector3::new(v[3], v[4], v[5]);
        prop_assume!(a.norm() > 0.1 && a.normalize().cross(&b).norm() > 0.1);
        let r1 = rot6d_to_matrix(&Rot6D::new(a, b)).unwrap();
        let r2 = rot6d_to_matrix(&Rot6D::new(k * a, b)).unwrap();
        prop_assert!((r1.matrix() - r2.matrix()).abs().max() <= 1e-12);
    }

    #[test]
    fn allocentric_conversion_inverts(r in rotation(), c in prop::array::uniform3(-5.0..5.0f64), z in 0.5..50.0f64) {
        let center = Point3D::new(c[0], c[1], z);
        let ego = allocentric_to_egocentric(&r, &center);
        let back = egocentric_to_allocentric(&ego, &center);
        prop_assert!((back.matrix() - r.matrix()).abs().max() <= 1e-12);
    }

    #[test]
    fn iou_range_and_symmetry(a in oriented_box(), b in oriented_box()) {
        let ab = iou3d(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - iou3d(&b, &a)).abs() <= 1e-12);
        prop_assert!((iou3d(&a, &a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn iou_rigid_motion_invariance(a in oriented_box(), b in oriented_box(), r in rotation(),
                                   t in prop::array::uniform3(-10.0..10.0f64)) {
        let t = Vector3::from(t);
        let moved = iou3d(&a.transformed(&r, &t), &b.transformed(&r, &t));
        prop_assert!((moved - iou3d(&a, &b)).abs() <= 1e-9);
    }

    #[test]
    fn aggregate_order_and_monotonicity(ious in prop::collection::vec(0.0..1.0f64, 1..40), which in any::<prop::sample::Index>(),
                                        bump in 0.0..1.0f64) {
        let results: Vec<QueryResult> = ious.iter().enumerate().map(|(i, &iou)| {
            let mut r = QueryResult::missing(format!("q{i}"));
            r.iou = iou;
            r
        }).collect();
        let base = aggregate(&results);
        prop_assert!(base.acc_50 <= base.acc_25);

        let mut reversed = results.clone();
        reversed.reverse();
        prop_assert_eq!(aggregate(&reversed), base.clone());

        let mut improved = results.clone();
        let i = which.index(improved.len());
        improved[i].iou = (improved[i].iou + bump).min(1.0);
        let better = aggregate(&improved);
        prop_assert!(better.acc_25 >= base.acc_25 && better.acc_50 >= base.acc_50);
    }
}
