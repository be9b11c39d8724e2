mod common;

use nalgebra::Vector3;
use posevae::geometry::{
    backproject_centre, gram_schmidt_6d, project_point, random_rotation, rotation_to_6d,
    CameraIntrinsics, GeometryError, Pose, ProjectiveCentre, Rotation, Rotation6D, Translation,
};
use proptest::prelude::*;

fn six() -> impl Strategy<Value = [f64; 6]> {
    proptest::array::uniform6(-10.0f64..10.0)
}

fn intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
    (100.0f64..2000.0, 100.0f64..2000.0, 0.0f64..639.0, 0.0f64..479.0)
        .prop_map(|(fx, fy, px, py)| CameraIntrinsics::new(fx, fy, px, py, 640, 480).unwrap())
}

proptest! {
    #[test]
    fn gram_schmidt_lands_on_so3(r in six()) {
        match gram_schmidt_6d(&Rotation6D(r)) {
            Ok(rot) => {
                let (orth, det) = rot.invariant_errors();
                prop_assert!(orth < 1e-6 && det < 1e-6);
            }
            Err(GeometryError::DegenerateInput(_)) => {
                let (a1, a2) = Rotation6D(r).columns();
                prop_assert!(a1.norm() < 1e-6 || a1.cross(&a2).norm() < 1e-6 * a1.norm());
            }
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn gram_schmidt_ignores_first_column_scale(r in six(), s in 1e-3f64..1e3) {
        let Ok(base) = gram_schmidt_6d(&Rotation6D(r)) else { return Ok(()) };
        let mut scaled = r;
        for v in &mut scaled[..3] {
            *v *= s;
        }
        let other = gram_schmidt_6d(&Rotation6D(scaled)).unwrap();
        prop_assert!((base.matrix() - other.matrix()).abs().max() < 1e-9);
    }

    #[test]
    fn six_d_round_trip(seed in any::<u64>()) {
        let r = random_rotation(seed);
        let back = gram_schmidt_6d(&rotation_to_6d(&r)).unwrap();
        prop_assert!((back.matrix() - r.matrix()).abs().max() < 1e-6);
    }

    #[test]
    fn backprojection_inverts_projection(
        k in intrinsics(),
        x in -2.0f64..2.0,
        y in -2.0f64..2.0,
        z in 0.05f64..20.0,
    ) {
        let t = Translation::new(x, y, z).unwrap();
        let c = ProjectiveCentre::of_translation(&t, &k);
        let back = backproject_centre(&c, z, &k).unwrap();
        prop_assert!((back.vector() - t.vector()).abs().max() < 1e-9);
        let p = project_point(&Vector3::zeros(), &Pose::new(Rotation::identity(), t), &k).unwrap();
        prop_assert!((p.x - c.cx).abs() < 1e-9 && (p.y - c.cy).abs() < 1e-9);
    }

    #[test]
    fn non_positive_distance_rejected(tz in -5.0f64..=0.0) {
        let k = common::lm_intrinsics();
        let c = ProjectiveCentre::new(10.0, 10.0);
        prop_assert!(matches!(backproject_centre(&c, tz, &k), Err(GeometryError::InvalidDistance(_))));
    }
}

#[test]
fn ten_thousand_rotations_are_valid() {
    for seed in 0..10_000 {
        let (orth, det) = random_rotation(seed).invariant_errors();
        assert!(orth < 1e-9 && det < 1e-9, "seed {seed}");
    }
}

#[test]
fn behind_camera_is_an_error() {
    let k = common::lm_intrinsics();
    let pose = Pose::new(Rotation::identity(), Translation::new(0.0, 0.0, 0.1).unwrap());
    assert!(matches!(
        project_point(&Vector3::new(0.0, 0.0, -0.2), &pose, &k),
        Err(GeometryError::BehindCamera(_))
    ));
}
