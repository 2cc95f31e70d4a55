use posekit::codec::{encode_soft, OrientationGrid};
use posekit::geometry::{euler_to_quat, quat_to_euler, EulerAngles, UnitQuaternion};
use proptest::prelude::*;

fn quat() -> impl Strategy<Value = UnitQuaternion> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("near zero", |a| a.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(UnitQuaternion::from_array)
}

proptest! {
    #[test]
    fn distance_ignores_sign_and_is_symmetric(a in quat(), b in quat()) {
        let d = a.angular_distance(b);
        prop_assert!((0.0..=std::f64::consts::PI + 1e-12).contains(&d));
        prop_assert!((d - b.angular_distance(a)).abs() < 1e-12);
        prop_assert!((d - (-a).angular_distance(b)).abs() < 1e-12);
    }

    #[test]
    fn distance_is_invariant_under_common_rotation(a in quat(), b in quat(), r in quat()) {
        let d = (r * a).angular_distance(r * b);
        prop_assert!((d - a.angular_distance(b)).abs() < 1e-9);
    }

    #[test]
    fn euler_round_trip(yaw in -3.1f64..3.1, pitch in -1.5f64..1.5, roll in -3.1f64..3.1) {
        let q = euler_to_quat(EulerAngles { yaw, pitch, roll });
        let e = quat_to_euler(q);
        prop_assert!((e.yaw - yaw).abs() < 1e-9);
        prop_assert!((e.pitch - pitch).abs() < 1e-9);
        prop_assert!((e.roll - roll).abs() < 1e-9);
    }

    #[test]
    fn soft_encoding_is_a_distribution(q in quat(), n in 2usize..9) {
        let grid = OrientationGrid::new(n, 3.0).unwrap();
        let p = encode_soft(q, &grid);
        prop_assert_eq!(p.len(), n * n * n);
        prop_assert!(p.values().iter().all(|v| *v >= 0.0));
        prop_assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
