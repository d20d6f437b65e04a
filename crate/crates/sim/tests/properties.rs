use nalgebra::Vector3;
use proptest::prelude::*;

use crloc_core::geom::{exp_se3, Transform, Twist};
use crloc_core::records::write_sensor_log;
use crloc_sim::scene::{room, RayCaster, SimScene};
use crloc_sim::sensors::{simulate, tof_returns, trace_rays, RobotSpec, SensorSpec};

fn direction() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-1.0..1.0f64).prop_filter_map("zero direction", |a| {
        let v = Vector3::from(a);
        (v.norm() > 1e-3).then(|| v.normalize())
    })
}

/// Exit distance from inside an axis-aligned box.
fn slab_exit(o: &Vector3<f64>, d: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> f64 {
    (0..3)
        .filter(|&i| d[i] != 0.0)
        .map(|i| if d[i] > 0.0 { (max[i] - o[i]) / d[i] } else { (min[i] - o[i]) / d[i] })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn room_ray_cast_matches_slabs(o in prop::array::uniform3(-0.45..0.45f64), d in direction(), lo in 0.5..2.0f64, hi in 0.5..2.0f64) {
        let (min, max) = (Vector3::new(-lo, -lo, -lo), Vector3::new(hi, hi, hi));
        let scene = SimScene::new(room(min, max)).unwrap();
        let caster = RayCaster::new(&scene);
        let o = Vector3::from(o);
        let expected = slab_exit(&o, &d, &min, &max);
        let hit = caster.cast(&o, &d, 100.0).unwrap();
        prop_assert!((hit.distance - expected).abs() <= 1e-9);
    }

    #[test]
    fn noise_off_returns_are_ray_cast_distances(xi in prop::array::uniform6(-0.3..0.3f64)) {
        let scene = SimScene::new(room(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0))).unwrap();
        let caster = RayCaster::new(&scene);
        let pose: Transform = exp_se3(&Twist::from_row_slice(&xi));
        let dirs = SensorSpec::default().ray_directions();
        let hits = trace_rays(&caster, &pose, &dirs, 4.0);
        let ranges = tof_returns(&hits, None);
        for ((dir, hit), r) in dirs.iter().zip(&hits).zip(&ranges) {
            let origin = pose.translation;
            let world = pose.rotation * dir;
            let expected = slab_exit(&origin, &world, &Vector3::new(-1.0, -1.0, -1.0), &Vector3::new(1.0, 1.0, 1.0));
            prop_assert_eq!(r.unwrap(), hit.unwrap().0);
            prop_assert!((r.unwrap() - expected).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn simulation_is_deterministic(seed in any::<u64>()) {
        let scene = crloc_sim::scene::default_scene();
        let run = || {
            let out = simulate(&scene, &RobotSpec::default(), &SensorSpec::default(), 0.2, seed).unwrap();
            let mut buf = Vec::new();
            write_sensor_log(&mut buf, &out.log).unwrap();
            buf
        };
        prop_assert_eq!(run(), run());
    }
}
