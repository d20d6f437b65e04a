use proptest::prelude::*;

use crloc::config::RunConfig;
use crloc_sim::scene::SceneEdit;

proptest! {
    #[test]
    fn config_round_trip_is_identity(
        seed in any::<u64>(),
        duration in 0.0..100.0f64,
        tau in 0.0..50.0f64,
        sigma in 1e-4..0.1f64,
        condition in "[a-z0-9_ ]{0,12}",
        boxes in prop::collection::vec((prop::array::uniform3(-1.0..1.0f64), prop::array::uniform3(0.01..0.2f64), -3.0..3.0f64), 0..3),
    ) {
        let mut cfg = RunConfig { seed, duration, condition, ..Default::default() };
        cfg.detect.tau = tau;
        cfg.noise.gyro_sigma = sigma;
        cfg.scene.anomalies = boxes
            .into_iter()
            .enumerate()
            .map(|(i, (center, half_extents, yaw))| SceneEdit::AddBox { label: format!("box{i}"), center, half_extents, yaw })
            .collect();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml().unwrap(), text);
    }
}
