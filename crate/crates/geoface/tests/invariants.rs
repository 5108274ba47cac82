use geoface::archive::Archive;
use geoface::dataio::Image;
use geoface::fvr::{transmittance, volume_render, RaySamples};
use geoface::geometry::normal_from_depth;
use geoface::metrics::{l1, psnr};
use geoface::motion::KeypointSet;
use geoface::trainer::{transfer_keypoints, TrainConfig, TransferMode};
use geoface::Tensor;
use proptest::prelude::*;

fn image(values: Vec<f32>) -> Image {
    Image::new(4, 4, values).unwrap()
}

#[test]
fn seeds_beyond_the_toml_range_are_rejected() {
    let cfg = TrainConfig {
        seed: u64::MAX,
        ..TrainConfig::default()
    };
    assert!(cfg.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transmittance_starts_at_one_and_never_increases(density in proptest::collection::vec(0.0f64..5.0, 1..8)) {
        let tau = transmittance(&density);
        prop_assert_eq!(tau.len(), density.len() + 1);
        prop_assert_eq!(tau[0], 1.0);
        for w in tau.windows(2) {
            prop_assert!(w[1] <= w[0] && w[1] >= 0.0);
        }
    }

    #[test]
    fn rendering_a_constant_color_scales_it_by_the_absorbed_light(
        density in proptest::collection::vec(0.0f64..5.0, 4),
        color in -1.0f64..1.0,
    ) {
        let samples = RaySamples::new(Tensor::new([1, 4], density.clone()), Tensor::full([1, 4, 1], color)).unwrap();
        let out = volume_render(&samples).values.data()[0];
        let absorbed = 1.0 - transmittance(&density)[4];
        prop_assert!((out - color * absorbed).abs() < 1e-12);
    }

    #[test]
    fn normals_are_unit_length_and_face_the_camera(depth in proptest::collection::vec(0.5f64..3.0, 36)) {
        let n = normal_from_depth(&Tensor::new([6, 6], depth), 1.0).unwrap();
        for v in n.data().chunks_exact(3) {
            prop_assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-9);
            prop_assert!(v[2] > 0.0);
        }
    }

    #[test]
    fn pixel_metrics_are_symmetric(
        a in proptest::collection::vec(0.0f32..1.0, 48),
        b in proptest::collection::vec(0.0f32..1.0, 48),
    ) {
        let (x, y) = (image(a), image(b));
        prop_assert_eq!(l1(&x, &y).unwrap(), l1(&y, &x).unwrap());
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!(l1(&x, &x).unwrap() == 0.0);
    }

    #[test]
    fn relative_transfer_moves_the_source_by_the_driving_displacement(
        src in proptest::collection::vec(-0.9f64..0.9, 6),
        first in proptest::collection::vec(-0.9f64..0.9, 6),
        now in proptest::collection::vec(-0.9f64..0.9, 6),
    ) {
        let set = |v: &[f64]| KeypointSet::with_identity_jacobians(v.chunks(2).map(|p| [p[0], p[1]]).collect());
        let (s, f, d) = (set(&src), set(&first), set(&now));
        let t = transfer_keypoints(&s, &d, &f, TransferMode::Relative, 1e-4).unwrap();
        for k in 0..3 {
            for a in 0..2 {
                let want = s.positions[k][a] + d.positions[k][a] - f.positions[k][a];
                prop_assert!((t.positions[k][a] - want).abs() < 1e-12);
            }
        }
        let still = transfer_keypoints(&s, &f, &f, TransferMode::Relative, 1e-4).unwrap();
        prop_assert_eq!(still.positions, s.positions);
    }

    #[test]
    fn archives_detect_any_single_byte_flip(
        values in proptest::collection::vec(-10.0f32..10.0, 1..20),
        pick in any::<prop::sample::Index>(),
        mask in 1u8..=255,
    ) {
        let mut a = Archive::new();
        a.push("w", Tensor::new([values.len()], values));
        let mut bytes = a.to_bytes();
        prop_assert_eq!(Archive::from_bytes(&bytes).unwrap().to_bytes(), bytes.clone());
        let i = pick.index(bytes.len());
        bytes[i] ^= mask;
        prop_assert!(Archive::from_bytes(&bytes).is_err());
    }

    #[test]
    fn config_survives_a_toml_round_trip(
        lr in 1e-6f64..1e-2,
        seed in 0..=i64::MAX as u64,
        rgb in 0.0f64..1.0,
        split in 0.0f64..1.0,
    ) {
        let rest = 1.0 - rgb;
        let cfg = TrainConfig {
            learning_rate: lr,
            seed,
            lambda_rgb: rgb,
            lambda_depth: rest * split,
            lambda_normal: rest - rest * split,
            ..TrainConfig::default()
        };
        prop_assert!(cfg.validate().is_ok());
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
