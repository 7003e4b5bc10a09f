mod common;

use common::{naive_cost, oracle_config, oracle_views, random_image, rng};
use nalgebra::Vector3;
use ocmatch_core::sweep::{select_depth, sweep_cost, CostVolume, Frame, PlaneSpacing, SweepConfig, ViewSet};
use ocmatch_core::{CameraModel, GrayImage, RigidPose};
use proptest::prelude::*;

fn assert_matches_oracle(seed: u64, normalize_gain: bool) {
    let (cam, frames) = oracle_views(seed);
    let cfg = oracle_config(normalize_gain);
    let expected = naive_cost(&cam, &frames, &cfg);
    let views = ViewSet::new(cam, frames[0].clone(), frames[1..].to_vec()).unwrap();
    let vol = sweep_cost(&views, &cfg).unwrap();
    let mut finite = 0;
    for k in 0..cfg.plane_count {
        for (i, (&got, &want)) in vol.plane(k).iter().zip(&expected[k * 256..(k + 1) * 256]).enumerate() {
            if want.is_infinite() {
                assert!(got.is_infinite(), "plane {k} pixel {i}: got {got}, oracle unscored");
            } else {
                finite += 1;
                assert!((got - want).abs() <= 1e-10, "plane {k} pixel {i}: {got} vs {want}");
            }
        }
    }
    assert!(finite > 100, "only {finite} scored cells");
}

#[test]
fn raw_cost_matches_naive_variance() {
    for seed in 0..4 {
        assert_matches_oracle(seed, false);
    }
}

#[test]
fn gain_normalized_cost_matches_naive_variance() {
    for seed in 10..14 {
        assert_matches_oracle(seed, true);
    }
}

#[test]
fn window_three_matches_naive_variance() {
    let (cam, frames) = oracle_views(21);
    let cfg = SweepConfig {
        window: 3,
        normalize_gain: false,
        ..oracle_config(false)
    };
    let expected = naive_cost(&cam, &frames, &cfg);
    let views = ViewSet::from_sequence(cam, vec![frames[1].clone(), frames[0].clone(), frames[2].clone()]).unwrap();
    let got: Vec<f64> = (0..cfg.plane_count).flat_map(|k| sweep_cost(&views, &cfg).unwrap().plane(k).to_vec()).collect();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a.is_infinite() && b.is_infinite()) || (a - b).abs() <= 1e-10);
    }
}

#[test]
fn single_view_is_an_error() {
    let cam = common::small_camera();
    let f = Frame {
        image: GrayImage::new(16, 16),
        pose: RigidPose::identity(),
        id: 0,
    };
    assert!(ViewSet::new(cam, f, vec![]).is_err());
}

/// Views that see a textured plane at `plane_depth` with integer-pixel
/// disparities, so the true plane's warped samples are exact copies.
fn zero_noise_views(seed: u64, plane_depth: f64, shifts: &[i32]) -> (CameraModel, Vec<Frame>) {
    let cam = CameraModel::new(20.0, 20.0, 11.5, 11.5, 24, 24).unwrap();
    let mut r = rng(seed);
    let wide = random_image(&mut r, 24 + 40, 24);
    let frames = shifts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            // camera moved by b along +x sees the texture shifted by -fx*b/z pixels
            let b = s as f64 * plane_depth / cam.fx;
            let image = GrayImage::from_fn(24, 24, |x, y| wide.get((x as i32 + 20 + s) as usize, y));
            Frame {
                image,
                pose: RigidPose::from_translation(Vector3::new(b, 0.0, 0.0)),
                id: i as u32,
            }
        })
        .collect();
    (cam, frames)
}

fn argmins(vol: &CostVolume) -> Vec<Option<(usize, f64)>> {
    (0..vol.width() * vol.height())
        .map(|i| {
            let (x, y) = (i % vol.width(), i / vol.width());
            (0..vol.plane_count())
                .map(|k| (k, vol.get(x, y, k)))
                .filter(|(_, c)| c.is_finite())
                .min_by(|a, b| a.1.total_cmp(&b.1))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cost_is_nonnegative(seed in 0u64..10_000, gain in any::<bool>()) {
        let (cam, frames) = oracle_views(seed);
        let views = ViewSet::new(cam, frames[0].clone(), frames[1..].to_vec()).unwrap();
        let vol = sweep_cost(&views, &oracle_config(gain)).unwrap();
        for k in 0..vol.plane_count() {
            prop_assert!(vol.plane(k).iter().all(|&c| c >= -1e-9));
        }
    }

    #[test]
    fn cost_ignores_order_of_other_views(seed in 0u64..10_000, gain in any::<bool>()) {
        let (cam, frames) = oracle_views(seed);
        let cfg = oracle_config(gain);
        let a = sweep_cost(&ViewSet::new(cam, frames[0].clone(), vec![frames[1].clone(), frames[2].clone()]).unwrap(), &cfg).unwrap();
        let b = sweep_cost(&ViewSet::new(cam, frames[0].clone(), vec![frames[2].clone(), frames[1].clone()]).unwrap(), &cfg).unwrap();
        for k in 0..cfg.plane_count {
            for (x, y) in a.plane(k).iter().zip(b.plane(k)) {
                prop_assert!((x.is_infinite() && y.is_infinite()) || (x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_view_keeps_zero_cost_argmins(
        seed in 0u64..10_000,
        true_plane in 1usize..6,
        s1 in 1i32..4,
        s2 in -4i32..0,
        dup in 0usize..3,
        gain in any::<bool>(),
    ) {
        let cfg = SweepConfig {
            z_min: 20.0,
            z_max: 40.0,
            plane_count: 7,
            spacing: PlaneSpacing::UniformDepth,
            window: 3,
            normalize_gain: gain,
            ..SweepConfig::default()
        };
        let z = cfg.depth_at(true_plane as f64);
        let (cam, frames) = zero_noise_views(seed, z, &[0, s1, s2]);
        let base = ViewSet::new(cam, frames[0].clone(), frames[1..].to_vec()).unwrap();
        let mut others = frames[1..].to_vec();
        others.push(frames[dup].clone());
        let with_dup = ViewSet::new(cam, frames[0].clone(), others).unwrap();
        let a = argmins(&sweep_cost(&base, &cfg).unwrap());
        let b = argmins(&sweep_cost(&with_dup, &cfg).unwrap());
        let mut zero = 0;
        for (p, q) in a.iter().zip(&b) {
            if let (Some((ka, ca)), Some((kb, _))) = (p, q) {
                if *ca < 1e-12 {
                    zero += 1;
                    prop_assert_eq!(ka, kb);
                    prop_assert_eq!(*ka, true_plane);
                }
            }
        }
        prop_assert!(zero > 50, "only {} zero-cost pixels", zero);
    }

    #[test]
    fn lowering_a_plane_cost_never_moves_the_argmin_elsewhere(
        costs in proptest::collection::vec(0.0..1.0f64, 9),
        plane in 0usize..9,
        drop in 0.0..1.0f64,
    ) {
        let cfg = SweepConfig {
            z_min: 10.0,
            z_max: 18.0,
            plane_count: 9,
            spacing: PlaneSpacing::UniformDepth,
            cost_reject_threshold: f64::MAX,
            uniqueness_ratio: 1.0,
            ..SweepConfig::default()
        };
        let vol = |c: &[f64]| CostVolume::from_parts(1, 1, cfg.plane_depths(), c.to_vec(), vec![false]).unwrap();
        let index = |c: &[f64]| select_depth(&vol(c), &cfg).depth(0, 0) - cfg.z_min;
        let before = index(&costs);
        let k0 = costs.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert!((before - k0 as f64).abs() <= 0.5 + 1e-9);
        let mut lowered = costs.clone();
        lowered[plane] *= drop;
        let after = index(&lowered);
        let near = |k: usize| (after - k as f64).abs() <= 0.5 + 1e-9;
        prop_assert!(near(k0) || near(plane));
        if k0 == plane {
            prop_assert!(near(plane));
        }
    }
}
