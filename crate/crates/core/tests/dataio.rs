use dcam_core::dataio::*;
use dcam_core::error::DcamError;
use ndarray::{Array2, Zip};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_shape_simple_fn((3, h, w), || rng.random_range(0.0..=1.0))
}

fn random_alpha(h: usize, w: usize, rng: &mut ChaCha8Rng) -> AlphaMatte {
    AlphaMatte::from_shape_simple_fn((h, w), || rng.random_range(0.0..=1.0))
}

#[test]
fn composite_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (fg, bg) = (random_image(8, 9, &mut rng), random_image(8, 9, &mut rng));
    assert_eq!(composite(&fg, &bg, &AlphaMatte::ones((8, 9))).unwrap(), fg);
    assert_eq!(composite(&fg, &bg, &AlphaMatte::zeros((8, 9))).unwrap(), bg);
    let mid = composite(&Image::ones((3, 4, 4)), &Image::zeros((3, 4, 4)), &AlphaMatte::from_elem((4, 4), 0.5)).unwrap();
    assert!(mid.iter().all(|&v| v == 0.5));
    assert!(matches!(composite(&fg, &bg, &AlphaMatte::ones((8, 8))), Err(DcamError::Contract(_))));
}

proptest! {
    #[test]
    fn composite_stays_between_layers_and_is_symmetric(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fg, bg, a) = (random_image(6, 5, &mut rng), random_image(6, 5, &mut rng), random_alpha(6, 5, &mut rng));
        let ab = composite(&fg, &bg, &a).unwrap();
        let ba = composite(&bg, &fg, &a).unwrap();
        Zip::from(&ab).and(&fg).and(&bg).for_each(|&o, &f, &b| assert!(o >= f.min(b) && o <= f.max(b)));
        Zip::from(&ab).and(&ba).and(&fg).and(&bg).for_each(|&x, &y, &f, &b| assert!(((x + y) - (f + b)).abs() < 1e-6));
    }
}

#[test]
fn hundred_scenes_satisfy_the_scene_invariants() {
    for i in 0..100 {
        let instances = 1 + i % 4;
        let mut spec = SceneSpec::new(48 + 8 * (i % 3), 64, instances);
        spec.shape = [ShapeFamily::Disk, ShapeFamily::Polygon, ShapeFamily::Blob, ShapeFamily::Mixed][i % 4];
        let scene = make_synthetic_scene(&spec, scene_seed(99, i)).unwrap();
        scene.validate().unwrap();
        assert_eq!(scene.instance_alphas.len(), instances);
        assert_eq!(scene.composite, composite(&scene.foreground, &scene.background, &scene.alpha).unwrap());
        let swapped = composite(&scene.background, &scene.foreground, &scene.alpha).unwrap();
        let sum = &scene.foreground + &scene.background;
        assert!(Zip::from(&(&scene.composite + &swapped)).and(&sum).all(|&a, &b| (a - b).abs() < 1e-6));
    }
}

#[test]
fn generation_is_deterministic_and_counts_instances() {
    let spec = SceneSpec {
        shape: ShapeFamily::Disk,
        ..SceneSpec::new(64, 64, 1)
    };
    assert_eq!(make_synthetic_scene(&spec, 7).unwrap(), make_synthetic_scene(&spec, 7).unwrap());
    assert_eq!(make_synthetic_scene(&SceneSpec::new(64, 64, 3), 7).unwrap().instance_alphas.len(), 3);
}

#[test]
fn crowded_default_scenes_always_place_every_instance() {
    for instances in 1..=4 {
        for seed in 0..150 {
            let scene = make_synthetic_scene(&SceneSpec::new(64, 64, instances), scene_seed(7, seed)).unwrap();
            assert_eq!(scene.instance_alphas.len(), instances);
        }
    }
}

#[test]
fn generation_errors() {
    for n in [0, 5] {
        assert!(matches!(make_synthetic_scene(&SceneSpec::new(64, 64, n), 0), Err(DcamError::Generation(_))));
    }
    let crowded = SceneSpec {
        radius: Some(20.0),
        ..SceneSpec::new(64, 64, 4)
    };
    assert!(matches!(make_synthetic_scene(&crowded, 0), Err(DcamError::Generation(_))));
    let thin = SceneSpec {
        edge_width: Some(1.0),
        ..SceneSpec::new(64, 64, 1)
    };
    assert!(make_synthetic_scene(&thin, 0).is_err());
}

#[test]
fn desk_datasets_generate_with_up_to_four_instances() {
    for max in [3, 4] {
        let scenes = generate_dataset(250, 1, 128, max).unwrap();
        assert!(scenes.iter().all(|s| s.validate().is_ok() && (1..=max).contains(&s.instance_alphas.len())));
        assert!(scenes.iter().any(|s| s.instance_alphas.len() == max));
    }
}

#[test]
fn soft_band_matches_brute_force_ring() {
    let spec = SceneSpec {
        shape: ShapeFamily::Disk,
        radius: Some(16.0),
        edge_width: Some(2.0),
        ..SceneSpec::new(64, 64, 1)
    };
    let scene = make_synthetic_scene(&spec, 3).unwrap();
    let a = &scene.alpha;
    let (mut m, mut cy, mut cx) = (0.0, 0.0, 0.0);
    for ((y, x), &v) in a.indexed_iter() {
        m += v as f64;
        cy += v as f64 * y as f64;
        cx += v as f64 * x as f64;
    }
    let (cy, cx) = (cy / m, cx / m);
    let mut ring = 0usize;
    for y in 0..64 {
        for x in 0..64 {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            ring += ((d - 16.0).abs() < 1.0) as usize;
        }
    }
    let fractional = a.iter().filter(|&&v| v > 0.0 && v < 1.0).count();
    let rel = (fractional as f64 - ring as f64).abs() / ring as f64;
    assert!(rel <= 0.10, "{fractional} vs {ring}");
    // band at least 2 px wide along a radius
    let row = a.row(cy.round() as usize);
    assert!(row.iter().filter(|&&v| v > 0.0 && v < 1.0).count() >= 4);
}

#[test]
fn neutral_augmentation_keeps_the_scene() {
    let scene = make_synthetic_scene(&SceneSpec::new(64, 64, 2), 5).unwrap();
    let out = apply_augmentation(&scene, &AugmentParams::neutral(), 64).unwrap();
    assert_eq!(out.alpha, scene.alpha);
    assert_eq!(out.composite, scene.composite);
    assert_eq!(out.instance_alphas, scene.instance_alphas);
}

#[test]
fn geometric_transform_matches_per_pixel_warp() {
    let mut scene = make_synthetic_scene(&SceneSpec::new(64, 64, 2), 11).unwrap();
    let mask = scene.alpha.mapv(|v| (v > 0.5) as u8 as f32);
    scene.alpha = mask.clone();
    scene.instance_alphas = vec![mask.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let crop = 48;
    let scale: f64 = rng.random_range(0.8..2.0);
    let n = (64.0 * scale).round() as usize;
    let params = AugmentParams {
        scale,
        crop_y: rng.random_range(0..=n - crop),
        crop_x: rng.random_range(0..=n - crop),
        ..AugmentParams::neutral()
    };
    let out = apply_augmentation(&scene, &params, crop).unwrap();
    let ratio = 64.0 / n as f64;
    let sample = |y: usize, x: usize| {
        let sy = ((y as f64 + 0.5) * ratio - 0.5).clamp(0.0, 63.0);
        let sx = ((x as f64 + 0.5) * ratio - 0.5).clamp(0.0, 63.0);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(63), (x0 + 1).min(63));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let m = |y: usize, x: usize| mask[[y, x]] as f64;
        (1.0 - fy) * ((1.0 - fx) * m(y0, x0) + fx * m(y0, x1)) + fy * ((1.0 - fx) * m(y1, x0) + fx * m(y1, x1))
    };
    for y in 0..crop {
        for x in 0..crop {
            let expected = sample(y + params.crop_y, x + params.crop_x);
            assert!((out.alpha[[y, x]] as f64 - expected).abs() < 1e-5);
            assert_eq!(out.instance_alphas[0][[y, x]], out.alpha[[y, x]]);
        }
    }
}

#[test]
fn augmentation_preserves_ranges_and_instances() {
    let scenes = generate_dataset(6, 21, 64, 4).unwrap();
    let cfg = AugmentConfig::new(32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for scene in &scenes {
        for _ in 0..5 {
            let out = augment(scene, &cfg, &mut rng).unwrap();
            out.validate().unwrap();
            assert_eq!(out.alpha.dim(), (32, 32));
            assert_eq!(out.instance_alphas.len(), scene.instance_alphas.len());
        }
    }
}

#[test]
fn oversized_crop_fails_after_retries() {
    let scene = make_synthetic_scene(&SceneSpec::new(32, 32, 1), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(augment(&scene, &AugmentConfig::new(128), &mut rng), Err(DcamError::Augmentation(_))));
    let mut small = AugmentConfig::new(48);
    small.scale_range = (0.5, 1.0);
    // the smallest covering scale lies outside the range
    assert!(augment(&scene, &small, &mut rng).is_err());
    small.scale_range = (0.5, 2.0);
    assert_eq!(augment(&scene, &small, &mut rng).unwrap().alpha.dim(), (48, 48));
}

#[test]
fn storage_round_trip_at_stored_precision() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = generate_dataset(10, 4, 40, 3).unwrap();
    save_dataset(&scenes, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 10);
    let q8 = |v: f32| (v * 255.0).round() / 255.0;
    let q16 = |v: f32| (v * 65535.0).round() / 65535.0;
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.spec, b.spec);
        assert!(Zip::from(&a.alpha).and(&b.alpha).all(|&x, &y| (q16(x) - y).abs() < 1e-7));
        assert!(Zip::from(&a.composite).and(&b.composite).all(|&x, &y| (q8(x) - y).abs() < 1e-7));
        for (x, y) in a.instance_alphas.iter().zip(&b.instance_alphas) {
            assert!(Zip::from(x).and(y).all(|&p, &q| (q16(p) - q).abs() < 1e-7));
        }
    }
}

#[test]
fn empty_dataset_and_broken_manifests() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&[], dir.path()).unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&generate_dataset(2, 4, 32, 1).unwrap(), dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("alphas").join("0001.png")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, DcamError::Dataset { record, .. } if record.starts_with("scene 0001")));
    assert!(err.to_string().contains("0001.png"));

    let manifest = dir.path().join(MANIFEST);
    let text = std::fs::read_to_string(&manifest).unwrap().replace("seed=", "sead=");
    std::fs::write(&manifest, text).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, DcamError::Dataset { record, reason } if record == "line 2" && reason.contains("seed")));
}

#[test]
fn resize_plane_is_identity_at_equal_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_alpha(7, 5, &mut rng);
    assert_eq!(resize_plane(a.view(), 7, 5), a);
    let up: Array2<f32> = resize_plane(AlphaMatte::ones((3, 3)).view(), 9, 6);
    assert!(up.iter().all(|&v| (v - 1.0).abs() < 1e-6));
}
