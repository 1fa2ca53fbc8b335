use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn camera() -> CameraModel {
    CameraModel::new(300.0, 300.0, 63.5, 47.5, 128, 96, 40.0).unwrap()
}

fn overhead(distance: f64) -> Pose {
    Pose::look_at(Vec3::new(0.0, 0.0, distance), Vec3::zeros(), Vec3::y()).unwrap()
}

fn scene(objects: Vec<SceneObject>, light: [f64; 3]) -> SceneDescription {
    SceneDescription {
        objects,
        light: PointLight {
            position: light,
            intensity: 1e6,
        },
        ambient: 0.0,
        camera: camera(),
        world_from_camera: overhead(400.0),
    }
}

/// Slab whose top face is the plane z = 0.
fn floor(material: BsdfParams) -> SceneObject {
    SceneObject::new(
        "floor",
        Shape::Cuboid {
            size: [600.0, 600.0, 2.0],
        },
        Pose::from_translation(Vec3::new(0.0, 0.0, -1.0)),
        material,
    )
    .unwrap()
}

fn pixel_of(scene: &SceneDescription, p: &Vec3) -> usize {
    let q = scene.world_from_camera.inverse().transform_point(p);
    let u = scene.camera.project(&q).unwrap();
    u.y.round() as usize * scene.camera.width + u.x.round() as usize
}

fn lambertian() -> BsdfParams {
    BsdfParams::new(0.6, 0.0, 0.5, 0.0).unwrap()
}

#[test]
fn lambertian_plane_matches_the_analytic_shading() {
    let s = scene(vec![floor(lambertian())], [30.0, -20.0, 0.0]);
    let img = render_radiance(&s, RenderMode::SinglePath);
    let light = s.light_world();
    let mut checked = 0;
    for i in 0..img.len() {
        assert!(img.valid[i]);
        let u = Vec2::new((i % 128) as f64, (i / 128) as f64);
        let p = s
            .world_from_camera
            .transform_point(&s.camera.ray(&u).scale(img.depth[i]));
        assert!(p.z.abs() < 1e-6);
        let to_light = light - p;
        let r2 = to_light.norm_squared();
        let expected = 0.6 / std::f64::consts::PI * 1e6 * to_light.z / r2.sqrt() / r2;
        assert!((img.radiance[i] - expected).abs() <= 0.01 * expected, "pixel {i}");
        checked += 1;
    }
    assert_eq!(checked, 128 * 96);
}

#[test]
fn radiance_falls_off_with_the_square_of_distance() {
    let centre = 48 * 128 + 64;
    let at = |d: f64| {
        let s = scene(vec![floor(lambertian())], [0.0, 0.0, 0.0]).with_camera_pose(overhead(d));
        render_radiance(&s, RenderMode::SinglePath).radiance[centre]
    };
    let ratio = at(800.0) / at(400.0);
    assert!((ratio - 0.25).abs() < 0.0025, "{ratio}");
}

#[test]
fn convex_object_has_no_interreflection() {
    let ball = SceneObject::new(
        "ball",
        Shape::Icosphere {
            radius: 60.0,
            subdivisions: 3,
        },
        Pose::identity(),
        BsdfParams::chrome(),
    )
    .unwrap();
    let s = scene(vec![ball], [20.0, 0.0, 0.0]);
    let (single, multi) = render_single_and_multi(&s, 3);
    let peak = multi.radiance.iter().cloned().fold(0.0, f64::max);
    assert!(peak > 0.0);
    for (a, b) in single.radiance.iter().zip(&multi.radiance) {
        assert!((a - b).abs() <= 1e-6 * peak);
    }
    let missing = predict_missing_mask(&single, &multi, 0.7).unwrap();
    let flagged = (0..missing.len())
        .filter(|&i| single.object[i].is_some() && missing[i])
        .count();
    assert_eq!(flagged, 0);
}

fn groove_scene(material: BsdfParams) -> SceneDescription {
    let groove = SceneObject::new(
        "groove",
        Shape::VGroove {
            width: 100.0,
            height: 40.0,
            groove_depth: 30.0,
            length: 120.0,
        },
        Pose::identity(),
        material,
    )
    .unwrap();
    scene(vec![groove], [20.0, 0.0, 0.0])
}

/// Object pixels seeing one of the slanted groove faces.
fn groove_faces(paths: &PathImage) -> Vec<usize> {
    (0..paths.paths.len())
        .filter(|&i| paths.paths[i].vertices.first().is_some_and(|v| v.normal.z.abs() < 0.9))
        .collect()
}

#[test]
fn chrome_groove_is_flagged_as_interreflection() {
    let s = groove_scene(BsdfParams::chrome());
    let paths = trace_paths(&s, 3);
    let m = [BsdfParams::chrome()];
    let single = paths.radiance(&m, 0.0, 1e6, 1);
    let multi = paths.radiance(&m, 0.0, 1e6, 3);
    let faces = groove_faces(&paths);
    assert!(faces.len() > 500, "{}", faces.len());
    let missing = predict_missing_mask(&single, &multi, 0.7).unwrap();
    let flagged = faces.iter().filter(|&&i| missing[i]).count();
    // Near the rim the mirrored ray can leave the groove without a second hit.
    assert!(flagged as f64 >= 0.7 * faces.len() as f64, "{flagged}/{}", faces.len());
    let inner = faces
        .iter()
        .filter(|&&i| paths.paths[i].vertices.len() > 1 && paths.paths[i].vertices[1].object == 0);
    assert!(inner.clone().count() > 0);
    assert!(inner.clone().all(|&i| multi.radiance[i] > single.radiance[i]));
    let outer = (0..missing.len()).filter(|&i| paths.paths[i].vertices.first().is_some_and(|v| v.normal.z > 0.99));
    assert!(outer.clone().count() > 500);
    assert!(outer.filter(|&i| missing[i]).count() == 0);
}

#[test]
fn multi_path_never_loses_energy() {
    for material in [BsdfParams::medium(), BsdfParams::chrome(), BsdfParams::matte()] {
        let (single, multi) = render_single_and_multi(&groove_scene(material), 3);
        for (a, b) in single.radiance.iter().zip(&multi.radiance) {
            assert!(*a <= *b + 1e-12);
        }
    }
}

#[test]
fn occluders_cast_shadows() {
    let block = SceneObject::new(
        "block",
        Shape::Cuboid {
            size: [40.0, 40.0, 40.0],
        },
        Pose::from_translation(Vec3::new(0.0, 0.0, 100.0)),
        lambertian(),
    )
    .unwrap();
    let s = scene(vec![floor(lambertian()), block], [100.0, 0.0, 0.0]);
    let img = render_radiance(&s, RenderMode::SinglePath);
    let shadowed = pixel_of(&s, &Vec3::new(-45.0, 0.0, 0.0));
    let lit = pixel_of(&s, &Vec3::new(50.0, 0.0, 0.0));
    assert_eq!(img.object[shadowed], Some(0));
    assert_eq!(img.radiance[shadowed], 0.0);
    assert!(img.radiance[lit] > 0.0);
}

#[test]
fn renders_are_deterministic() {
    let s = groove_scene(BsdfParams::medium());
    let a = render_radiance(&s, RenderMode::MultiPath { bounces: 3 });
    let b = render_radiance(&s, RenderMode::MultiPath { bounces: 3 });
    assert_eq!(a, b);
    let r = ResponseCurve::gamma(2.2);
    let p = synthesize_pattern_pair(&s, &r, &PatternSettings::default(), 3).unwrap();
    let q = synthesize_pattern_pair(&s, &r, &PatternSettings::default(), 3).unwrap();
    assert_eq!(p.left.values(), q.left.values());
    assert_eq!(p.right.values(), q.right.values());
}

#[test]
fn linear_response_scales_with_exposure() {
    let s = scene(vec![floor(lambertian())], [0.0, 0.0, 0.0]);
    let rad = render_radiance(&s, RenderMode::SinglePath);
    let r = ResponseCurve::linear();
    let a = render_image(&rad, &r, 0.2).unwrap();
    let b = render_image(&rad, &r, 0.4).unwrap();
    for (x, y) in a.values().iter().zip(b.values()) {
        assert!(*y < 1.0);
        assert!((y - 2.0 * x).abs() < 1e-12);
    }
    assert!(render_image(&rad, &r, 0.0).is_err());
}

#[test]
fn stripes_never_run_longer_than_two() {
    let p = StripePattern::new(11, 2.0, 512);
    let bits: Vec<bool> = (0..256).map(|k| p.is_strong(k as f64 * 2.0 + 1.0)).collect();
    assert!(bits.windows(3).all(|w| !(w[0] == w[1] && w[1] == w[2])));
    assert!(bits.iter().any(|&b| b) && bits.iter().any(|&b| !b));
    assert!(!p.is_strong(f64::NAN));
    assert_eq!(p, StripePattern::new(11, 2.0, 512));
    assert_ne!(p, StripePattern::new(12, 2.0, 512));
}

#[test]
fn pattern_pair_is_consistent_with_depth() {
    let s = scene(vec![floor(BsdfParams::matte())], [20.0, 0.0, 0.0]);
    let pair = synthesize_pattern_pair(&s, &ResponseCurve::gamma(2.2), &PatternSettings::default(), 1).unwrap();
    // The plane sits at z = 400, so the right image is the left shifted by
    // fb/z = 30 px.
    let y = 48;
    let mut diff = 0.0;
    let mut n = 0;
    for x in 40..120 {
        let l = pair.left.get(x, y);
        let r = pair.right.get(x - 30, y);
        diff += (l - r).abs();
        n += 1;
    }
    assert!(diff / (n as f64) < 0.02, "{}", diff / n as f64);
    let contrast =
        pair.left.values().iter().cloned().fold(0.0, f64::max) - pair.left.values().iter().cloned().fold(1.0, f64::min);
    assert!(contrast > 0.2);
    assert!((pair.disparity[y * 128 + 64].unwrap() - 30.0).abs() < 1e-9);
    let bad = PatternSettings {
        weak: 2.0,
        ..PatternSettings::default()
    };
    assert!(synthesize_pattern_pair(&s, &ResponseCurve::gamma(2.2), &bad, 1).is_err());
}

#[test]
fn missing_mask_respects_the_ratio_threshold() {
    let mk = |v: Vec<f64>| RadianceImage {
        width: v.len(),
        height: 1,
        depth: vec![1.0; v.len()],
        valid: vec![true; v.len()],
        object: vec![Some(0); v.len()],
        radiance: v,
    };
    let single = mk(vec![1.0, 0.69, 0.71, 0.0]);
    let multi = mk(vec![1.0, 1.0, 1.0, 0.0]);
    assert_eq!(
        predict_missing_mask(&single, &multi, 0.7).unwrap(),
        vec![false, true, false, true]
    );
    assert_eq!(
        predict_missing_mask(&single, &multi, 0.0).unwrap(),
        vec![false, false, false, true]
    );
    assert!(predict_missing_mask(&single, &mk(vec![1.0]), 0.7).is_err());
}

#[test]
fn matte_frontal_face_is_mostly_measured() {
    let block = SceneObject::new(
        "block",
        Shape::Cuboid {
            size: [80.0, 60.0, 40.0],
        },
        Pose::identity(),
        BsdfParams::matte(),
    )
    .unwrap();
    let s = scene(vec![block], [20.0, 0.0, 0.0]);
    let pred = predict_depth_map(
        &s,
        0,
        &Pose::identity(),
        &s.world_from_camera,
        &PredictionSettings::default(),
        &ResponseCurve::gamma(2.2),
    )
    .unwrap();
    assert!(pred.object_pixels > 1000);
    assert_eq!(pred.interreflection_missing, 0);
    let frac = pred.depth.valid_count() as f64 / pred.object_pixels as f64;
    assert!(frac >= 0.9, "{frac}");
}

#[test]
fn capture_noise_follows_the_predicted_variance() {
    let s = scene(vec![floor(BsdfParams::matte())], [20.0, 0.0, 0.0]);
    let settings = PredictionSettings::default();
    let r = ResponseCurve::gamma(2.2);
    let wc = s.world_from_camera;
    let clean = simulate_capture(
        &s,
        0,
        &wc,
        &settings,
        &r,
        &CaptureNoise::clean(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let noisy = simulate_capture(
        &s,
        0,
        &wc,
        &settings,
        &r,
        &CaptureNoise::default(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let mut z2 = 0.0;
    let mut n = 0;
    for i in 0..clean.depth.len() {
        if let (Some((a, var)), Some((b, _))) = (clean.depth.get(i), noisy.depth.get(i)) {
            z2 += (a - b).powi(2) / var;
            n += 1;
        }
    }
    assert!(n > 1000);
    let chi = z2 / n as f64;
    assert!((chi - 1.0).abs() < 0.1, "{chi}");
}

#[test]
fn footprint_averages_the_stripes() {
    let p = StripePattern::new(3, 2.0, 256);
    for k in 0..100 {
        let u = k as f64 * 2.0 + 1.0;
        let point = if p.is_strong(u) { 1.0 } else { 0.0 };
        assert_eq!(p.strong_fraction(u, 0.0), point);
        assert!((p.strong_fraction(u, 1.0) - point).abs() < 1e-12);
        // Straddling an edge mixes the two strips evenly.
        let edge = p.strong_fraction(u + 1.0, 1.0);
        let mix = 0.5 * (point + if p.is_strong(u + 2.0) { 1.0 } else { 0.0 });
        assert!((edge - mix).abs() < 1e-12);
    }
    assert_eq!(p.strong_fraction(f64::NAN, 1.0), 0.0);
}
