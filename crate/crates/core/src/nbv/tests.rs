use std::sync::OnceLock;

use nalgebra::{Matrix6, Vector6};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::harness::{default_camera, default_light};
use crate::refine::MeasurementSet;
use crate::render::{BsdfParams, SceneObject, Shape};
use crate::sdf::{build_sdf, TriangleMesh};

fn cube_scene() -> &'static (SceneDescription, SdfGrid) {
    static S: OnceLock<(SceneDescription, SdfGrid)> = OnceLock::new();
    S.get_or_init(|| {
        let shape = Shape::Cuboid { size: [40.0; 3] };
        let cube = SceneObject::new("cube", shape, Pose::identity(), BsdfParams::matte()).unwrap();
        let grid = build_sdf(&TriangleMesh::cuboid(Vec3::repeat(40.0)), 1.0, 8).unwrap();
        let scene = SceneDescription {
            objects: vec![cube],
            light: default_light(),
            ambient: 0.0,
            camera: default_camera(),
            world_from_camera: Pose::identity(),
        };
        (scene, grid)
    })
}

fn view(id: usize, eye: Vec3) -> ViewpointCandidate {
    let up = if eye.x.abs() + eye.y.abs() < 1e-9 {
        Vec3::y()
    } else {
        Vec3::z()
    };
    ViewpointCandidate::new(id, Pose::look_at(eye, Vec3::zeros(), up).unwrap())
}

fn planner<'a>(scene: &'a SceneDescription, grid: &'a SdfGrid, response: &'a ResponseCurve) -> Planner<'a> {
    Planner {
        scene,
        object: 0,
        grid,
        settings: PredictionSettings::default(),
        response,
        options: NbvOptions::default(),
    }
}

fn source<'a>(scene: &'a SceneDescription, response: &'a ResponseCurve, seed: u64) -> SimulatedSource<'a> {
    SimulatedSource {
        scene,
        object: 0,
        settings: PredictionSettings::default(),
        response,
        noise: CaptureNoise::default(),
        stride: 2,
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}

#[test]
fn identity_covariance_entropy() {
    let h = entropy(&Matrix6::identity()).unwrap();
    let expected = 3.0 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    assert!((h - expected).abs() < 1e-9, "{h} vs {expected}");
    let scaled = entropy(&(Matrix6::identity() * 4.0)).unwrap();
    assert!((scaled - h - 3.0 * 4f64.ln()).abs() < 1e-9);
    assert!((entropy_from_information(&Matrix6::identity()) - expected).abs() < 1e-9);
}

#[test]
fn singular_and_asymmetric_covariances() {
    let mut singular = Matrix6::identity();
    singular[(2, 2)] = 0.0;
    assert_eq!(entropy(&singular).unwrap(), f64::INFINITY);
    assert_eq!(entropy_from_information(&singular), f64::INFINITY);
    let mut skew = Matrix6::identity();
    skew[(0, 1)] = 0.5;
    assert!(matches!(entropy(&skew), Err(Error::Contract(_))));
}

#[test]
fn information_and_covariance_entropies_agree() {
    let a = Matrix6::from_fn(|i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
    let info = a * a.transpose() + Matrix6::identity() * 0.5;
    let cov = info.try_inverse().unwrap();
    let cov = (cov + cov.transpose()) * 0.5;
    assert!((entropy(&cov).unwrap() - entropy_from_information(&info)).abs() < 1e-9);
    let belief = PoseBelief::from_information(Pose::identity(), &info).unwrap();
    assert!((belief.covariance - cov).abs().max() < 1e-9 * cov.amax());
    assert!(PoseBelief::from_information(Pose::identity(), &Matrix6::zeros()).is_err());
}

#[test]
fn duplicated_measurements_halve_the_covariance() {
    let (_, grid) = cube_scene();
    let mut pts = Vec::new();
    for a in [-12.0, 0.0, 12.0] {
        for b in [-12.0, 0.0, 12.0] {
            pts.push(Vec3::new(20.0, a, b));
            pts.push(Vec3::new(a, 20.0, b));
            pts.push(Vec3::new(a, b, 20.0));
        }
    }
    let rays: Vec<Vec3> = pts.iter().map(|p| -p.normalize()).collect();
    let set = MeasurementSet::new(pts.clone(), vec![0.3; pts.len()], rays, -Vec3::z(), 0).unwrap();
    let once = fisher_information(std::slice::from_ref(&set), &Pose::identity(), grid);
    let twice = fisher_information(&[set.clone(), set], &Pose::identity(), grid);
    let c1 = PoseBelief::from_information(Pose::identity(), &once)
        .unwrap()
        .covariance;
    let c2 = PoseBelief::from_information(Pose::identity(), &twice)
        .unwrap()
        .covariance;
    assert!((c1 * 0.5 - c2).abs().max() <= 1e-9 * c1.amax());
}

proptest! {
    #[test]
    fn adding_information_never_raises_entropy(
        a in proptest::collection::vec(-3.0f64..3.0, 36),
        b in proptest::collection::vec(-3.0f64..3.0, 6),
    ) {
        let a = Matrix6::from_column_slice(&a);
        let base = a * a.transpose() + Matrix6::identity() * 1e-2;
        let v = Vector6::from_column_slice(&b);
        let more = base + v * v.transpose();
        prop_assert!(entropy_from_information(&more) <= entropy_from_information(&base) + 1e-9);
    }
}

#[test]
fn hemisphere_candidates_look_at_the_target() {
    let target = Vec3::new(10.0, -5.0, 20.0);
    let cands = hemisphere_candidates(&target, 400.0, 40, 35f64.to_radians()).unwrap();
    assert_eq!(cands.len(), 40);
    for (k, c) in cands.iter().enumerate() {
        assert_eq!(c.id, k);
        assert!(!c.visited);
        let eye = c.pose.translation();
        assert!(((eye - target).norm() - 400.0).abs() < 1e-9);
        let elevation = ((eye.z - target.z) / 400.0).asin();
        assert!(elevation >= 35f64.to_radians() - 1e-12);
        let axis = c.pose.rotate(&Vec3::z());
        assert!((axis - (target - eye).normalize()).norm() < 1e-9);
    }
    assert!(hemisphere_candidates(&target, 400.0, 0, 0.5).is_err());
    assert!(hemisphere_candidates(&target, 400.0, 10, 2.0).is_err());
}

#[test]
fn policy_names_round_trip() {
    for p in Policy::ALL {
        assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        assert_eq!(p.to_string(), p.name());
    }
    assert!("greedy".parse::<Policy>().is_err());
}

#[test]
fn side_view_beats_a_repeated_top_view() {
    let (scene, grid) = cube_scene();
    let response = ResponseCurve::linear();
    let plan = planner(scene, grid, &response);
    let belief = PoseBelief::from_information(Pose::identity(), &plan.options.prior_information()).unwrap();
    let top = view(9, Vec3::new(0.0, 0.0, 400.0));
    let acquired = plan.predict_candidate(&top, &belief, false).unwrap().unwrap();
    let cands = [
        view(0, Vec3::new(0.0, 20.0, 400.0)),
        view(1, Vec3::new(300.0, 60.0, 260.0)),
    ];
    let sel = plan
        .select_nbv(&cands, std::slice::from_ref(&acquired), &belief, false)
        .unwrap();
    assert_eq!(sel.best_id, 1, "{:?}", sel.scores);
    assert!(!sel.no_information);
    assert_eq!(sel.scores.len(), 2);
    let best = sel.scores.iter().find(|s| s.id == 1).unwrap();
    assert_eq!(best.entropy, sel.predicted_entropy);
    // Even the repeated view adds information over what was acquired.
    let without = entropy_from_information(
        &(plan.options.prior_information() + fisher_information(std::slice::from_ref(&acquired), &belief.pose, grid)),
    );
    assert!(sel.scores.iter().all(|s| s.entropy <= without + 1e-9));
}

#[test]
fn equal_scores_resolve_to_the_lowest_id() {
    let (scene, grid) = cube_scene();
    let response = ResponseCurve::linear();
    let plan = planner(scene, grid, &response);
    let belief = PoseBelief::from_information(Pose::identity(), &plan.options.prior_information()).unwrap();
    let eye = Vec3::new(250.0, 150.0, 250.0);
    let cands = [view(7, eye), view(3, eye), view(5, eye)];
    let sel = plan.select_nbv(&cands, &[], &belief, false).unwrap();
    assert_eq!(sel.best_id, 3);
}

#[test]
fn candidates_facing_away_predict_nothing() {
    let (scene, grid) = cube_scene();
    let response = ResponseCurve::linear();
    let plan = planner(scene, grid, &response);
    let belief = PoseBelief::from_information(Pose::identity(), &plan.options.prior_information()).unwrap();
    let away = |id: usize, eye: Vec3| ViewpointCandidate::new(id, Pose::look_at(eye, eye * 2.0, Vec3::z()).unwrap());
    let cands = [
        away(4, Vec3::new(0.0, 300.0, 300.0)),
        away(2, Vec3::new(300.0, 0.0, 300.0)),
    ];
    assert!(plan.predict_candidate(&cands[0], &belief, false).unwrap().is_none());
    assert!(plan.predict_candidate(&cands[0], &belief, true).unwrap().is_none());
    let sel = plan.select_nbv(&cands, &[], &belief, false).unwrap();
    assert!(sel.no_information);
    assert_eq!(sel.best_id, 2);
    let mut visited = cands.clone();
    visited.iter_mut().for_each(|c| c.visited = true);
    assert!(plan.select_nbv(&visited, &[], &belief, false).is_err());
}

fn cube_candidates() -> Vec<ViewpointCandidate> {
    hemisphere_candidates(&Vec3::zeros(), 400.0, 12, 30f64.to_radians()).unwrap()
}

fn start_pose() -> Pose {
    Pose::from_axis_angle(Vec3::new(0.02, -0.03, 0.04), Vec3::new(2.0, -1.5, 1.0))
}

fn jsonl(t: &Trajectory) -> String {
    let mut buf = Vec::new();
    t.write_jsonl(&mut buf, false).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn active_loop_is_deterministic_and_monotone() {
    let (scene, grid) = cube_scene();
    let response = ResponseCurve::linear();
    let plan = planner(scene, grid, &response);
    let cands = cube_candidates();
    let stop = StopCriteria {
        entropy_threshold: f64::NEG_INFINITY,
        max_views: 3,
    };
    let opts = RefineOptions::default();
    let run = |policy: Policy| {
        let mut src = source(scene, &response, 11);
        active_loop(&plan, &cands, &mut src, &start_pose(), &stop, policy, &opts, None, 5).unwrap()
    };
    for policy in [Policy::Nbv, Policy::Random, Policy::MaxDistance] {
        let a = run(policy);
        let b = run(policy);
        assert_eq!(jsonl(&a), jsonl(&b));
        assert_eq!(a.steps.len(), 3);
        let ids: std::collections::HashSet<usize> = a.steps.iter().map(|s| s.view_id).collect();
        assert_eq!(ids.len(), 3, "views are never revisited");
        for s in &a.steps {
            assert!(s.belief.entropy_nats <= s.entropy_without_view + 1e-6);
            assert!(s.trans_err.is_some() && s.rot_err.is_some());
        }
        assert_eq!(a.steps[0].predicted_entropy.is_some(), policy == Policy::Nbv);
    }
    let nbv = run(Policy::Nbv);
    let last = nbv.steps.last().unwrap();
    assert!(last.trans_err.unwrap() < 1.0 && last.rot_err.unwrap() < 1.0, "{last:?}");
    assert_eq!(nbv.views_to_success(5.0, 5.0), Some(1));
    assert!(nbv.success_at(7, 5.0, 5.0));
    assert!(!nbv.success_at(0, 5.0, 5.0));
}

#[test]
fn max_distance_spreads_views() {
    let (scene, grid) = cube_scene();
    let response = ResponseCurve::linear();
    let plan = planner(scene, grid, &response);
    let cands = cube_candidates();
    let stop = StopCriteria {
        entropy_threshold: f64::NEG_INFINITY,
        max_views: 2,
    };
    let mut src = source(scene, &response, 3);
    let t = active_loop(
        &plan,
        &cands,
        &mut src,
        &start_pose(),
        &stop,
        Policy::MaxDistance,
        &RefineOptions::default(),
        None,
        9,
    )
    .unwrap();
    let centre = |id: usize| *cands[id].pose.translation();
    let first = centre(t.steps[0].view_id);
    let second = (centre(t.steps[1].view_id) - first).norm();
    for c in &cands {
        assert!((centre(c.id) - first).norm() <= second + 1e-9);
    }
}

#[test]
fn entropy_threshold_stops_the_loop() {
    let (scene, grid) = cube_scene();
    let response = ResponseCurve::linear();
    let plan = planner(scene, grid, &response);
    let cands = cube_candidates();
    let stop = StopCriteria {
        entropy_threshold: f64::INFINITY,
        max_views: 4,
    };
    let mut src = source(scene, &response, 1);
    let t = active_loop(
        &plan,
        &cands,
        &mut src,
        &start_pose(),
        &stop,
        Policy::Random,
        &RefineOptions::default(),
        None,
        2,
    )
    .unwrap();
    assert_eq!(t.steps.len(), 1);
    let lines = jsonl(&t);
    let v: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(v["pose"].as_array().unwrap().len(), 16);
    assert_eq!(v["covariance"].as_array().unwrap().len(), 36);
    assert_eq!(v["policy"], "random");
    assert!(v.get("wall_time_s").is_none() && v["entropy"].is_number());
    assert!(active_loop(
        &plan,
        &[],
        &mut src,
        &start_pose(),
        &stop,
        Policy::Random,
        &RefineOptions::default(),
        None,
        2
    )
    .is_err());
}
