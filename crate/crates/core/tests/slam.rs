use std::sync::Arc;

use hiersplat_core::frame::Frame;
use hiersplat_core::geometry::RigidPose;
use hiersplat_core::gaussian_map::GaussianMap;
use hiersplat_core::scene_synth::{generate, SceneSpec, Sequence};
use hiersplat_core::slam::{run, track, FrameInput, Slam, SlamConfig, SlamError};
use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sequence(frames: usize) -> Sequence {
    generate(&SceneSpec::toy_room(0, 48, 48, frames)).unwrap()
}

fn input(seq: &Sequence, i: usize) -> FrameInput {
    FrameInput {
        timestamp: i as f64,
        frame: seq.frames[i].frame.clone(),
        prior: None,
        gt_pose: Some(seq.frames[i].pose),
    }
}

/// Map built from the first frame at its true pose.
fn first_frame_map(seq: &Sequence, config: &SlamConfig) -> GaussianMap {
    let mut slam = Slam::new(config.clone(), seq.intrinsics, Some(Arc::new(seq.tree.clone()))).unwrap();
    slam.process(&input(seq, 0)).unwrap();
    slam.into_state().map
}

fn config() -> SlamConfig {
    SlamConfig {
        tracking_iters: 80,
        mapping_iters: 150,
        ..SlamConfig::default()
    }
}

#[test]
fn stationary_camera_stays_put() {
    let seq = sequence(1);
    let c = config();
    let map = first_frame_map(&seq, &c);
    let gt = &seq.frames[0].pose;
    let r = track(&map, &seq.frames[0].frame, gt, &seq.intrinsics, &c).unwrap();
    let (dt, dr) = r.pose.distance(gt);
    assert!(dt < 2e-3 && dr.to_degrees() < 0.1, "drifted {dt} m, {} deg", dr.to_degrees());
}

#[test]
fn small_perturbations_are_recovered() {
    let seq = sequence(1);
    let c = config();
    let map = first_frame_map(&seq, &c);
    let gt = &seq.frames[0].pose;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let mut dir = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let rot = dir.fixed_rows::<3>(0).normalize() * 1f64.to_radians();
        let trans = dir.fixed_rows::<3>(3).normalize() * 0.01;
        dir.fixed_rows_mut::<3>(0).copy_from(&rot);
        dir.fixed_rows_mut::<3>(3).copy_from(&trans);
        let start = gt.retract(&dir);
        let r = track(&map, &seq.frames[0].frame, &start, &seq.intrinsics, &c).unwrap();
        let (dt, dr) = r.pose.distance(gt);
        assert!(dt < 5e-3 && dr.to_degrees() < 0.5, "left at {dt} m, {} deg", dr.to_degrees());
        assert!(r.trace.last().unwrap() < &r.trace[0]);
    }
}

#[test]
fn noise_frame_is_reported_as_divergence() {
    let seq = sequence(1);
    let c = config();
    let map = first_frame_map(&seq, &c);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (w, h) = (seq.intrinsics.width, seq.intrinsics.height);
    let mut noise = Frame::new(w, h, (0..3 * w * h).map(|_| rng.random()).collect());
    noise.depth = Some((0..w * h).map(|_| rng.random_range(0.1..20.0)).collect());
    let err = track(&map, &noise, &seq.frames[0].pose, &seq.intrinsics, &c).unwrap_err();
    assert!(matches!(err, SlamError::TrackingDiverged(_)), "{err}");
}

#[test]
fn tracking_leaves_the_map_untouched() {
    let seq = sequence(2);
    let c = config();
    let map = first_frame_map(&seq, &c);
    let before = map.clone();
    track(&map, &seq.frames[1].frame, &seq.frames[0].pose, &seq.intrinsics, &c).unwrap();
    assert_eq!(map, before);
}

#[test]
fn runs_are_bitwise_reproducible() {
    let seq = sequence(4);
    let c = SlamConfig {
        tracking_iters: 10,
        mapping_iters: 10,
        map_every: 2,
        ..SlamConfig::default()
    };
    let inputs: Vec<_> = (0..4).map(|i| input(&seq, i)).collect();
    let tree = Some(Arc::new(seq.tree.clone()));
    let a = run(&inputs, &seq.intrinsics, &c, tree.clone()).unwrap();
    let b = run(&inputs, &seq.intrinsics, &c, tree).unwrap();
    for ((_, p), (_, q)) in a.state.trajectory.iter().zip(&b.state.trajectory) {
        assert_eq!(p.to_matrix(), q.to_matrix());
    }
    assert_eq!(a.state.map, b.state.map);
}

#[test]
fn identity_is_first_pose_without_ground_truth() {
    let seq = sequence(1);
    let mut i = input(&seq, 0);
    i.gt_pose = None;
    let mut slam = Slam::new(config(), seq.intrinsics, None).unwrap();
    let p = slam.process(&i).unwrap();
    assert_eq!(p.to_matrix(), RigidPose::identity().to_matrix());
}
