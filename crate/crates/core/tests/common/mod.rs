//! Generators and fixtures shared by the integration tests.
#![allow(dead_code)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scaffold4d_core::distill::{frame_objective, FeatureField, FrameTargets, Stage, TaskSpec, TrainConfig};
use scaffold4d_core::map::{FeatureMap, ResizeMethod};
use scaffold4d_core::scaffold::{GaussianBinding, ScaffoldGraph, TrajectoryNode};
use scaffold4d_core::scene::{CameraModel, Gaussian3D, GaussianScene, LatentSource, RenderList, Splat};
use scaffold4d_core::se3::{Quaternion, SE3Pose, Vec3};
use scaffold4d_core::worldgen::SyntheticSceneSpec;

pub fn arb_unit_quaternion() -> impl Strategy<Value = Quaternion> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("away from zero", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|q| Quaternion::new(q[0], q[1], q[2], q[3]).normalize())
}

pub fn arb_vec3(r: f64) -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-r..r).prop_map(|v| Vec3::new(v[0], v[1], v[2]))
}

pub fn arb_pose() -> impl Strategy<Value = SE3Pose> {
    (arb_unit_quaternion(), arb_vec3(3.0)).prop_map(|(q, t)| SE3Pose::new(q, t))
}

/// Positive weights normalized to sum to one, paired with poses.
pub fn arb_weighted_poses(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<SE3Pose>)> {
    (1..=max).prop_flat_map(|n| (prop::collection::vec(0.01f64..1.0, n), prop::collection::vec(arb_pose(), n))).prop_map(
        |(w, p)| {
            let s: f64 = w.iter().sum();
            (w.iter().map(|v| v / s).collect(), p)
        },
    )
}

/// A random scaffold with `k < nodes`, moving nodes and 3-wide features.
pub fn arb_graph() -> impl Strategy<Value = ScaffoldGraph> {
    (1usize..=4, 2usize..=4)
        .prop_flat_map(|(k, t)| {
            let m = (k + 1)..=(k + 5);
            (Just(k), Just(t), m).prop_flat_map(|(k, t, m)| {
                (
                    Just(k),
                    prop::collection::vec(prop::collection::vec(arb_pose(), t), m),
                    prop::collection::vec(-1.0f64..1.0, m * 3),
                    prop::collection::vec(0.2f64..2.0, m),
                )
            })
        })
        .prop_map(|(k, poses, feats, radii)| {
            let nodes = poses.into_iter().zip(radii).map(|(p, r)| TrajectoryNode::new(p, r)).collect();
            ScaffoldGraph::new(nodes, k, 3, feats).expect("valid random graph")
        })
}

pub fn camera(width: usize, height: usize) -> CameraModel {
    let f = width as f64 * 1.1;
    CameraModel::look_at(Vec3::new(0.0, -4.0, 0.5), Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), f, f, width, height)
}

/// `n` random Gaussians around the origin with `dim`-wide features.
pub fn random_render_list(seed: u64, n: usize, dim: usize) -> RenderList {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut list = RenderList::new(dim);
    for _ in 0..n {
        let q = Quaternion::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let splat = Splat {
            position: Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)),
            rotation: if q.norm() > 1e-3 { q.normalize() } else { Quaternion::IDENTITY },
            scale: Vec3::new(rng.random_range(0.03..0.3), rng.random_range(0.03..0.3), rng.random_range(0.03..0.3)),
            opacity: rng.random_range(0.05..0.99),
            color: Vec3::new(rng.random(), rng.random(), rng.random()),
        };
        let feature: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        list.push(splat, &feature);
    }
    list
}

/// The desk scene shrunk to a few seconds of training.
pub fn tiny_spec(seed: u64) -> SyntheticSceneSpec {
    let mut spec = SyntheticSceneSpec::desk(seed);
    for o in &mut spec.objects {
        o.gaussians = 60;
        o.nodes = 4;
    }
    spec.frames = 3;
    spec.latent_dim = 8;
    spec.k = 4;
    spec.orbit.width = 24;
    spec.orbit.height = 24;
    spec.orbit.focal = 26.0;
    spec.tasks = vec![
        TaskSpec { name: "clip".into(), dim: 16, width: 24, height: 24, resize: ResizeMethod::Bilinear },
        TaskSpec { name: "sam".into(), dim: 8, width: 12, height: 12, resize: ResizeMethod::Area },
    ];
    spec
}

/// Two static and three scaffold-bound Gaussians seen by an 8×8 camera,
/// with one 4-channel task decoded at 4×4.
pub fn five_gaussian_field() -> (FeatureField, FrameTargets) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 3;
    let poses = |x: f64, z: f64| vec![SE3Pose::from_translation(x, 0.0, z), SE3Pose::from_translation(x + 0.05, 0.0, z - 0.03)];
    let nodes = vec![
        TrajectoryNode::new(poses(-0.3, 0.1), 0.6),
        TrajectoryNode::new(poses(0.25, -0.2), 0.6),
        TrajectoryNode::new(poses(0.1, 0.35), 0.6),
    ];
    let base: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let graph = ScaffoldGraph::new(nodes, 2, d, base).unwrap();
    let gaussian = |p: Vec3, latent: LatentSource, rng: &mut ChaCha8Rng| Gaussian3D {
        position: p,
        rotation: Quaternion::from_axis_angle(&Vec3::new(0.3, 1.0, 0.2), rng.random_range(0.0..3.0)),
        scale: Vec3::new(0.25, 0.2, 0.15),
        opacity: rng.random_range(0.3..0.7),
        color: Vec3::new(rng.random(), rng.random(), rng.random()),
        latent,
    };
    let mut scene = GaussianScene::new(d);
    for p in [Vec3::new(-0.4, 0.5, -0.3), Vec3::new(0.4, 0.6, 0.3)] {
        let f = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = gaussian(p, LatentSource::Owned(f), &mut rng);
        scene.static_gaussians.push(g);
    }
    for p in [Vec3::new(-0.2, 0.0, 0.05), Vec3::new(0.2, -0.1, -0.1), Vec3::new(0.05, 0.1, 0.3)] {
        let mut binding = GaussianBinding::bind(&p, 0, &graph).unwrap();
        binding.weight_offsets = (0..graph.k).map(|_| rng.random_range(-0.05..0.05)).collect();
        binding.refresh(&p, 0, &graph).unwrap();
        let g = gaussian(p, LatentSource::Scaffold { binding, source_timestep: 0 }, &mut rng);
        scene.dynamic_gaussians.push(g);
    }
    let task = TaskSpec { name: "t".into(), dim: 4, width: 4, height: 4, resize: ResizeMethod::Area };
    let field = FeatureField::new(scene, graph, &[task], 3);
    let rgb = FeatureMap::from_data(8, 8, 3, (0..192).map(|_| rng.random()).collect()).unwrap();
    let feat = FeatureMap::from_data(4, 4, 4, (0..64).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    (field, FrameTargets { rgb, static_mask: None, features: vec![feat] })
}

pub fn five_gaussian_objective(field: &FeatureField, targets: &FrameTargets, t: usize) -> f64 {
    let (l, _) = frame_objective(field, &camera(8, 8), t, targets, Stage::Dynamic, &TrainConfig::default()).unwrap();
    l.tasks.iter().sum::<f64>() + l.photometric
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}
