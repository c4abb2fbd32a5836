//! Deterministic synthetic dynamic scenes with known labels, motion and
//! per-task embeddings. The ground truth doubles as the feature encoder that
//! distillation learns from.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{FrameTargets, TaskSpec};
use crate::map::{resize, FeatureMap, MapError, ResizeMethod};
use crate::raster::{rasterize, RasterConfig, RasterError};
use crate::scaffold::{trajectory_distance, GaussianBinding, ScaffoldError, ScaffoldGraph, TrajectoryNode};
use crate::scene::{CameraModel, Gaussian3D, GaussianScene, LatentSource, RenderList, SceneError, Splat};
use crate::se3::{Quaternion, SE3Pose, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldgenError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("frame {frame} out of range for {frames} frames")]
    Frame { frame: usize, frames: usize },
    #[error("could not draw {count} embeddings of width {dim} with |cos| <= {bound}")]
    Embeddings { count: usize, dim: usize, bound: f64 },
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius } => 4.0 * PI * radius * radius,
            Primitive::Box { half_extents: [a, b, c] } => 8.0 * (a * b + b * c + a * c),
        }
    }

    /// A uniformly distributed surface point and its outward normal.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
        match *self {
            Primitive::Sphere { radius } => {
                let n = loop {
                    let v = Vec3::new(
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    );
                    if v.norm() > 1e-9 {
                        break v.normalize();
                    }
                };
                (n * radius, n)
            }
            Primitive::Box { half_extents: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vec3::zeros();
                let mut n = Vec3::zeros();
                for k in 0..3 {
                    p[k] = if k == axis { side * h[k] } else { rng.random_range(-h[k]..h[k]) };
                }
                n[axis] = side;
                (p, n)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// Constant per-frame translation and rotation (axis-angle vector) about
    /// the object center.
    Linear { velocity: Vec3, spin: Vec3 },
    /// Explicit object-to-world pose per frame.
    Track(Vec<SE3Pose>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub label: String,
    pub primitive: Primitive,
    pub color: Vec3,
    pub gaussians: usize,
    /// Scaffold nodes sampled on this object.
    pub nodes: usize,
    /// Object center at frame 0 (ignored by explicit tracks).
    pub center: Vec3,
    pub motion: Motion,
}

impl ObjectSpec {
    pub fn is_dynamic(&self) -> bool {
        !matches!(self.motion, Motion::Static)
    }

    /// Object-to-world pose per frame.
    pub fn track(&self, frames: usize) -> Vec<SE3Pose> {
        match &self.motion {
            Motion::Static => vec![SE3Pose::from_translation(self.center.x, self.center.y, self.center.z); frames],
            Motion::Linear { velocity, spin } => (0..frames)
                .map(|t| {
                    let tf = t as f64;
                    let angle = spin.norm() * tf;
                    let rotation = if angle > 0.0 { Quaternion::from_axis_angle(spin, angle) } else { Quaternion::IDENTITY };
                    SE3Pose::new(rotation, self.center + velocity * tf)
                })
                .collect(),
            Motion::Track(poses) => poses.clone(),
        }
    }
}

/// Cameras circle `target` once over the sequence while the elevation
/// oscillates between the given bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitSpec {
    pub target: Vec3,
    pub distance: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub start_azimuth_deg: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            target: Vec3::zeros(),
            distance: 4.5,
            elevation_min_deg: -15.0,
            elevation_max_deg: 45.0,
            start_azimuth_deg: 0.0,
            focal: 103.0,
            width: 96,
            height: 96,
        }
    }
}

impl OrbitSpec {
    /// Camera at an arbitrary azimuth/elevation (degrees) on the orbit sphere.
    pub fn camera_at(&self, azimuth_deg: f64, elevation_deg: f64) -> CameraModel {
        let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = self.target + Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin()) * self.distance;
        CameraModel::look_at(eye, self.target, Vec3::new(0.0, 0.0, 1.0), self.focal, self.focal, self.width, self.height)
    }

    /// Azimuth and elevation of frame `t` in a sequence of `frames`. Takes
    /// fractional frames for views in between the track.
    pub fn angles(&self, t: f64, frames: usize) -> (f64, f64) {
        let phase = t / frames as f64;
        let mid = 0.5 * (self.elevation_min_deg + self.elevation_max_deg);
        let amp = 0.5 * (self.elevation_max_deg - self.elevation_min_deg);
        (self.start_azimuth_deg + 360.0 * phase, mid + amp * (2.0 * PI * 2.0 * phase).sin())
    }

    pub fn track(&self, frames: usize) -> Vec<CameraModel> {
        (0..frames)
            .map(|t| {
                let (a, e) = self.angles(t as f64, frames);
                self.camera_at(a, e)
            })
            .collect()
    }

    /// A view halfway between two track cameras, never seen in training.
    pub fn held_out(&self, frame: usize, frames: usize) -> CameraModel {
        let (a, e) = self.angles(frame as f64 + 0.5, frames);
        self.camera_at(a, e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub latent_dim: usize,
    /// Scaffold neighbor count.
    pub k: usize,
    pub labels: Vec<String>,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub orbit: OrbitSpec,
    pub tasks: Vec<TaskSpec>,
    /// Ground-truth opacity range.
    #[serde(default = "default_opacity")]
    pub opacity: [f64; 2],
}

fn default_opacity() -> [f64; 2] {
    [0.85, 0.9]
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl SyntheticSceneSpec {
    /// The default three-object desk scene: a moving dog, a turning cow and
    /// a static table, 24 frames at 96×96.
    pub fn desk(seed: u64) -> Self {
        let objects = vec![
            ObjectSpec {
                label: "dog".into(),
                primitive: Primitive::Sphere { radius: 0.42 },
                color: Vec3::new(0.85, 0.55, 0.2),
                gaussians: 500,
                nodes: 12,
                center: Vec3::new(1.1, 0.65, -0.3),
                motion: Motion::Linear { velocity: Vec3::new(0.0, 0.0, 0.025), spin: Vec3::zeros() },
            },
            ObjectSpec {
                label: "cow".into(),
                primitive: Primitive::Box { half_extents: [0.4, 0.28, 0.32] },
                color: Vec3::new(0.9, 0.9, 0.85),
                gaussians: 500,
                nodes: 12,
                center: Vec3::new(-1.1, 0.65, 0.0),
                motion: Motion::Linear { velocity: Vec3::new(0.0, -0.01, 0.0), spin: Vec3::new(0.0, 0.0, 0.06) },
            },
            ObjectSpec {
                label: "table".into(),
                primitive: Primitive::Box { half_extents: [0.55, 0.4, 0.2] },
                color: Vec3::new(0.35, 0.2, 0.1),
                gaussians: 500,
                nodes: 12,
                center: Vec3::new(0.0, -1.25, 0.0),
                motion: Motion::Static,
            },
        ];
        Self {
            seed,
            frames: 24,
            latent_dim: 32,
            k: 8,
            labels: vec!["dog".into(), "cow".into(), "table".into()],
            objects,
            orbit: OrbitSpec::default(),
            tasks: vec![
                TaskSpec { name: "clip".into(), dim: 64, width: 96, height: 96, resize: ResizeMethod::Bilinear },
                TaskSpec { name: "sam".into(), dim: 32, width: 24, height: 24, resize: ResizeMethod::Area },
            ],
            opacity: default_opacity(),
        }
    }

    pub fn validate(&self) -> Result<(), WorldgenError> {
        let bad = |m: String| Err(WorldgenError::Spec(m));
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.latent_dim == 0 || self.k == 0 {
            return bad("latent dimension and k must be positive".into());
        }
        if self.objects.is_empty() {
            return bad("no objects".into());
        }
        for (i, name) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(name) {
                return bad(format!("duplicate label {name:?}"));
            }
        }
        for o in &self.objects {
            if !self.labels.contains(&o.label) {
                return bad(format!("object label {:?} not in label set", o.label));
            }
            if o.gaussians == 0 || o.nodes == 0 {
                return bad(format!("object {:?} needs at least one gaussian and one node", o.label));
            }
            if o.nodes > o.gaussians {
                return bad(format!("object {:?} has more nodes than gaussians", o.label));
            }
            let ok = match o.primitive {
                Primitive::Sphere { radius } => radius > 0.0,
                Primitive::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            };
            if !ok {
                return bad(format!("object {:?} has a degenerate primitive", o.label));
            }
            if let Motion::Track(p) = &o.motion {
                if p.len() != self.frames {
                    return bad(format!("object {:?} track has {} poses for {} frames", o.label, p.len(), self.frames));
                }
            }
        }
        let nodes: usize = self.objects.iter().map(|o| o.nodes).sum();
        if nodes <= self.k {
            return bad(format!("{nodes} scaffold nodes cannot support k = {}", self.k));
        }
        if self.tasks.iter().any(|t| t.dim == 0 || t.width == 0 || t.height == 0) {
            return bad("tasks need positive dimensions".into());
        }
        let [lo, hi] = self.opacity;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("opacity range {lo}..{hi} outside (0, 1)"));
        }
        if self.orbit.width == 0 || self.orbit.height == 0 || !(self.orbit.focal > 0.0) {
            return bad("orbit camera needs positive size and focal length".into());
        }
        Ok(())
    }
}

/// Ground-truth appearance of one Gaussian at frame 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtGaussian {
    pub object: usize,
    pub label: usize,
    pub position: Vec3,
    pub rotation: Quaternion,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbeddings {
    pub task: String,
    /// `C × D_s`, unit rows.
    pub rows: Vec<Vec<f64>>,
}

/// Everything needed to re-render exact supervision for any view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: Vec<String>,
    /// Per-object label index and frame-wise object-to-world poses.
    pub object_labels: Vec<usize>,
    pub object_tracks: Vec<Vec<SE3Pose>>,
    /// Scene order: static Gaussians first.
    pub gaussians: Vec<GtGaussian>,
    pub tasks: Vec<TaskSpec>,
    pub embeddings: Vec<TaskEmbeddings>,
    pub background: Vec3,
}

/// Oracle renders of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct GtFrame {
    pub rgb: FeatureMap,
    pub alpha: FeatureMap,
    /// Per-pixel label index; `C` marks background.
    pub labels: Vec<usize>,
    /// Composited weight of dynamic Gaussians per pixel.
    pub dynamic: Vec<f64>,
    /// Full-resolution feature map per task.
    pub features: Vec<FeatureMap>,
}

/// Dynamic weight at or below which a pixel counts as static.
pub const STATIC_PIXEL_LIMIT: f64 = 0.01;

impl GroundTruth {
    pub fn frames(&self) -> usize {
        self.object_tracks.first().map_or(0, Vec::len)
    }

    pub fn class_count(&self) -> usize {
        self.labels.len()
    }

    pub fn task_index(&self, name: &str) -> Result<usize, WorldgenError> {
        self.tasks.iter().position(|t| t.name == name).ok_or_else(|| WorldgenError::UnknownTask(name.into()))
    }

    pub fn embedding_rows(&self, task: usize) -> &[Vec<f64>] {
        &self.embeddings[task].rows
    }

    /// Label index per Gaussian in scene order.
    pub fn gaussian_labels(&self) -> Vec<usize> {
        self.gaussians.iter().map(|g| g.label).collect()
    }

    /// Ground-truth splats at `frame`, moved rigidly with their objects.
    pub fn splats(&self, frame: usize) -> Result<Vec<Splat>, WorldgenError> {
        let frames = self.frames();
        if frame >= frames {
            return Err(WorldgenError::Frame { frame, frames });
        }
        Ok(self
            .gaussians
            .iter()
            .map(|g| {
                let track = &self.object_tracks[g.object];
                let delta = track[frame].compose(&track[0].inverse());
                Splat {
                    position: delta.apply_point(&g.position),
                    rotation: (delta.rotation * g.rotation).normalize(),
                    scale: g.scale,
                    opacity: g.opacity,
                    color: g.color,
                }
            })
            .collect())
    }

    /// Renders RGB, labels, dynamic weight and every task feature map.
    ///
    /// Features are `[one-hot label | dynamic flag | task embeddings...]`
    /// composited in a single pass.
    pub fn render(&self, camera: &CameraModel, frame: usize) -> Result<GtFrame, WorldgenError> {
        let c = self.class_count();
        let dims: Vec<usize> = self.tasks.iter().map(|t| t.dim).collect();
        let width = c + 1 + dims.iter().sum::<usize>();
        let mut list = RenderList::new(width);
        let mut feat = vec![0.0; width];
        for (g, s) in self.gaussians.iter().zip(self.splats(frame)?) {
            feat.iter_mut().for_each(|v| *v = 0.0);
            feat[g.label] = 1.0;
            feat[c] = if self.object_is_dynamic(g.object) { 1.0 } else { 0.0 };
            let mut at = c + 1;
            for (t, d) in dims.iter().enumerate() {
                feat[at..at + d].copy_from_slice(&self.embeddings[t].rows[g.label]);
                at += d;
            }
            list.push(s, &feat);
        }
        let cfg = RasterConfig { background: self.background, record_contributions: false, ..Default::default() };
        let out = rasterize(camera, &list, width, &cfg)?;
        let n = out.width * out.height;
        let mut labels = Vec::with_capacity(n);
        let mut dynamic = Vec::with_capacity(n);
        let mut features: Vec<FeatureMap> =
            dims.iter().map(|d| FeatureMap::zeros(out.width, out.height, *d)).collect();
        for p in 0..n {
            let px = out.feature.at(p);
            let label = if out.alpha.data[p] < 0.5 {
                c
            } else {
                let mut best = 0;
                for k in 1..c {
                    if px[k] > px[best] {
                        best = k;
                    }
                }
                best
            };
            labels.push(label);
            dynamic.push(px[c]);
            let mut at = c + 1;
            for (t, d) in dims.iter().enumerate() {
                features[t].data[p * d..(p + 1) * d].copy_from_slice(&px[at..at + d]);
                at += d;
            }
        }
        Ok(GtFrame { rgb: out.rgb, alpha: out.alpha, labels, dynamic, features })
    }

    fn object_is_dynamic(&self, object: usize) -> bool {
        let track = &self.object_tracks[object];
        track.iter().any(|p| p.max_abs_diff(&track[0]) > 0.0)
    }

    /// Binary mask of pixels labeled `label` in a GT label image.
    pub fn object_mask(labels: &[usize], label: usize) -> Vec<bool> {
        labels.iter().map(|l| *l == label).collect()
    }
}

/// Stand-in for a frozen image encoder: returns the oracle feature map of a
/// view at the task's native resolution. Every call is counted.
#[derive(Debug)]
pub struct SyntheticEncoder<'a> {
    gt: &'a GroundTruth,
    cameras: &'a [CameraModel],
    calls: AtomicUsize,
}

impl<'a> SyntheticEncoder<'a> {
    pub fn new(gt: &'a GroundTruth, cameras: &'a [CameraModel]) -> Self {
        Self { gt, cameras, calls: AtomicUsize::new(0) }
    }

    pub fn invocations(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Encodes track frame `frame` for `task`.
    pub fn encode(&self, frame: usize, task: &str) -> Result<FeatureMap, WorldgenError> {
        let camera = self
            .cameras
            .get(frame)
            .ok_or(WorldgenError::Frame { frame, frames: self.cameras.len() })?;
        self.encode_view(camera, frame, task)
    }

    /// Encodes an arbitrary view of timestep `frame`.
    pub fn encode_view(&self, camera: &CameraModel, frame: usize, task: &str) -> Result<FeatureMap, WorldgenError> {
        let t = self.gt.task_index(task)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let full = self.gt.render(camera, frame)?;
        let spec = &self.gt.tasks[t];
        Ok(resize(&full.features[t], spec.width, spec.height, ResizeMethod::Area)?)
    }
}

/// Generated scene, scaffold, ground truth and camera track.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub scene: GaussianScene,
    pub graph: ScaffoldGraph,
    pub ground_truth: GroundTruth,
    pub cameras: Vec<CameraModel>,
}

fn rotation_to(normal: &Vec3) -> Quaternion {
    // Shortest rotation taking +z onto `normal`.
    let z = Vec3::new(0.0, 0.0, 1.0);
    let c = z.dot(normal);
    if c < -1.0 + 1e-12 {
        return Quaternion::from_axis_angle(&Vec3::new(1.0, 0.0, 0.0), PI);
    }
    let axis = z.cross(normal);
    Quaternion { w: 1.0 + c, x: axis.x, y: axis.y, z: axis.z }.normalize()
}

fn farthest_points(points: &[Vec3], count: usize) -> Vec<usize> {
    let mut chosen = vec![0];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[0]).norm_squared()).collect();
    while chosen.len() < count {
        let mut best = 0;
        for i in 1..points.len() {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min((p - points[best]).norm_squared());
        }
    }
    chosen
}

fn unit_embeddings(rng: &mut ChaCha8Rng, count: usize, dim: usize, bound: f64) -> Result<Vec<Vec<f64>>, WorldgenError> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while rows.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(WorldgenError::Embeddings { count, dim, bound });
        }
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            continue;
        }
        let v: Vec<f64> = v.iter().map(|x| x / n).collect();
        if rows.iter().all(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs() <= bound) {
            rows.push(v);
        }
    }
    Ok(rows)
}

/// Initial latent scale for owned latents and base features.
pub const LATENT_INIT_STD: f64 = 0.01;

/// Builds the scene described by `spec`. The returned scene starts from
/// neutral appearance (color 0.5, opacity 0.5) and small random latents;
/// geometry and motion match the ground truth exactly.
pub fn generate(spec: &SyntheticSceneSpec) -> Result<Generated, WorldgenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frames = spec.frames;
    let tracks: Vec<Vec<SE3Pose>> = spec.objects.iter().map(|o| o.track(frames)).collect();

    // Surface samples in object-local coordinates.
    let mut samples: Vec<Vec<(Vec3, Vec3)>> = Vec::new();
    for o in &spec.objects {
        samples.push((0..o.gaussians).map(|_| o.primitive.sample(&mut rng)).collect());
    }

    // Scaffold nodes by farthest-point sampling per object.
    let mut node_tracks: Vec<Vec<SE3Pose>> = Vec::new();
    for (oi, o) in spec.objects.iter().enumerate() {
        let locals: Vec<Vec3> = samples[oi].iter().map(|s| s.0).collect();
        for idx in farthest_points(&locals, o.nodes) {
            let local = SE3Pose::from_translation(locals[idx].x, locals[idx].y, locals[idx].z);
            node_tracks.push(tracks[oi].iter().map(|p| p.compose(&local)).collect());
        }
    }
    let provisional: Vec<TrajectoryNode> = node_tracks.iter().map(|p| TrajectoryNode::new(p.clone(), 1.0)).collect();
    let mut spacing = Vec::with_capacity(provisional.len());
    for (i, a) in provisional.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, b) in provisional.iter().enumerate() {
            if i != j {
                best = best.min(trajectory_distance(a, b)?);
            }
        }
        spacing.push(best);
    }
    spacing.sort_by(f64::total_cmp);
    let radius = spacing[spacing.len() / 2].max(1e-6);
    let nodes: Vec<TrajectoryNode> = node_tracks.into_iter().map(|p| TrajectoryNode::new(p, radius)).collect();

    let init = Normal::new(0.0, LATENT_INIT_STD).expect("valid normal");
    let d = spec.latent_dim;
    let base: Vec<f64> = (0..nodes.len() * d).map(|_| init.sample(&mut rng)).collect();
    let graph = ScaffoldGraph::new(nodes, spec.k, d, base)?;

    let label_index = |l: &str| spec.labels.iter().position(|x| x == l).expect("validated label");
    let mut statics = Vec::new();
    let mut dynamics = Vec::new();
    let mut gt_static = Vec::new();
    let mut gt_dynamic = Vec::new();
    for (oi, o) in spec.objects.iter().enumerate() {
        let spacing = (o.primitive.area() / o.gaussians as f64).sqrt();
        for (local, normal) in &samples[oi] {
            let jitter = rng.random_range(0.8..1.2);
            let s = 0.6 * spacing * jitter;
            let scale = Vec3::new(s, s, 0.35 * s);
            let position = tracks[oi][0].apply_point(local);
            let rotation = (tracks[oi][0].rotation * rotation_to(normal)).normalize();
            let opacity = rng.random_range(spec.opacity[0]..=spec.opacity[1]);
            let gt = GtGaussian { object: oi, label: label_index(&o.label), position, rotation, scale, opacity, color: o.color };
            let latent = if o.is_dynamic() {
                LatentSource::Scaffold { binding: GaussianBinding::bind(&position, 0, &graph)?, source_timestep: 0 }
            } else {
                LatentSource::Owned((0..d).map(|_| init.sample(&mut rng)).collect())
            };
            let g = Gaussian3D { position, rotation, scale, opacity: 0.5, color: Vec3::new(0.5, 0.5, 0.5), latent };
            if o.is_dynamic() {
                dynamics.push(g);
                gt_dynamic.push(gt);
            } else {
                statics.push(g);
                gt_static.push(gt);
            }
        }
    }
    let scene = GaussianScene { latent_dim: d, static_gaussians: statics, dynamic_gaussians: dynamics };
    scene.validate(&graph)?;

    let mut embeddings = Vec::with_capacity(spec.tasks.len());
    for t in &spec.tasks {
        embeddings.push(TaskEmbeddings { task: t.name.clone(), rows: unit_embeddings(&mut rng, spec.labels.len(), t.dim, 0.3)? });
    }
    gt_static.extend(gt_dynamic);
    let ground_truth = GroundTruth {
        labels: spec.labels.clone(),
        object_labels: spec.objects.iter().map(|o| label_index(&o.label)).collect(),
        object_tracks: tracks,
        gaussians: gt_static,
        tasks: spec.tasks.clone(),
        embeddings,
        background: Vec3::zeros(),
    };
    Ok(Generated { scene, graph, ground_truth, cameras: spec.orbit.track(frames) })
}

/// Supervision for every track frame, produced through `encoder`.
pub fn training_targets(gt: &GroundTruth, encoder: &SyntheticEncoder<'_>, cameras: &[CameraModel]) -> Result<Vec<FrameTargets>, WorldgenError> {
    cameras
        .iter()
        .enumerate()
        .map(|(t, cam)| {
            let frame = gt.render(cam, t)?;
            let features = gt.tasks.iter().map(|task| encoder.encode_view(cam, t, &task.name)).collect::<Result<_, _>>()?;
            Ok(FrameTargets {
                rgb: frame.rgb,
                static_mask: Some(frame.dynamic.iter().map(|d| *d <= STATIC_PIXEL_LIMIT).collect()),
                features,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaffold::{arap_loss, smoothness_losses};

    fn small_spec() -> SyntheticSceneSpec {
        let mut spec = SyntheticSceneSpec::desk(3);
        for o in &mut spec.objects {
            o.gaussians = 120;
        }
        spec.frames = 4;
        spec.orbit.width = 32;
        spec.orbit.height = 32;
        spec.orbit.focal = 34.0;
        spec.tasks = vec![
            TaskSpec { name: "clip".into(), dim: 16, width: 32, height: 32, resize: ResizeMethod::Bilinear },
            TaskSpec { name: "sam".into(), dim: 8, width: 8, height: 8, resize: ResizeMethod::Area },
        ];
        spec
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 4;
        assert_ne!(generate(&other).unwrap().scene, a.scene);
    }

    #[test]
    fn embeddings_are_unit_and_spread() {
        let g = generate(&small_spec()).unwrap();
        for e in &g.ground_truth.embeddings {
            for (i, a) in e.rows.iter().enumerate() {
                assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
                for b in &e.rows[..i] {
                    assert!(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs() <= 0.3);
                }
            }
        }
    }

    #[test]
    fn static_object_has_constant_scaffold() {
        let mut spec = small_spec();
        spec.objects.truncate(1);
        spec.objects[0].motion = Motion::Static;
        spec.objects[0].nodes = 10;
        let g = generate(&spec).unwrap();
        for n in &g.graph.nodes {
            assert!(n.poses.iter().all(|p| *p == n.poses[0]));
        }
        assert_eq!(arap_loss(&g.graph).value, 0.0);
        let s = smoothness_losses(&g.graph);
        assert_eq!((s.velocity.value, s.acceleration.value), (0.0, 0.0));
        assert!(g.scene.dynamic_gaussians.is_empty());
    }

    #[test]
    fn desk_scaffold_has_no_cross_object_edges() {
        let spec = SyntheticSceneSpec::desk(0);
        let g = generate(&spec).unwrap();
        let mut owner = Vec::new();
        for (oi, o) in spec.objects.iter().enumerate() {
            owner.extend(std::iter::repeat_n(oi, o.nodes));
        }
        for (i, e) in g.graph.edges.iter().enumerate() {
            assert!(e.iter().all(|j| owner[*j] == owner[i]), "node {i} edges {e:?}");
        }
        assert_eq!(g.scene.len(), 1500);
        g.scene.validate(&g.graph).unwrap();
    }

    #[test]
    fn encoder_shape_and_count() {
        let g = generate(&small_spec()).unwrap();
        let enc = SyntheticEncoder::new(&g.ground_truth, &g.cameras);
        let f = enc.encode(1, "sam").unwrap();
        assert_eq!((f.width, f.height, f.channels), (8, 8, 8));
        assert_eq!(enc.invocations(), 1);
        assert!(matches!(enc.encode(0, "nope"), Err(WorldgenError::UnknownTask(_))));
        assert!(enc.encode(9, "sam").is_err());
    }

    #[test]
    fn encoder_matches_embedding_rerender() {
        // Compositing is linear, so the task map equals the composited
        // one-hot labels multiplied by the embedding table.
        let g = generate(&small_spec()).unwrap();
        let gt = &g.ground_truth;
        let frame = gt.render(&g.cameras[2], 2).unwrap();
        let c = gt.class_count();
        let mut list = RenderList::new(c);
        for (gg, s) in gt.gaussians.iter().zip(gt.splats(2).unwrap()) {
            let mut onehot = vec![0.0; c];
            onehot[gg.label] = 1.0;
            list.push(s, &onehot);
        }
        let out = rasterize(&g.cameras[2], &list, c, &RasterConfig { record_contributions: false, ..Default::default() }).unwrap();
        let emb = gt.embedding_rows(0);
        for p in 0..out.width * out.height {
            let w = out.feature.at(p);
            for k in 0..16 {
                let expect: f64 = (0..c).map(|l| w[l] * emb[l][k]).sum();
                assert!((frame.features[0].at(p)[k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_view_encodes_to_zero() {
        let g = generate(&small_spec()).unwrap();
        let enc = SyntheticEncoder::new(&g.ground_truth, &g.cameras);
        // Looking straight away from the scene.
        let cam = CameraModel::look_at(
            Vec3::new(0.0, 0.0, 10.0),
            Vec3::new(0.0, 0.0, 20.0),
            Vec3::new(0.0, 1.0, 0.0),
            30.0,
            30.0,
            16,
            16,
        );
        let f = enc.encode_view(&cam, 0, "clip").unwrap();
        assert!(f.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gt_tracks_move_dynamic_objects_only() {
        let g = generate(&small_spec()).unwrap();
        let gt = &g.ground_truth;
        let s0 = gt.splats(0).unwrap();
        let s3 = gt.splats(3).unwrap();
        for (i, gg) in gt.gaussians.iter().enumerate() {
            let moved = (s0[i].position - s3[i].position).norm() > 1e-9;
            assert_eq!(moved, gt.object_is_dynamic(gg.object));
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec();
        s.frames = 1;
        assert!(generate(&s).is_err());
        let mut s = small_spec();
        s.objects[0].label = "cat".into();
        assert!(generate(&s).is_err());
        let mut s = small_spec();
        for o in &mut s.objects {
            o.nodes = 2;
        }
        assert!(generate(&s).is_err());
    }
}
