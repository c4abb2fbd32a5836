//! Static and dynamic Gaussian sets, pinhole cameras and per-timestep
//! assembly of the render list.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scaffold::{warp_transform, GaussianBinding, ScaffoldError, ScaffoldGraph};
use crate::se3::{Quaternion, SE3Pose, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
}

/// Where a Gaussian's unified latent comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    /// Static Gaussians own their latent.
    Owned(Vec<f64>),
    /// Dynamic Gaussians blend scaffold base features.
    Scaffold { binding: GaussianBinding, source_timestep: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub position: Vec3,
    pub rotation: Quaternion,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
    pub latent: LatentSource,
}

impl Gaussian3D {
    pub fn validate(&self, index: usize, latent_dim: usize) -> Result<(), SceneError> {
        let bad = |reason: String| Err(SceneError::InvalidGaussian { index, reason });
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return bad(format!("opacity {} outside (0, 1)", self.opacity));
        }
        if self.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return bad(format!("non-positive scale {:?}", self.scale.as_slice()));
        }
        if self.position.iter().chain(self.color.iter()).any(|v| !v.is_finite()) {
            return bad("non-finite position or color".into());
        }
        if let LatentSource::Owned(f) = &self.latent {
            if f.len() != latent_dim {
                return bad(format!("latent has {} entries, expected {latent_dim}", f.len()));
            }
        }
        Ok(())
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self.latent, LatentSource::Scaffold { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene {
    pub latent_dim: usize,
    pub static_gaussians: Vec<Gaussian3D>,
    pub dynamic_gaussians: Vec<Gaussian3D>,
}

impl GaussianScene {
    pub fn new(latent_dim: usize) -> Self {
        Self { latent_dim, static_gaussians: Vec::new(), dynamic_gaussians: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.static_gaussians.len() + self.dynamic_gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All Gaussians, static first. Masks over the scene use this order.
    pub fn iter(&self) -> impl Iterator<Item = &Gaussian3D> {
        self.static_gaussians.iter().chain(&self.dynamic_gaussians)
    }

    pub fn validate(&self, graph: &ScaffoldGraph) -> Result<(), SceneError> {
        for (i, g) in self.static_gaussians.iter().enumerate() {
            g.validate(i, self.latent_dim)?;
            if g.is_dynamic() {
                return Err(SceneError::InvalidGaussian { index: i, reason: "static gaussian bound to scaffold".into() });
            }
        }
        let offset = self.static_gaussians.len();
        for (i, g) in self.dynamic_gaussians.iter().enumerate() {
            g.validate(offset + i, self.latent_dim)?;
            match &g.latent {
                LatentSource::Scaffold { binding, source_timestep } => {
                    graph.check_timestep(*source_timestep)?;
                    if binding.anchor >= graph.node_count()
                        || binding.neighbor_weights.len() != graph.k
                        || binding.weight_offsets.len() != graph.k
                    {
                        return Err(SceneError::InvalidGaussian {
                            index: offset + i,
                            reason: "binding does not match scaffold".into(),
                        });
                    }
                }
                LatentSource::Owned(_) => {
                    return Err(SceneError::InvalidGaussian {
                        index: offset + i,
                        reason: "dynamic gaussian without scaffold binding".into(),
                    })
                }
            }
        }
        if graph.latent_dim != self.latent_dim {
            return Err(SceneError::Dimension(format!(
                "scene latent dim {} vs scaffold {}",
                self.latent_dim, graph.latent_dim
            )));
        }
        Ok(())
    }

    /// Recomputes every dynamic binding's weights from the current scaffold.
    pub fn refresh_bindings(&mut self, graph: &ScaffoldGraph) -> Result<(), SceneError> {
        for g in &mut self.dynamic_gaussians {
            let mu = g.position;
            if let LatentSource::Scaffold { binding, source_timestep } = &mut g.latent {
                binding.refresh(&mu, *source_timestep, graph)?;
            }
        }
        Ok(())
    }
}

/// Pinhole camera. `pose` maps world to camera coordinates; the camera looks
/// down +z with +x right and +y down. Pixel `(u, v)` samples the image plane
/// at integer coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: SE3Pose,
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::InvalidCamera(format!("focal lengths {} {}", self.fx, self.fy)));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(SceneError::InvalidCamera(format!("principal point ({}, {})", self.cx, self.cy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidCamera("empty image".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fx: f64, fy: f64, width: usize, height: usize) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-12 {
            right = forward.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = Quaternion::from_rotation_matrix(&r);
        let pose = SE3Pose { rotation, translation: -(rotation.rotate(&eye)) };
        Self { fx, fy, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height, pose }
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.pose.apply_point(world)
    }

    pub fn project(&self, camera_point: &Vec3) -> (f64, f64) {
        (
            self.fx * camera_point.x / camera_point.z + self.cx,
            self.fy * camera_point.y / camera_point.z + self.cy,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Lifts masked pixels to world points, row-major. Pixels that are masked
/// but flagged invalid in the depth map are skipped.
pub fn backproject(depth: &DepthMap, camera: &CameraModel, mask: &[bool]) -> Result<Vec<Vec3>, SceneError> {
    let n = depth.width * depth.height;
    if depth.depth.len() != n || depth.valid.len() != n || mask.len() != n {
        return Err(SceneError::Dimension("depth, validity and mask sizes disagree".into()));
    }
    if depth.width != camera.width || depth.height != camera.height {
        return Err(SceneError::Dimension(format!(
            "depth map {}x{} vs camera {}x{}",
            depth.width, depth.height, camera.width, camera.height
        )));
    }
    let to_world = camera.pose.inverse();
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let i = v * depth.width + u;
            if !mask[i] || !depth.valid[i] {
                continue;
            }
            let d = depth.depth[i];
            let p = Vec3::new(d * (u as f64 - camera.cx) / camera.fx, d * (v as f64 - camera.cy) / camera.fy, d);
            points.push(to_world.apply_point(&p));
        }
    }
    Ok(points)
}

/// Dynamic Gaussians moved from their source timestep to `target`. Only
/// position and rotation change; the source scene is untouched.
pub fn warp_dynamic(scene: &GaussianScene, graph: &ScaffoldGraph, target: usize) -> Result<Vec<Gaussian3D>, SceneError> {
    graph.check_timestep(target)?;
    scene
        .dynamic_gaussians
        .iter()
        .map(|g| {
            let mut out = g.clone();
            if let LatentSource::Scaffold { binding, source_timestep } = &g.latent {
                let t = warp_transform(&g.position, *source_timestep, target, binding, graph)?;
                out.position = t.apply_point(&g.position);
                out.rotation = (t.rotation * g.rotation).normalize();
            }
            Ok(out)
        })
        .collect()
}

/// Geometry and appearance of one rasterized Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub position: Vec3,
    pub rotation: Quaternion,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

/// Gaussians ready for rasterization with materialized features
/// (row-major `len × dim`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenderList {
    pub splats: Vec<Splat>,
    pub features: Vec<f64>,
    pub dim: usize,
}

impl RenderList {
    pub fn new(dim: usize) -> Self {
        Self { splats: Vec::new(), features: Vec::new(), dim }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn push(&mut self, splat: Splat, feature: &[f64]) {
        assert_eq!(feature.len(), self.dim, "feature width");
        self.splats.push(splat);
        self.features.extend_from_slice(feature);
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Same geometry with replaced per-splat features of width `dim`.
    pub fn with_features(&self, features: Vec<f64>, dim: usize) -> Self {
        assert_eq!(features.len(), self.len() * dim, "feature buffer size");
        Self { splats: self.splats.clone(), features, dim }
    }

    /// Keeps only splats whose `keep` flag is set.
    pub fn filter(&self, keep: &[bool]) -> Self {
        let mut out = Self::new(self.dim);
        for (i, s) in self.splats.iter().enumerate() {
            if keep[i] {
                out.push(*s, self.feature(i));
            }
        }
        out
    }
}

fn splat_of(g: &Gaussian3D) -> Splat {
    Splat { position: g.position, rotation: g.rotation, scale: g.scale, opacity: g.opacity, color: g.color }
}

/// Concatenates static and (already warped) dynamic Gaussians, resolving
/// dynamic latents through the scaffold base features.
pub fn fuse(statics: &[Gaussian3D], warped: &[Gaussian3D], graph: &ScaffoldGraph) -> Result<RenderList, SceneError> {
    let dim = graph.latent_dim;
    let mut list = RenderList::new(dim);
    list.splats.reserve(statics.len() + warped.len());
    list.features.reserve((statics.len() + warped.len()) * dim);
    for (i, g) in statics.iter().chain(warped).enumerate() {
        match &g.latent {
            LatentSource::Owned(f) => {
                if f.len() != dim {
                    return Err(SceneError::Dimension(format!("gaussian {i} latent has {} entries, expected {dim}", f.len())));
                }
                list.push(splat_of(g), f);
            }
            LatentSource::Scaffold { binding, .. } => {
                if binding.anchor >= graph.node_count() {
                    return Err(ScaffoldError::InvalidAnchor(binding.anchor).into());
                }
                list.push(splat_of(g), &graph.binding_feature(binding));
            }
        }
    }
    Ok(list)
}

/// The full render list of `scene` at `timestep`.
pub fn render_list_at(scene: &GaussianScene, graph: &ScaffoldGraph, timestep: usize) -> Result<RenderList, SceneError> {
    let warped = warp_dynamic(scene, graph, timestep)?;
    fuse(&scene.static_gaussians, &warped, graph)
}
