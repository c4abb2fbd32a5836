//! Software splatting rasterizer that composites RGB and an N-dimensional
//! feature in a single front-to-back pass.
//!
//! Per pixel, Gaussians are visited in ascending camera depth (ties by
//! index). A Gaussian touches a pixel only inside its `extent_sigma`
//! Mahalanobis ellipse. `α = min(alpha_max, opacity · exp(-½ dᵀ Σ⁻¹ d))`, and
//! traversal stops once transmittance falls below `min_transmittance`.

mod backward;
mod reference;
mod tiled;

pub use backward::{rasterize_backward, scene_backward, SceneGrads, SplatGrads};
pub use reference::rasterize_reference;
pub use tiled::rasterize;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::FeatureMap;
use crate::scene::{CameraModel, SceneError, Splat};
use crate::se3::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("feature width {got} does not match latent dimension {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("render output carries no contribution lists")]
    MissingContributions,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Camera(#[from] SceneError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    pub tile_size: usize,
    pub background: Vec3,
    pub alpha_max: f64,
    pub min_transmittance: f64,
    /// Added to the projected covariance diagonal, in pixels².
    pub cov_regularization: f64,
    pub near_plane: f64,
    pub extent_sigma: f64,
    /// Keep per-pixel contribution lists for the backward pass.
    pub record_contributions: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            background: Vec3::zeros(),
            alpha_max: 0.99,
            min_transmittance: 1e-4,
            cov_regularization: 0.3,
            near_plane: 0.01,
            extent_sigma: 3.0,
            record_contributions: true,
        }
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatProjection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Radius (pixels) of a circle containing the extent ellipse.
    pub radius: f64,
}

impl SplatProjection {
    /// Mahalanobis distance squared from the footprint center to `(x, y)`.
    #[inline]
    pub fn power(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d.x;
        let dy = y - self.mean2d.y;
        self.conic[(0, 0)] * dx * dx + 2.0 * self.conic[(0, 1)] * dx * dy + self.conic[(1, 1)] * dy * dy
    }
}

/// 3D covariance `R S Sᵀ Rᵀ` of a splat.
pub fn covariance3d(splat: &Splat) -> Matrix3<f64> {
    let r = splat.rotation.normalize().to_rotation_matrix();
    let s = Matrix3::from_diagonal(&splat.scale);
    let m = r * s;
    m * m.transpose()
}

/// Perspective projection with first-order covariance propagation
/// `J W Σ Wᵀ Jᵀ`. Returns `None` for Gaussians at or behind the near plane.
pub fn project_gaussian(splat: &Splat, camera: &CameraModel, cfg: &RasterConfig) -> Option<SplatProjection> {
    let pc = camera.to_camera(&splat.position);
    if pc.z <= cfg.near_plane {
        return None;
    }
    let (u, v) = camera.project(&pc);
    let z2 = pc.z * pc.z;
    let j = Matrix2x3::new(
        camera.fx / pc.z,
        0.0,
        -camera.fx * pc.x / z2,
        0.0,
        camera.fy / pc.z,
        -camera.fy * pc.y / z2,
    );
    let w = camera.pose.rotation_matrix();
    let jw = j * w;
    let cov = jw * covariance3d(splat) * jw.transpose() + Matrix2::identity() * cfg.cov_regularization;
    // symmetrize against round-off
    let cov = (cov + cov.transpose()) * 0.5;
    let conic = cov.try_inverse()?;
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    Some(SplatProjection {
        mean2d: Vector2::new(u, v),
        cov2d: cov,
        depth: pc.z,
        conic,
        radius: cfg.extent_sigma * lambda_max.sqrt(),
    })
}

/// One Gaussian's contribution to one pixel, in compositing order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub splat: u32,
    pub alpha: f64,
    /// `exp(-½ dᵀ Σ⁻¹ d)` before opacity scaling.
    pub gauss: f64,
    /// Whether `alpha` hit the `alpha_max` clamp.
    pub clamped: bool,
}

/// Per-pixel contribution lists, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContributionLists {
    pub offsets: Vec<usize>,
    pub entries: Vec<Contribution>,
}

impl ContributionLists {
    pub fn pixel(&self, index: usize) -> &[Contribution] {
        &self.entries[self.offsets[index]..self.offsets[index + 1]]
    }

    pub fn pixel_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub rgb: FeatureMap,
    pub feature: FeatureMap,
    pub alpha: FeatureMap,
    pub background: Vec3,
    pub contributions: Option<ContributionLists>,
}

impl RenderOutput {
    pub fn feature_dim(&self) -> usize {
        self.feature.channels
    }
}

pub(crate) fn check_inputs(camera: &CameraModel, features: usize, splats: usize, dim: usize, list_dim: usize) -> Result<(), RasterError> {
    camera.validate()?;
    if list_dim != dim {
        return Err(RasterError::FeatureDim { expected: dim, got: list_dim });
    }
    if features != splats * dim {
        return Err(RasterError::Shape(format!("{features} feature values for {splats} splats of width {dim}")));
    }
    Ok(())
}

/// Projects every splat; culled entries are `None`.
pub(crate) fn project_all(splats: &[Splat], camera: &CameraModel, cfg: &RasterConfig) -> Vec<Option<SplatProjection>> {
    use rayon::prelude::*;
    splats.par_iter().map(|s| project_gaussian(s, camera, cfg)).collect()
}

/// Ascending depth, ties by index.
pub(crate) fn depth_order(a: (usize, f64), b: (usize, f64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}
