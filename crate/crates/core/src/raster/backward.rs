use rayon::prelude::*;

use super::{RasterError, RenderOutput};
use crate::map::FeatureMap;
use crate::scaffold::{weight_terms, ScaffoldGraph};
use crate::scene::{GaussianScene, LatentSource, RenderList, SceneError};
use crate::se3::Vec3;

/// Gradients with respect to per-splat render inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub color: Vec<Vec3>,
    /// Opacity gradient through the RGB image.
    pub opacity_rgb: Vec<f64>,
    /// Opacity gradient through the feature map.
    pub opacity_feature: Vec<f64>,
    /// Row-major `len × dim`.
    pub feature: Vec<f64>,
    pub dim: usize,
}

impl SplatGrads {
    fn zeros(n: usize, dim: usize) -> Self {
        Self {
            color: vec![Vec3::zeros(); n],
            opacity_rgb: vec![0.0; n],
            opacity_feature: vec![0.0; n],
            feature: vec![0.0; n * dim],
            dim,
        }
    }

    fn accumulate(&mut self, other: &SplatGrads) {
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += b;
        }
        for (a, b) in self.opacity_rgb.iter_mut().zip(&other.opacity_rgb) {
            *a += b;
        }
        for (a, b) in self.opacity_feature.iter_mut().zip(&other.opacity_feature) {
            *a += b;
        }
        for (a, b) in self.feature.iter_mut().zip(&other.feature) {
            *a += b;
        }
    }

    pub fn opacity(&self) -> Vec<f64> {
        self.opacity_rgb.iter().zip(&self.opacity_feature).map(|(a, b)| a + b).collect()
    }
}

/// Backpropagates image-space gradients through the compositing recorded in
/// `output`. Positions, rotations and scales are treated as constants.
///
/// Work is split into horizontal bands of `band_rows` pixels that accumulate
/// privately and are merged in band order, so results do not depend on the
/// thread count.
pub fn rasterize_backward(
    list: &RenderList,
    output: &RenderOutput,
    grad_rgb: &FeatureMap,
    grad_feature: &FeatureMap,
    band_rows: usize,
) -> Result<SplatGrads, RasterError> {
    let lists = output.contributions.as_ref().ok_or(RasterError::MissingContributions)?;
    let (w, h, dim) = (output.width, output.height, list.dim);
    if grad_rgb.width != w || grad_rgb.height != h || grad_rgb.channels != 3 {
        return Err(RasterError::Shape("rgb gradient does not match render".into()));
    }
    if grad_feature.width != w || grad_feature.height != h || grad_feature.channels != dim {
        return Err(RasterError::Shape("feature gradient does not match render".into()));
    }
    if output.feature.channels != dim {
        return Err(RasterError::FeatureDim { expected: output.feature.channels, got: dim });
    }
    let n = list.len();
    let band = band_rows.max(1);
    let bands: Vec<SplatGrads> = (0..h.div_ceil(band))
        .into_par_iter()
        .map(|b| {
            let mut g = SplatGrads::zeros(n, dim);
            let mut trans = Vec::new();
            let mut suffix_feat = vec![0.0; dim];
            for y in b * band..((b + 1) * band).min(h) {
                for x in 0..w {
                    let pix = y * w + x;
                    let contribs = lists.pixel(pix);
                    if contribs.is_empty() {
                        continue;
                    }
                    trans.clear();
                    let mut t = 1.0;
                    for c in contribs {
                        trans.push(t);
                        t *= 1.0 - c.alpha;
                    }
                    let g_rgb = grad_rgb.at(pix);
                    let g_feat = grad_feature.at(pix);
                    let mut suffix_rgb = [t * output.background.x, t * output.background.y, t * output.background.z];
                    suffix_feat.iter_mut().for_each(|v| *v = 0.0);
                    for (c, &ti) in contribs.iter().zip(&trans).rev() {
                        let i = c.splat as usize;
                        let s = &list.splats[i];
                        let f = list.feature(i);
                        let wgt = c.alpha * ti;
                        let inv = 1.0 / (1.0 - c.alpha);
                        let mut d_alpha_rgb = 0.0;
                        for ch in 0..3 {
                            g.color[i][ch] += g_rgb[ch] * wgt;
                            d_alpha_rgb += g_rgb[ch] * (s.color[ch] * ti - suffix_rgb[ch] * inv);
                            suffix_rgb[ch] += s.color[ch] * wgt;
                        }
                        let mut d_alpha_feat = 0.0;
                        let gf = &mut g.feature[i * dim..(i + 1) * dim];
                        for k in 0..dim {
                            gf[k] += g_feat[k] * wgt;
                            d_alpha_feat += g_feat[k] * (f[k] * ti - suffix_feat[k] * inv);
                            suffix_feat[k] += f[k] * wgt;
                        }
                        if !c.clamped {
                            g.opacity_rgb[i] += d_alpha_rgb * c.gauss;
                            g.opacity_feature[i] += d_alpha_feat * c.gauss;
                        }
                    }
                }
            }
            g
        })
        .collect();
    let mut total = SplatGrads::zeros(n, dim);
    for b in &bands {
        total.accumulate(b);
    }
    Ok(total)
}

/// Gradients with respect to trainable scene quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    /// Scene order (static first).
    pub color: Vec<Vec3>,
    pub opacity_rgb: Vec<f64>,
    pub opacity_feature: Vec<f64>,
    /// `static_count × dim`.
    pub static_latent: Vec<f64>,
    /// `nodes × dim`.
    pub base_features: Vec<f64>,
    /// `dynamic_count × K`.
    pub weight_offsets: Vec<f64>,
}

/// Routes splat gradients of a render list built by
/// [`crate::scene::render_list_at`] back onto the scene and scaffold.
pub fn scene_backward(scene: &GaussianScene, graph: &ScaffoldGraph, grads: &SplatGrads) -> Result<SceneGrads, SceneError> {
    let dim = scene.latent_dim;
    let ns = scene.static_gaussians.len();
    let n = scene.len();
    if grads.color.len() != n || grads.dim != dim {
        return Err(SceneError::Dimension(format!(
            "{} splat gradients of width {} for {n} gaussians of width {dim}",
            grads.color.len(),
            grads.dim
        )));
    }
    let k = graph.k;
    let mut base = vec![0.0; graph.node_count() * dim];
    let mut offsets = vec![0.0; scene.dynamic_gaussians.len() * k];
    for (j, g) in scene.dynamic_gaussians.iter().enumerate() {
        let LatentSource::Scaffold { binding, source_timestep } = &g.latent else {
            return Err(SceneError::InvalidGaussian { index: ns + j, reason: "dynamic gaussian without binding".into() });
        };
        let gf = &grads.feature[(ns + j) * dim..(ns + j + 1) * dim];
        if gf.iter().all(|v| *v == 0.0) {
            continue;
        }
        let neighbors = binding.neighbors(graph);
        let mut gw = vec![0.0; k];
        for (slot, (&node, &w)) in neighbors.iter().zip(&binding.neighbor_weights).enumerate() {
            let h = graph.base_feature(node);
            let row = &mut base[node * dim..(node + 1) * dim];
            for d in 0..dim {
                row[d] += w * gf[d];
                gw[slot] += gf[d] * h[d];
            }
        }
        let terms = weight_terms(&g.position, *source_timestep, binding.anchor, &binding.weight_offsets, graph)?;
        offsets[j * k..(j + 1) * k].copy_from_slice(&terms.offset_grad(&gw));
    }
    Ok(SceneGrads {
        color: grads.color.clone(),
        opacity_rgb: grads.opacity_rgb.clone(),
        opacity_feature: grads.opacity_feature.clone(),
        static_latent: grads.feature[..ns * dim].to_vec(),
        base_features: base,
        weight_offsets: offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{rasterize, RasterConfig};
    use super::*;
    use crate::scene::{CameraModel, Splat};
    use crate::se3::{Quaternion, SE3Pose};

    fn setup() -> (CameraModel, RenderList) {
        let cam = CameraModel { fx: 30.0, fy: 30.0, cx: 8.0, cy: 8.0, width: 16, height: 16, pose: SE3Pose::identity() };
        let mut list = RenderList::new(2);
        let spec = [
            ([0.0, 0.0, 2.0], 0.08, 0.6, [0.9, 0.1, 0.2], [1.0, -0.5]),
            ([0.05, 0.03, 2.4], 0.12, 0.7, [0.2, 0.8, 0.3], [0.3, 0.9]),
            ([-0.06, 0.02, 2.8], 0.1, 0.5, [0.1, 0.2, 0.9], [-0.7, 0.4]),
        ];
        for (p, s, o, c, f) in spec {
            list.push(
                Splat {
                    position: Vec3::new(p[0], p[1], p[2]),
                    rotation: Quaternion::IDENTITY,
                    scale: Vec3::new(s, s * 0.8, s),
                    opacity: o,
                    color: Vec3::new(c[0], c[1], c[2]),
                },
                &f,
            );
        }
        (cam, list)
    }

    fn weights(w: usize, h: usize, c: usize, seed: f64) -> FeatureMap {
        let data = (0..w * h * c).map(|i| ((i as f64 + seed) * 0.713).sin()).collect();
        FeatureMap::from_data(w, h, c, data).unwrap()
    }

    fn objective(cam: &CameraModel, list: &RenderList, wr: &FeatureMap, wf: &FeatureMap) -> f64 {
        let out = rasterize(cam, list, 2, &RasterConfig { background: Vec3::new(0.3, 0.2, 0.1), ..Default::default() }).unwrap();
        let a: f64 = out.rgb.data.iter().zip(&wr.data).map(|(x, y)| x * y).sum();
        let b: f64 = out.feature.data.iter().zip(&wf.data).map(|(x, y)| x * y).sum();
        a + b
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (cam, list) = setup();
        let cfg = RasterConfig { background: Vec3::new(0.3, 0.2, 0.1), ..Default::default() };
        let wr = weights(16, 16, 3, 0.0);
        let wf = weights(16, 16, 2, 5.0);
        let out = rasterize(&cam, &list, 2, &cfg).unwrap();
        let g = rasterize_backward(&list, &out, &wr, &wf, 4).unwrap();
        let eps = 1e-6;
        for i in 0..list.len() {
            for ch in 0..3 {
                let mut p = list.clone();
                p.splats[i].color[ch] += eps;
                let mut m = list.clone();
                m.splats[i].color[ch] -= eps;
                let fd = (objective(&cam, &p, &wr, &wf) - objective(&cam, &m, &wr, &wf)) / (2.0 * eps);
                assert!((fd - g.color[i][ch]).abs() < 1e-6, "color {i}/{ch}: {fd} vs {}", g.color[i][ch]);
            }
            for k in 0..2 {
                let mut p = list.clone();
                p.features[i * 2 + k] += eps;
                let mut m = list.clone();
                m.features[i * 2 + k] -= eps;
                let fd = (objective(&cam, &p, &wr, &wf) - objective(&cam, &m, &wr, &wf)) / (2.0 * eps);
                assert!((fd - g.feature[i * 2 + k]).abs() < 1e-6);
            }
            let mut p = list.clone();
            p.splats[i].opacity += eps;
            let mut m = list.clone();
            m.splats[i].opacity -= eps;
            let fd = (objective(&cam, &p, &wr, &wf) - objective(&cam, &m, &wr, &wf)) / (2.0 * eps);
            let an = g.opacity()[i];
            assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "opacity {i}: {fd} vs {an}");
        }
    }

    #[test]
    fn band_size_does_not_change_result() {
        let (cam, list) = setup();
        let out = rasterize(&cam, &list, 2, &RasterConfig::default()).unwrap();
        let wr = weights(16, 16, 3, 1.0);
        let wf = weights(16, 16, 2, 2.0);
        let a = rasterize_backward(&list, &out, &wr, &wf, 1).unwrap();
        let b = rasterize_backward(&list, &out, &wr, &wf, 16).unwrap();
        for (x, y) in a.opacity().iter().zip(b.opacity()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn requires_contributions() {
        let (cam, list) = setup();
        let out = rasterize(&cam, &list, 2, &RasterConfig { record_contributions: false, ..Default::default() }).unwrap();
        let err = rasterize_backward(&list, &out, &weights(16, 16, 3, 0.0), &weights(16, 16, 2, 0.0), 4);
        assert_eq!(err, Err(RasterError::MissingContributions));
    }
}
