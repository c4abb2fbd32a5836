use rayon::prelude::*;

use super::tiled::assemble_rows;
use super::{check_inputs, depth_order, project_all, Contribution, RasterConfig, RasterError, RenderOutput};
use crate::scene::{CameraModel, RenderList};

/// Untiled forward pass: every pixel tests every Gaussian and sorts its own
/// hits. Slow, but shares no binning logic with [`super::rasterize`].
pub fn rasterize_reference(
    camera: &CameraModel,
    list: &RenderList,
    dim: usize,
    cfg: &RasterConfig,
) -> Result<RenderOutput, RasterError> {
    check_inputs(camera, list.features.len(), list.len(), dim, list.dim)?;
    let (w, h) = (camera.width, camera.height);
    let projections = project_all(&list.splats, camera, cfg);
    let limit = cfg.extent_sigma * cfg.extent_sigma;

    let rows = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = vec![0.0; w * 3];
            let mut feature = vec![0.0; w * dim];
            let mut alpha = vec![0.0; w];
            let mut counts = vec![0; w];
            let mut entries = Vec::new();
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let mut hits: Vec<(usize, f64, f64)> = projections
                    .iter()
                    .enumerate()
                    .filter_map(|(i, p)| {
                        let p = p.as_ref()?;
                        let power = p.power(px, py);
                        (power <= limit).then_some((i, p.depth, power))
                    })
                    .collect();
                hits.sort_by(|a, b| depth_order((a.0, a.1), (b.0, b.1)));

                let mut t = 1.0;
                let mut acc = 0.0;
                let mut n = 0;
                for (i, _, power) in hits {
                    let s = &list.splats[i];
                    let gauss = (-0.5 * power).exp();
                    let raw = s.opacity * gauss;
                    let a = raw.min(cfg.alpha_max);
                    let wgt = a * t;
                    for c in 0..3 {
                        rgb[x * 3 + c] += wgt * s.color[c];
                    }
                    for k in 0..dim {
                        feature[x * dim + k] += wgt * list.features[i * dim + k];
                    }
                    acc += wgt;
                    t *= 1.0 - a;
                    n += 1;
                    if cfg.record_contributions {
                        entries.push(Contribution { splat: i as u32, alpha: a, gauss, clamped: raw > cfg.alpha_max });
                    }
                    if t < cfg.min_transmittance {
                        break;
                    }
                }
                for c in 0..3 {
                    rgb[x * 3 + c] += t * cfg.background[c];
                }
                alpha[x] = acc;
                counts[x] = if cfg.record_contributions { n } else { 0 };
            }
            (rgb, feature, alpha, counts, entries)
        })
        .collect();

    Ok(assemble_rows(w, h, dim, cfg, rows))
}
