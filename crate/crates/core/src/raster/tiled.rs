use rayon::prelude::*;

use super::{
    check_inputs, depth_order, project_all, Contribution, ContributionLists, RasterConfig, RasterError, RenderOutput,
    SplatProjection,
};
use crate::map::FeatureMap;
use crate::scene::{CameraModel, RenderList};

struct RowResult {
    rgb: Vec<f64>,
    feature: Vec<f64>,
    alpha: Vec<f64>,
    counts: Vec<usize>,
    entries: Vec<Contribution>,
}

/// Tile-binned forward pass. Gaussians are sorted once globally, then each
/// tile keeps the depth-ordered subset whose extent circle overlaps it.
pub fn rasterize(camera: &CameraModel, list: &RenderList, dim: usize, cfg: &RasterConfig) -> Result<RenderOutput, RasterError> {
    check_inputs(camera, list.features.len(), list.len(), dim, list.dim)?;
    if cfg.tile_size == 0 {
        return Err(RasterError::Shape("tile size must be positive".into()));
    }
    let (w, h, ts) = (camera.width, camera.height, cfg.tile_size);
    let projections = project_all(&list.splats, camera, cfg);

    let mut order: Vec<(usize, f64)> =
        projections.iter().enumerate().filter_map(|(i, p)| p.map(|p| (i, p.depth))).collect();
    order.sort_by(|a, b| depth_order(*a, *b));

    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &(i, _) in &order {
        let p = projections[i].as_ref().expect("sorted splats are projected");
        // One pixel of slack keeps the bound conservative under round-off.
        let r = p.radius + 1.0;
        let (x0, x1) = (p.mean2d.x - r, p.mean2d.x + r);
        let (y0, y1) = (p.mean2d.y - r, p.mean2d.y + r);
        if x1 < 0.0 || y1 < 0.0 || x0 > (w - 1) as f64 || y0 > (h - 1) as f64 || !r.is_finite() {
            continue;
        }
        let tx0 = (x0.max(0.0) as usize / ts).min(tiles_x - 1);
        let tx1 = (x1.min((w - 1) as f64) as usize / ts).min(tiles_x - 1);
        let ty0 = (y0.max(0.0) as usize / ts).min(tiles_y - 1);
        let ty1 = (y1.min((h - 1) as f64) as usize / ts).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    let rows: Vec<RowResult> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = RowResult {
                rgb: vec![0.0; w * 3],
                feature: vec![0.0; w * dim],
                alpha: vec![0.0; w],
                counts: vec![0; w],
                entries: Vec::new(),
            };
            let ty = y / ts;
            for x in 0..w {
                let bin = &bins[ty * tiles_x + x / ts];
                let before = row.entries.len();
                let px = PixelOut {
                    rgb: &mut row.rgb[x * 3..x * 3 + 3],
                    feature: &mut row.feature[x * dim..(x + 1) * dim],
                    alpha: &mut row.alpha[x],
                };
                composite_pixel(
                    x as f64,
                    y as f64,
                    bin.iter().map(|&i| i as usize),
                    &projections,
                    list,
                    cfg,
                    px,
                    cfg.record_contributions.then_some(&mut row.entries),
                );
                row.counts[x] = row.entries.len() - before;
            }
            row
        })
        .collect();

    Ok(assemble(w, h, dim, cfg, rows))
}

pub(super) struct PixelOut<'a> {
    pub rgb: &'a mut [f64],
    pub feature: &'a mut [f64],
    pub alpha: &'a mut f64,
}

/// Front-to-back compositing of one pixel over `order`.
#[allow(clippy::too_many_arguments)]
pub(super) fn composite_pixel(
    x: f64,
    y: f64,
    order: impl Iterator<Item = usize>,
    projections: &[Option<SplatProjection>],
    list: &RenderList,
    cfg: &RasterConfig,
    out: PixelOut<'_>,
    mut record: Option<&mut Vec<Contribution>>,
) {
    let limit = cfg.extent_sigma * cfg.extent_sigma;
    let dim = list.dim;
    let mut t = 1.0;
    let mut acc = 0.0;
    for i in order {
        let Some(p) = projections[i].as_ref() else { continue };
        let power = p.power(x, y);
        if !(power <= limit) {
            continue;
        }
        let gauss = (-0.5 * power).exp();
        let s = &list.splats[i];
        let raw = s.opacity * gauss;
        let clamped = raw > cfg.alpha_max;
        let alpha = if clamped { cfg.alpha_max } else { raw };
        let wgt = alpha * t;
        for c in 0..3 {
            out.rgb[c] += wgt * s.color[c];
        }
        let f = &list.features[i * dim..(i + 1) * dim];
        for (o, v) in out.feature.iter_mut().zip(f) {
            *o += wgt * v;
        }
        acc += wgt;
        t *= 1.0 - alpha;
        if let Some(r) = record.as_deref_mut() {
            r.push(Contribution { splat: i as u32, alpha, gauss, clamped });
        }
        if t < cfg.min_transmittance {
            break;
        }
    }
    for c in 0..3 {
        out.rgb[c] += t * cfg.background[c];
    }
    *out.alpha = acc;
}

fn assemble(w: usize, h: usize, dim: usize, cfg: &RasterConfig, rows: Vec<RowResult>) -> RenderOutput {
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut feature = Vec::with_capacity(w * h * dim);
    let mut alpha = Vec::with_capacity(w * h);
    let mut lists = ContributionLists { offsets: Vec::with_capacity(w * h + 1), entries: Vec::new() };
    lists.offsets.push(0);
    for row in rows {
        rgb.extend(row.rgb);
        feature.extend(row.feature);
        alpha.extend(row.alpha);
        for c in row.counts {
            let last = *lists.offsets.last().unwrap();
            lists.offsets.push(last + c);
        }
        lists.entries.extend(row.entries);
    }
    RenderOutput {
        width: w,
        height: h,
        rgb: FeatureMap { width: w, height: h, channels: 3, data: rgb },
        feature: FeatureMap { width: w, height: h, channels: dim, data: feature },
        alpha: FeatureMap { width: w, height: h, channels: 1, data: alpha },
        background: cfg.background,
        contributions: cfg.record_contributions.then_some(lists),
    }
}

pub(super) fn assemble_rows(
    w: usize,
    h: usize,
    dim: usize,
    cfg: &RasterConfig,
    rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<usize>, Vec<Contribution>)>,
) -> RenderOutput {
    let rows = rows
        .into_iter()
        .map(|(rgb, feature, alpha, counts, entries)| RowResult { rgb, feature, alpha, counts, entries })
        .collect();
    assemble(w, h, dim, cfg, rows)
}
