//! Dense `H × W × C` maps (images, feature maps, masks) and resampling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("output size must be positive, got {0}x{1}")]
    ZeroSize(usize, usize),
    #[error("map shape mismatch: {0}")]
    Shape(String),
}

/// Row-major `height × width × channels` buffer with top-left origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self { width, height, channels: value.len(), data }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, MapError> {
        if data.len() != width * height * channels {
            return Err(MapError::Shape(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Pixel by row-major linear index.
    pub fn at(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert!(self.same_shape(other), "shape mismatch");
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMethod {
    /// Half-pixel-centered bilinear interpolation.
    #[default]
    Bilinear,
    /// Mean over covered source cells with exact fractional coverage.
    Area,
}

type Taps = Vec<Vec<(usize, f64)>>;

fn bilinear_taps(input: usize, output: usize) -> Taps {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let frac = src - i0 as f64;
            let i1 = (i0 + 1).min(input - 1);
            if i1 == i0 || frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}

fn area_taps(input: usize, output: usize) -> Taps {
    // Work in units of 1/output source pixels so every boundary is an integer.
    (0..output)
        .map(|o| {
            let lo = o * input;
            let hi = (o + 1) * input;
            let first = lo / output;
            let last = (hi - 1) / output;
            (first..=last)
                .filter_map(|i| {
                    let overlap = hi.min((i + 1) * output).saturating_sub(lo.max(i * output));
                    (overlap > 0).then(|| (i, overlap as f64 / input as f64))
                })
                .collect()
        })
        .collect()
}

fn taps(method: ResizeMethod, input: usize, output: usize) -> Taps {
    match method {
        ResizeMethod::Bilinear => bilinear_taps(input, output),
        ResizeMethod::Area => area_taps(input, output),
    }
}

/// Resamples `map` to `out_w × out_h`.
pub fn resize(map: &FeatureMap, out_w: usize, out_h: usize, method: ResizeMethod) -> Result<FeatureMap, MapError> {
    if out_w == 0 || out_h == 0 {
        return Err(MapError::ZeroSize(out_w, out_h));
    }
    if map.width == 0 || map.height == 0 {
        return Err(MapError::Shape("input map is empty".into()));
    }
    if out_w == map.width && out_h == map.height {
        return Ok(map.clone());
    }
    let xs = taps(method, map.width, out_w);
    let ys = taps(method, map.height, out_h);
    let c = map.channels;
    let mut out = FeatureMap::zeros(out_w, out_h, c);
    for (oy, ytaps) in ys.iter().enumerate() {
        for (ox, xtaps) in xs.iter().enumerate() {
            let dst = (oy * out_w + ox) * c;
            for &(sy, wy) in ytaps {
                for &(sx, wx) in xtaps {
                    let w = wy * wx;
                    let src = (sy * map.width + sx) * c;
                    for k in 0..c {
                        out.data[dst + k] += w * map.data[src + k];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize`]: maps a gradient on the resized map back onto the
/// `in_w × in_h` source grid.
pub fn resize_adjoint(
    grad: &FeatureMap,
    in_w: usize,
    in_h: usize,
    method: ResizeMethod,
) -> Result<FeatureMap, MapError> {
    if in_w == 0 || in_h == 0 {
        return Err(MapError::ZeroSize(in_w, in_h));
    }
    if grad.width == in_w && grad.height == in_h {
        return Ok(grad.clone());
    }
    let xs = taps(method, in_w, grad.width);
    let ys = taps(method, in_h, grad.height);
    let c = grad.channels;
    let mut out = FeatureMap::zeros(in_w, in_h, c);
    for (oy, ytaps) in ys.iter().enumerate() {
        for (ox, xtaps) in xs.iter().enumerate() {
            let src = (oy * grad.width + ox) * c;
            for &(sy, wy) in ytaps {
                for &(sx, wx) in xtaps {
                    let w = wy * wx;
                    let dst = (sy * in_w + sx) * c;
                    for k in 0..c {
                        out.data[dst + k] += w * grad.data[src + k];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn resize_bilinear(map: &FeatureMap, out_w: usize, out_h: usize) -> Result<FeatureMap, MapError> {
    resize(map, out_w, out_h, ResizeMethod::Bilinear)
}

pub fn resize_area(map: &FeatureMap, out_w: usize, out_h: usize) -> Result<FeatureMap, MapError> {
    resize(map, out_w, out_h, ResizeMethod::Area)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, c: usize) -> FeatureMap {
        let data = (0..w * h * c).map(|i| (i as f64 * 0.37).sin()).collect();
        FeatureMap::from_data(w, h, c, data).unwrap()
    }

    #[test]
    fn identity_size_is_identity() {
        let m = ramp(5, 4, 2);
        assert_eq!(resize_bilinear(&m, 5, 4).unwrap(), m);
        assert_eq!(resize_area(&m, 5, 4).unwrap(), m);
    }

    #[test]
    fn constants_are_preserved() {
        let m = FeatureMap::filled(7, 5, &[0.25, -3.0]);
        for (w, h) in [(3, 2), (11, 13), (1, 1), (7, 9)] {
            for method in [ResizeMethod::Bilinear, ResizeMethod::Area] {
                let r = resize(&m, w, h, method).unwrap();
                for px in r.data.chunks(2) {
                    assert!((px[0] - 0.25).abs() < 1e-12 && (px[1] + 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn area_two_by_two_mean() {
        let m = FeatureMap::from_data(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resize_area(&m, 1, 1).unwrap().data, vec![1.5]);
    }

    #[test]
    fn area_fractional_coverage() {
        // 3 -> 2: output 0 covers [0, 1.5), output 1 covers [1.5, 3)
        let m = FeatureMap::from_data(3, 1, 1, vec![3.0, 6.0, 9.0]).unwrap();
        let r = resize_area(&m, 2, 1).unwrap();
        assert!((r.data[0] - (3.0 + 0.5 * 6.0) / 1.5).abs() < 1e-12);
        assert!((r.data[1] - (0.5 * 6.0 + 9.0) / 1.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_upsample_half_pixel() {
        // 2 -> 4: sample positions -0.25, 0.25, 0.75, 1.25 clamped to [0, 1]
        let m = FeatureMap::from_data(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&m, 4, 1).unwrap();
        assert_eq!(r.data, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn zero_output_rejected() {
        let m = ramp(2, 2, 1);
        assert_eq!(resize_bilinear(&m, 0, 3), Err(MapError::ZeroSize(0, 3)));
        assert!(resize_area(&m, 2, 0).is_err());
    }

    #[test]
    fn adjoint_identity() {
        // <resize(x), y> == <x, resize_adjoint(y)>
        let x = ramp(9, 7, 3);
        for method in [ResizeMethod::Bilinear, ResizeMethod::Area] {
            for (w, h) in [(4, 3), (13, 10)] {
                let y = ramp(w, h, 3);
                let lhs: f64 = resize(&x, w, h, method).unwrap().data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
                let rhs: f64 =
                    x.data.iter().zip(&resize_adjoint(&y, 9, 7, method).unwrap().data).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-10, "{method:?} {w}x{h}");
            }
        }
    }
}
