use serde::{Deserialize, Serialize};

use super::DistillError;
use crate::map::FeatureMap;

fn check(a: &FeatureMap, b: &FeatureMap, mask: Option<&[bool]>) -> Result<(), DistillError> {
    if !a.same_shape(b) {
        return Err(DistillError::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.pixel_count() {
            return Err(DistillError::Shape(format!("mask of {} for {} pixels", m.len(), a.pixel_count())));
        }
    }
    Ok(())
}

fn reduce(
    a: &FeatureMap,
    b: &FeatureMap,
    mask: Option<&[bool]>,
    value: impl Fn(f64) -> f64,
    slope: impl Fn(f64) -> f64,
) -> Result<(f64, FeatureMap), DistillError> {
    check(a, b, mask)?;
    let c = a.channels;
    let active = mask.map_or(a.pixel_count(), |m| m.iter().filter(|v| **v).count());
    let mut grad = FeatureMap::zeros(a.width, a.height, c);
    if active == 0 || c == 0 {
        return Ok((0.0, grad));
    }
    let count = (active * c) as f64;
    let mut total = 0.0;
    for p in 0..a.pixel_count() {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for k in p * c..(p + 1) * c {
            let d = a.data[k] - b.data[k];
            total += value(d);
            grad.data[k] = slope(d) / count;
        }
    }
    Ok((total / count, grad))
}

/// Mean squared error and its gradient with respect to `decoded`.
pub fn feature_loss(decoded: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap), DistillError> {
    feature_loss_masked(decoded, target, None)
}

/// [`feature_loss`] restricted to pixels whose mask entry is set.
pub fn feature_loss_masked(
    decoded: &FeatureMap,
    target: &FeatureMap,
    mask: Option<&[bool]>,
) -> Result<(f64, FeatureMap), DistillError> {
    reduce(decoded, target, mask, |d| d * d, |d| 2.0 * d)
}

/// Mean absolute error with subgradient `sign(r - t)` (zero at ties).
pub fn photometric_loss(rendered: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap), DistillError> {
    photometric_loss_masked(rendered, target, None)
}

pub fn photometric_loss_masked(
    rendered: &FeatureMap,
    target: &FeatureMap,
    mask: Option<&[bool]>,
) -> Result<(f64, FeatureMap), DistillError> {
    reduce(rendered, target, mask, f64::abs, |d| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected Adam over one flat parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), DistillError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DistillError::Shape(format!(
                "adam state of {} for {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<(), DistillError> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, c: usize, f: impl Fn(usize) -> f64) -> FeatureMap {
        FeatureMap::from_data(w, h, c, (0..w * h * c).map(f).collect()).unwrap()
    }

    #[test]
    fn feature_loss_cases() {
        let a = map(3, 2, 4, |i| (i as f64).sin());
        assert_eq!(feature_loss(&a, &a).unwrap().0, 0.0);
        let b = map(3, 2, 4, |i| (i as f64).sin() + 1.0);
        assert!((feature_loss(&b, &a).unwrap().0 - 1.0).abs() < 1e-15);
        let c = map(3, 2, 4, |i| (i as f64 * 1.7).cos());
        let (v, g) = feature_loss(&a, &c).unwrap();
        let n = a.data.len() as f64;
        let expect: f64 = a.data.iter().zip(&c.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        assert!((v - expect).abs() < 1e-15);
        assert!((g.data[5] - 2.0 * (a.data[5] - c.data[5]) / n).abs() < 1e-15);
    }

    #[test]
    fn photometric_loss_cases() {
        let a = map(2, 2, 3, |i| i as f64 / 12.0);
        assert_eq!(photometric_loss(&a, &a).unwrap(), (0.0, FeatureMap::zeros(2, 2, 3)));
        let b = map(2, 2, 3, |i| i as f64 / 12.0 + 0.5);
        let (v, g) = photometric_loss(&a, &b).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!(g.data.iter().all(|x| (*x + 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn masked_loss_uses_masked_pixels_only() {
        let a = FeatureMap::from_data(2, 1, 1, vec![1.0, 5.0]).unwrap();
        let b = FeatureMap::from_data(2, 1, 1, vec![0.0, 0.0]).unwrap();
        let (v, g) = feature_loss_masked(&a, &b, Some(&[true, false])).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g.data, vec![2.0, 0.0]);
        assert_eq!(feature_loss_masked(&a, &b, Some(&[false, false])).unwrap().0, 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = FeatureMap::zeros(2, 2, 3);
        let b = FeatureMap::zeros(2, 2, 2);
        assert!(feature_loss(&a, &b).is_err());
        assert!(photometric_loss(&a, &b).is_err());
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut s = AdamState::new(3, AdamConfig::with_lr(0.1));
        let mut p = vec![1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let mut s = AdamState::new(2, AdamConfig::with_lr(0.01));
        let mut p = vec![0.0, 0.0];
        s.step(&mut p, &[3.0, -0.2]).unwrap();
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps)
        assert!((p[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 0.01 * 0.2 / (0.2 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = AdamState::new(1, AdamConfig::with_lr(0.1));
        let mut x = vec![1.0];
        for _ in 0..100 {
            let g = 2.0 * x[0];
            s.step(&mut x, &[g]).unwrap();
        }
        assert!(x[0].abs() < 0.1, "{}", x[0]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut s = AdamState::new(2, AdamConfig::default());
        assert!(adam_step(&mut s, &mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
