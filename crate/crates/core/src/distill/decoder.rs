use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DistillError;

/// One affine layer `y = x W + b` acting on row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`.
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: DMatrix::zeros(input, output), bias: vec![0.0; output] }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * &self.weight;
        for (j, b) in self.bias.iter().enumerate() {
            z.column_mut(j).add_scalar_mut(*b);
        }
        z
    }
}

/// Task decoder: affine layers with ReLU between them and none on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderMLP {
    pub layers: Vec<Linear>,
}

/// Layer widths `[D, 2D, 4D, D_s]`.
pub fn decoder_widths(latent_dim: usize, task_dim: usize) -> [usize; 4] {
    [latent_dim, 2 * latent_dim, 4 * latent_dim, task_dim]
}

/// Activations retained by [`DecoderMLP::forward_cached`].
#[derive(Debug, Clone, Default)]
pub struct DecoderCache {
    inputs: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub layers: Vec<Linear>,
}

impl DecoderMLP {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn new(latent_dim: usize, task_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_widths(&decoder_widths(latent_dim, task_dim), &mut rng)
    }

    pub fn with_widths(widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Linear::zeros(w[0], w[1]);
                // Row-major fill so the draw order does not depend on storage layout.
                for i in 0..w[0] {
                    for j in 0..w[1] {
                        layer.weight[(i, j)] = rng.random_range(-bound..=bound);
                    }
                }
                for b in &mut layer.bias {
                    *b = rng.random_range(-bound..=bound);
                }
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Linear::zeros(l.input_dim(), l.output_dim())).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Linear::output_dim));
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<(), DistillError> {
        if x.ncols() != self.input_dim() {
            return Err(DistillError::Width { expected: self.input_dim(), got: x.ncols() });
        }
        Ok(())
    }

    /// Applies the decoder to each row of `x` (`N × D`).
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DistillError> {
        self.check_input(x)?;
        let last = self.layers.len().saturating_sub(1);
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if l < last {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DecoderCache), DistillError> {
        self.check_input(x)?;
        let last = self.layers.len().saturating_sub(1);
        let mut cache = DecoderCache::default();
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&a);
            cache.inputs.push(a);
            a = z.clone();
            if l < last {
                a.apply(|v| *v = v.max(0.0));
            }
            cache.pre_activations.push(z);
        }
        Ok((a, cache))
    }

    /// Reverse-mode pass. Returns parameter gradients and the gradient with
    /// respect to the decoder input.
    pub fn backward(&self, cache: &DecoderCache, upstream: &DMatrix<f64>) -> Result<(DecoderGrads, DMatrix<f64>), DistillError> {
        if cache.inputs.len() != self.layers.len() || self.layers.is_empty() {
            return Err(DistillError::MissingCache);
        }
        let rows = cache.inputs[0].nrows();
        if upstream.nrows() != rows || upstream.ncols() != self.output_dim() {
            return Err(DistillError::Width { expected: self.output_dim(), got: upstream.ncols() });
        }
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                g.zip_apply(&cache.pre_activations[l], |gv, z| {
                    if z <= 0.0 {
                        *gv = 0.0
                    }
                });
            }
            let weight = cache.inputs[l].transpose() * &g;
            let bias = g.row_sum().iter().copied().collect();
            let next = &g * self.layers[l].weight.transpose();
            grads.push(Linear { weight, bias });
            g = next;
        }
        grads.reverse();
        Ok((DecoderGrads { layers: grads }, g))
    }
}

/// Converts a row-major `rows × cols` buffer into a matrix.
pub fn matrix_from_rows(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Row-major copy of a matrix.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in m.row_iter() {
        out.extend(r.iter());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn widths_follow_schedule() {
        let d = DecoderMLP::new(32, 512, 0);
        assert_eq!(d.widths(), vec![32, 64, 128, 512]);
        assert_eq!(d.parameter_count(), 32 * 64 + 64 + 64 * 128 + 128 + 128 * 512 + 512);
    }

    #[test]
    fn zero_decoder_outputs_zero() {
        let d = DecoderMLP::new(4, 3, 1).zeros_like();
        let y = d.forward(&sample(5, 4, 2)).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn width_mismatch_rejected() {
        let d = DecoderMLP::new(4, 3, 1);
        assert_eq!(d.forward(&sample(2, 5, 0)), Err(DistillError::Width { expected: 4, got: 5 }));
    }

    #[test]
    fn nonneg_identity_stack_is_linear() {
        // Identity first layer on nonneg input keeps every rectifier inactive.
        let mut d = DecoderMLP::new(2, 2, 0).zeros_like();
        for (i, layer) in d.layers.iter_mut().enumerate() {
            for r in 0..layer.input_dim().min(layer.output_dim()) {
                layer.weight[(r, r)] = (i + 1) as f64;
            }
        }
        let x = DMatrix::from_row_slice(2, 2, &[0.5, 2.0, 1.0, 0.0]);
        let y = d.forward(&x).unwrap();
        assert_eq!(y, x * 6.0);
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let d = DecoderMLP::new(32, 8, 7);
        let x = sample(3, 32, 3);
        let y = d.forward(&x).unwrap();
        for r in 0..3 {
            let mut a: Vec<f64> = x.row(r).iter().copied().collect();
            for (l, layer) in d.layers.iter().enumerate() {
                let mut z = layer.bias.clone();
                for (j, zj) in z.iter_mut().enumerate() {
                    for (i, ai) in a.iter().enumerate() {
                        *zj += ai * layer.weight[(i, j)];
                    }
                }
                if l + 1 < d.layers.len() {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                a = z;
            }
            for (j, v) in a.iter().enumerate() {
                assert!((y[(r, j)] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_requires_cache() {
        let d = DecoderMLP::new(4, 3, 1);
        assert_eq!(d.backward(&DecoderCache::default(), &sample(2, 3, 0)).unwrap_err(), DistillError::MissingCache);
    }

    #[test]
    fn single_layer_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = DecoderMLP::with_widths(&[3, 2], &mut rng);
        let x = sample(4, 3, 1);
        let g = sample(4, 2, 2);
        let (_, cache) = d.forward_cached(&x).unwrap();
        let (grads, gin) = d.backward(&cache, &g).unwrap();
        assert!((&grads.layers[0].weight - x.transpose() * &g).abs().max() < 1e-14);
        assert!((gin - &g * d.layers[0].weight.transpose()).abs().max() < 1e-14);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let d = DecoderMLP::new(4, 3, 1);
        let (_, cache) = d.forward_cached(&sample(5, 4, 0)).unwrap();
        let (grads, gin) = d.backward(&cache, &DMatrix::zeros(5, 3)).unwrap();
        assert!(gin.iter().all(|v| *v == 0.0));
        assert!(grads.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| *v == 0.0)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let d = DecoderMLP::new(4, 3, 5);
        let x = sample(3, 4, 6);
        let w = sample(3, 3, 7);
        let f = |dec: &DecoderMLP, x: &DMatrix<f64>| dec.forward(x).unwrap().component_mul(&w).sum();
        let (_, cache) = d.forward_cached(&x).unwrap();
        let (grads, gin) = d.backward(&cache, &w).unwrap();
        let eps = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for l in 0..d.layers.len() {
            for idx in 0..d.layers[l].weight.len() {
                let mut p = d.clone();
                p.layers[l].weight[idx] += eps;
                let mut m = d.clone();
                m.layers[l].weight[idx] -= eps;
                let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * eps);
                assert!(rel(grads.layers[l].weight[idx], fd) < 1e-4, "layer {l} weight {idx}");
            }
            for idx in 0..d.layers[l].bias.len() {
                let mut p = d.clone();
                p.layers[l].bias[idx] += eps;
                let mut m = d.clone();
                m.layers[l].bias[idx] -= eps;
                let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * eps);
                assert!(rel(grads.layers[l].bias[idx], fd) < 1e-4);
            }
        }
        for idx in 0..x.len() {
            let mut p = x.clone();
            p[idx] += eps;
            let mut m = x.clone();
            m[idx] -= eps;
            let fd = (f(&d, &p) - f(&d, &m)) / (2.0 * eps);
            assert!(rel(gin[idx], fd) < 1e-4);
        }
    }

    #[test]
    fn row_conversions_round_trip() {
        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let m = matrix_from_rows(2, 3, &data);
        assert_eq!(m[(0, 2)], 2.0);
        assert_eq!(matrix_to_rows(&m), data);
    }
}
