//! Instance normalization over `[N, C, H, W]` tensors.

use ndarray::{Array2, Array4, Axis, Ix1};
use rand::Rng;

use super::{visit, visit_mut, Param, ParamView, ParamViewMut};

const EPS: f64 = 1e-5;

/// Normalizes each `(sample, channel)` plane to zero mean and unit variance,
/// optionally followed by a learnable per-channel affine transform.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    pub affine: bool,
    channels: usize,
}

pub struct InstanceNormCache {
    /// Normalized activations, before the affine transform.
    x_hat: Array4<f64>,
    /// `1 / sqrt(var + eps)` per `(n, c)`.
    inv_std: Array2<f64>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(Ix1(channels), 1.0),
            beta: Param::zeros(Ix1(channels)),
            affine: true,
            channels,
        }
    }

    /// Plain standardization with no learnable scale or shift.
    pub fn new_non_affine(channels: usize) -> Self {
        Self {
            gamma: Param::zeros(Ix1(0)),
            beta: Param::zeros(Ix1(0)),
            affine: false,
            channels,
        }
    }

    pub fn init<R: Rng>(&mut self, _rng: &mut R) {
        if self.affine {
            self.gamma.v.fill(1.0);
            self.beta.v.fill(0.0);
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, InstanceNormCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "channel mismatch");
        let m = (h * w) as f64;
        let mut x_hat = Array4::<f64>::zeros((n, c, h, w));
        let mut inv_std = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                let mean = plane.sum() / m;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[[ni, ci]] = is;
                let mut out = x_hat.index_axis_mut(Axis(0), ni);
                let mut out = out.index_axis_mut(Axis(0), ci);
                for (o, &v) in out.iter_mut().zip(plane.iter()) {
                    *o = (v - mean) * is;
                }
            }
        }
        let mut y = x_hat.clone();
        if self.affine {
            for ci in 0..c {
                let (g, b) = (self.gamma.v[ci], self.beta.v[ci]);
                y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| g * v + b);
            }
        }
        (y, InstanceNormCache { x_hat, inv_std })
    }

    pub fn backward(&mut self, cache: &InstanceNormCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = gy.dim();
        let m = (h * w) as f64;
        let mut gx = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g_plane = gy.index_axis(Axis(0), ni);
                let g_plane = g_plane.index_axis(Axis(0), ci);
                let xh_plane = cache.x_hat.index_axis(Axis(0), ni);
                let xh_plane = xh_plane.index_axis(Axis(0), ci);
                let sum_g = g_plane.sum();
                let sum_gx = g_plane.iter().zip(xh_plane.iter()).map(|(&a, &b)| a * b).sum::<f64>();
                if self.affine {
                    self.gamma.g[ci] += sum_gx;
                    self.beta.g[ci] += sum_g;
                }
                let gamma = if self.affine { self.gamma.v[ci] } else { 1.0 };
                let scale = gamma * cache.inv_std[[ni, ci]];
                let mean_g = sum_g / m;
                let mean_gx = sum_gx / m;
                let mut out = gx.index_axis_mut(Axis(0), ni);
                let mut out = out.index_axis_mut(Axis(0), ci);
                for ((o, &g), &xh) in out.iter_mut().zip(g_plane.iter()).zip(xh_plane.iter()) {
                    *o = scale * (g - mean_g - xh * mean_gx);
                }
            }
        }
        gx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamView<'_>)) {
        if self.affine {
            visit(&self.gamma, format!("{prefix}.gamma"), f);
            visit(&self.beta, format!("{prefix}.beta"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        if self.affine {
            visit_mut(&mut self.gamma, format!("{prefix}.gamma"), f);
            visit_mut(&mut self.beta, format!("{prefix}.beta"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        Array::from_shape_simple_fn(shape, || dist.sample(&mut rng))
    }

    #[test]
    fn normalizes_each_plane() {
        let x = randn4((2, 3, 4, 5), 1);
        let norm = InstanceNorm::new(3);
        let (y, _) = norm.forward(&x);
        for n in 0..2 {
            for c in 0..3 {
                let plane = y.index_axis(Axis(0), n);
                let plane = plane.index_axis(Axis(0), c);
                let m = plane.sum() / 20.0;
                let v = plane.iter().map(|&t| (t - m) * (t - m)).sum::<f64>() / 20.0;
                assert!(m.abs() < 1e-10);
                assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = randn4((1, 2, 3, 4), 2);
        let mut norm = InstanceNorm::new(2);
        norm.gamma.v[0] = 1.3;
        norm.gamma.v[1] = 0.7;
        norm.beta.v[0] = -0.1;
        let gy = randn4((1, 2, 3, 4), 3);
        let (_, cache) = norm.forward(&x);
        let gx = norm.backward(&cache, &gy);

        let loss = |norm: &InstanceNorm, x: &Array4<f64>| (&norm.forward(x).0 * &gy).sum();
        let eps = 1e-6;
        for &idx in &[(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 1, 2)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&norm, &xp) - loss(&norm, &xm)) / (2.0 * eps);
            assert!((num - gx[idx]).abs() < 1e-6, "gx {num} vs {}", gx[idx]);
        }
        for ci in 0..2 {
            let mut np = norm.clone();
            np.gamma.v[ci] += eps;
            let mut nm = norm.clone();
            nm.gamma.v[ci] -= eps;
            let num = (loss(&np, &x) - loss(&nm, &x)) / (2.0 * eps);
            assert!((num - norm.gamma.g[ci]).abs() < 1e-6);
            let mut np = norm.clone();
            np.beta.v[ci] += eps;
            let mut nm = norm.clone();
            nm.beta.v[ci] -= eps;
            let num = (loss(&np, &x) - loss(&nm, &x)) / (2.0 * eps);
            assert!((num - norm.beta.g[ci]).abs() < 1e-6);
        }
    }

    #[test]
    fn non_affine_has_no_params_and_matching_gradient()
    {
        let x = randn4((1, 2, 4, 4), 5);
        let mut norm = InstanceNorm::new_non_affine(2);
        let gy = randn4((1, 2, 4, 4), 6);
        let (_, cache) = norm.forward(&x);
        let gx = norm.backward(&cache, &gy);
        assert_eq!(norm.gamma.len(), 0);
        let loss = |norm: &InstanceNorm, x: &Array4<f64>| (&norm.forward(x).0 * &gy).sum();
        let eps = 1e-6;
        let idx = (0, 1, 3, 0);
        let mut xp = x.clone();
        xp[idx] += eps;
        let mut xm = x.clone();
        xm[idx] -= eps;
        let num = (loss(&norm, &xp) - loss(&norm, &xm)) / (2.0 * eps);
        assert!((num - gx[idx]).abs() < 1e-6);
    }
}
