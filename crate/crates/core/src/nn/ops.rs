//! Elementwise activations, reflection padding and the channel softmax.
//!
//! Each op returns `(output, cache)`; the matching `*_backward` maps an
//! upstream gradient to an input gradient.

use ndarray::Array4;

/// ReLU. The cache is the output itself.
pub fn relu(x: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
    let y = x.mapv(|v| v.max(0.0));
    (y.clone(), y)
}

pub fn relu_backward(cache_y: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(cache_y, |g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

/// Leaky ReLU with the given negative slope. The cache is the input sign mask
/// folded into the output (output keeps the sign of the input).
pub fn leaky_relu(x: &Array4<f64>, slope: f64) -> (Array4<f64>, Array4<f64>) {
    let y = x.mapv(|v| if v >= 0.0 { v } else { slope * v });
    (y.clone(), y)
}

pub fn leaky_relu_backward(cache_y: &Array4<f64>, gy: &Array4<f64>, slope: f64) -> Array4<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(cache_y, |g, &y| {
        if y < 0.0 {
            *g *= slope;
        }
    });
    gx
}

/// Tanh. The cache is the output.
pub fn tanh(x: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
    let y = x.mapv(f64::tanh);
    (y.clone(), y)
}

pub fn tanh_backward(cache_y: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(cache_y, |g, &y| *g *= 1.0 - y * y);
    gx
}

/// Softmax across the channel axis, independently at every pixel.
pub fn softmax_channels(x: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut max = f64::NEG_INFINITY;
                for ci in 0..c {
                    max = max.max(x[[ni, ci, i, j]]);
                }
                let mut sum = 0.0;
                for ci in 0..c {
                    let e = (x[[ni, ci, i, j]] - max).exp();
                    y[[ni, ci, i, j]] = e;
                    sum += e;
                }
                for ci in 0..c {
                    y[[ni, ci, i, j]] /= sum;
                }
            }
        }
    }
    (y.clone(), y)
}

pub fn softmax_channels_backward(cache_y: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = gy.dim();
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut dot = 0.0;
                for ci in 0..c {
                    dot += gy[[ni, ci, i, j]] * cache_y[[ni, ci, i, j]];
                }
                for ci in 0..c {
                    gx[[ni, ci, i, j]] =
                        cache_y[[ni, ci, i, j]] * (gy[[ni, ci, i, j]] - dot);
                }
            }
        }
    }
    gx
}

fn reflect(idx: isize, len: usize) -> usize {
    let len = len as isize;
    let mut m = idx;
    if m < 0 {
        m = -m;
    }
    if m >= len {
        m = 2 * len - 2 - m;
    }
    debug_assert!(m >= 0 && m < len);
    m as usize
}

/// Mirror-pads the two spatial axes by `p` pixels (edge pixel not repeated).
pub fn reflection_pad(x: &Array4<f64>, p: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    assert!(p < h && p < w, "reflection pad {p} too large for {h}x{w}");
    let mut y = Array4::<f64>::zeros((n, c, h + 2 * p, w + 2 * p));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h + 2 * p {
                let si = reflect(i as isize - p as isize, h);
                for j in 0..w + 2 * p {
                    let sj = reflect(j as isize - p as isize, w);
                    y[[ni, ci, i, j]] = x[[ni, ci, si, sj]];
                }
            }
        }
    }
    y
}

/// Accumulates the padded gradient back onto the unpadded extent.
pub fn reflection_pad_backward(gy: &Array4<f64>, p: usize, hw: (usize, usize)) -> Array4<f64> {
    let (n, c, hp, wp) = gy.dim();
    let (h, w) = hw;
    assert_eq!(hp, h + 2 * p);
    assert_eq!(wp, w + 2 * p);
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..hp {
                let si = reflect(i as isize - p as isize, h);
                for j in 0..wp {
                    let sj = reflect(j as isize - p as isize, w);
                    gx[[ni, ci, si, sj]] += gy[[ni, ci, i, j]];
                }
            }
        }
    }
    gx
}

/// Adds `noise` elementwise; gradient passes through unchanged.
pub fn add_noise(x: &Array4<f64>, noise: &Array4<f64>) -> Array4<f64> {
    x + noise
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        Array::from_shape_simple_fn(shape, || dist.sample(&mut rng))
    }

    #[test]
    fn softmax_sums_to_one_and_gradient_checks() {
        let x = randn4((2, 4, 3, 3), 1);
        let (y, cache) = softmax_channels(&x);
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let s: f64 = (0..4).map(|c| y[[n, c, i, j]]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        let gy = randn4((2, 4, 3, 3), 2);
        let gx = softmax_channels_backward(&cache, &gy);
        let loss = |x: &Array4<f64>| (&softmax_channels(x).0 * &gy).sum();
        let eps = 1e-6;
        for &idx in &[(0, 0, 0, 0), (1, 3, 2, 1), (0, 2, 1, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((num - gx[idx]).abs() < 1e-7, "{num} vs {}", gx[idx]);
        }
    }

    #[test]
    fn reflection_pad_mirrors_without_edge_repeat() {
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]
            .insert_axis(Axis(0))
            .insert_axis(Axis(0));
        let y = reflection_pad(&x, 1);
        assert_eq!(y.dim(), (1, 1, 5, 5));
        // Row -1 mirrors row 1, column -1 mirrors column 1.
        assert_eq!(y[[0, 0, 0, 1]], 4.0);
        assert_eq!(y[[0, 0, 1, 0]], 2.0);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 4, 4]], 5.0);
        assert_eq!(y[[0, 0, 2, 2]], 5.0);
    }

    #[test]
    fn pad_backward_matches_finite_differences() {
        let x = randn4((1, 2, 4, 4), 3);
        let gy = randn4((1, 2, 8, 8), 4);
        let gx = reflection_pad_backward(&gy, 2, (4, 4));
        let loss = |x: &Array4<f64>| (&reflection_pad(x, 2) * &gy).sum();
        let eps = 1e-6;
        for &idx in &[(0, 0, 0, 0), (0, 1, 3, 3), (0, 0, 2, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((num - gx[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn activations_gradient_check() {
        let x = randn4((1, 2, 3, 3), 5);
        let gy = randn4((1, 2, 3, 3), 6);
        let (_, cr) = relu(&x);
        let (_, ct) = tanh(&x);
        let (_, cl) = leaky_relu(&x, 0.2);
        let g_relu = relu_backward(&cr, &gy);
        let g_tanh = tanh_backward(&ct, &gy);
        let g_lrelu = leaky_relu_backward(&cl, &gy, 0.2);
        let eps = 1e-6;
        for &idx in &[(0, 0, 0, 0), (0, 1, 2, 2), (0, 0, 1, 2)] {
            for (f, g) in [
                (relu as fn(&Array4<f64>) -> (Array4<f64>, Array4<f64>), &g_relu),
                (tanh, &g_tanh),
            ] {
                let mut xp = x.clone();
                xp[idx] += eps;
                let mut xm = x.clone();
                xm[idx] -= eps;
                let num = ((&f(&xp).0 * &gy).sum() - (&f(&xm).0 * &gy).sum()) / (2.0 * eps);
                assert!((num - g[idx]).abs() < 1e-7);
            }
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = ((&leaky_relu(&xp, 0.2).0 * &gy).sum()
                - (&leaky_relu(&xm, 0.2).0 * &gy).sum())
                / (2.0 * eps);
            assert!((num - g_lrelu[idx]).abs() < 1e-7);
        }
    }
}
