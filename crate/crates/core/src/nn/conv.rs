//! Convolution and transposed convolution with explicit gradients.
//!
//! Both are built from three primitives (`conv2d_fwd`, `conv2d_bwd_input`,
//! `conv2d_bwd_weight`); the transposed convolution is the adjoint of the
//! strided convolution, so it reuses them with input/output roles swapped.

use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayView4, Axis, Ix1, Ix4};
use rand::Rng;

use super::{visit, visit_mut, Param, ParamView, ParamViewMut};

/// Output extent of one convolution axis: `floor((n + 2p - k) / s) + 1`.
pub fn conv_out_size(n: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(n + 2 * p >= k, "input {n} too small for kernel {k} with pad {p}");
    (n + 2 * p - k) / s + 1
}

/// Output extent of one transposed-convolution axis.
pub fn conv_transpose_out_size(n: usize, k: usize, s: usize, p: usize, op: usize) -> usize {
    assert!(op < s.max(1), "output padding must be smaller than stride");
    (n - 1) * s + k + op - 2 * p
}

/// Gathers sliding windows of `x` (one sample, `[C, H, W]`) into a
/// `[C*kh*kw, ho*wo]` matrix. Out-of-bounds taps read as zero padding.
fn im2col(x: ArrayView3<'_, f64>, kh: usize, kw: usize, s: usize, p: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_size(h, kh, s, p);
    let wo = conv_out_size(w, kw, s, p);
    let mut col = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                for i in 0..ho {
                    let hi = (i * s + u) as isize - p as isize;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let wj = (j * s + v) as isize - p as isize;
                        if wj < 0 || wj >= w as isize {
                            continue;
                        }
                        col[[row, i * wo + j]] = x[[ci, hi as usize, wj as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a `[C*kh*kw, ho*wo]` column matrix back into `[C, H, W]`.
fn col2im_acc(
    col: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    s: usize,
    p: usize,
    out: &mut ndarray::ArrayViewMut3<'_, f64>,
) {
    let ho = conv_out_size(h, kh, s, p);
    let wo = conv_out_size(w, kw, s, p);
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                for i in 0..ho {
                    let hi = (i * s + u) as isize - p as isize;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let wj = (j * s + v) as isize - p as isize;
                        if wj < 0 || wj >= w as isize {
                            continue;
                        }
                        out[[ci, hi as usize, wj as usize]] += col[[row, i * wo + j]];
                    }
                }
            }
        }
    }
}

/// `y[n,co,i,j] = b[co] + sum w[co,ci,u,v] * x_pad[n,ci,i*s+u,j*s+v]`.
pub fn conv2d_fwd(
    x: ArrayView4<'_, f64>,
    w: ArrayView4<'_, f64>,
    b: Option<&Array1<f64>>,
    s: usize,
    p: usize,
) -> Array4<f64> {
    let (n, ci, h, wd) = x.dim();
    let (co, ci_w, kh, kw) = w.dim();
    assert_eq!(ci, ci_w, "channel mismatch: input {ci}, weight {ci_w}");
    let ho = conv_out_size(h, kh, s, p);
    let wo = conv_out_size(wd, kw, s, p);
    let w_mat = w.to_shape((co, ci * kh * kw)).expect("weight must be contiguous");
    let mut y = Array4::<f64>::zeros((n, co, ho, wo));
    for ni in 0..n {
        let col = im2col(x.index_axis(Axis(0), ni), kh, kw, s, p);
        let y_mat = w_mat.dot(&col);
        let mut y_n = y.index_axis_mut(Axis(0), ni);
        let mut y_view = y_n.view_mut().into_shape_with_order((co, ho * wo)).unwrap();
        y_view.assign(&y_mat);
    }
    if let Some(bias) = b {
        for ni in 0..n {
            for c in 0..co {
                let mut plane = y.index_axis_mut(Axis(0), ni);
                plane.index_axis_mut(Axis(0), c).mapv_inplace(|v| v + bias[c]);
            }
        }
    }
    y
}

/// Gradient of [`conv2d_fwd`] with respect to its input.
pub fn conv2d_bwd_input(
    gy: ArrayView4<'_, f64>,
    w: ArrayView4<'_, f64>,
    s: usize,
    p: usize,
    hw: (usize, usize),
) -> Array4<f64> {
    let (n, co, ho, wo) = gy.dim();
    let (co_w, ci, kh, kw) = w.dim();
    assert_eq!(co, co_w, "channel mismatch: grad {co}, weight {co_w}");
    let (h, wd) = hw;
    assert_eq!(ho, conv_out_size(h, kh, s, p), "spatial mismatch on rows");
    assert_eq!(wo, conv_out_size(wd, kw, s, p), "spatial mismatch on cols");
    let w_mat = w.to_shape((co, ci * kh * kw)).expect("weight must be contiguous");
    let w_t = w_mat.t();
    let mut gx = Array4::<f64>::zeros((n, ci, h, wd));
    for ni in 0..n {
        let gy_n = gy.index_axis(Axis(0), ni);
        let gy_mat = gy_n.to_shape((co, ho * wo)).unwrap();
        let col = w_t.dot(&gy_mat);
        let mut gx_n = gx.index_axis_mut(Axis(0), ni);
        col2im_acc(&col, ci, h, wd, kh, kw, s, p, &mut gx_n.view_mut());
    }
    gx
}

/// Gradient of [`conv2d_fwd`] with respect to its weight.
pub fn conv2d_bwd_weight(
    x: ArrayView4<'_, f64>,
    gy: ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    s: usize,
    p: usize,
) -> Array4<f64> {
    let (n, ci, h, wd) = x.dim();
    let (n_g, co, ho, wo) = gy.dim();
    assert_eq!(n, n_g, "batch mismatch");
    assert_eq!(ho, conv_out_size(h, kh, s, p), "spatial mismatch on rows");
    assert_eq!(wo, conv_out_size(wd, kw, s, p), "spatial mismatch on cols");
    let mut gw_mat = Array2::<f64>::zeros((co, ci * kh * kw));
    for ni in 0..n {
        let col = im2col(x.index_axis(Axis(0), ni), kh, kw, s, p);
        let gy_n = gy.index_axis(Axis(0), ni);
        let gy_mat = gy_n.to_shape((co, ho * wo)).unwrap();
        gw_mat += &gy_mat.dot(&col.t());
    }
    gw_mat.into_shape_with_order((co, ci, kh, kw)).unwrap()
}

/// Per-output-channel sum of a gradient, the bias gradient of both conv kinds.
pub fn bias_grad(gy: ArrayView4<'_, f64>) -> Array1<f64> {
    let (_, co, _, _) = gy.dim();
    let mut gb = Array1::<f64>::zeros(co);
    for c in 0..co {
        gb[c] = gy.index_axis(Axis(1), c).sum();
    }
    gb
}

/// Strided 2-D convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param<Ix4>,
    pub b: Param<Ix1>,
    pub stride: usize,
    pub pad: usize,
}

/// Cached forward input, needed for the weight gradient.
pub struct Conv2dCache {
    x: Array4<f64>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            w: Param::zeros(Ix4(out_ch, in_ch, k, k)),
            b: Param::zeros(Ix1(out_ch)),
            stride,
            pad,
        }
    }

    pub fn init<R: Rng>(&mut self, std: f64, rng: &mut R) {
        self.w.init_normal(std, rng);
        self.b.v.fill(0.0);
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Conv2dCache) {
        let y = conv2d_fwd(x.view(), self.w.v.view(), Some(&self.b.v), self.stride, self.pad);
        (y, Conv2dCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &Conv2dCache, gy: &Array4<f64>) -> Array4<f64> {
        let (_, _, h, w) = cache.x.dim();
        let (kh, kw) = (self.w.v.dim().2, self.w.v.dim().3);
        self.w.g += &conv2d_bwd_weight(cache.x.view(), gy.view(), kh, kw, self.stride, self.pad);
        self.b.g += &bias_grad(gy.view());
        conv2d_bwd_input(gy.view(), self.w.v.view(), self.stride, self.pad, (h, w))
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamView<'_>)) {
        visit(&self.w, format!("{prefix}.weight"), f);
        visit(&self.b, format!("{prefix}.bias"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        visit_mut(&mut self.w, format!("{prefix}.weight"), f);
        visit_mut(&mut self.b, format!("{prefix}.bias"), f);
    }
}

/// Transposed 2-D convolution layer with bias. Weight layout `[in, out, kh, kw]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Param<Ix4>,
    pub b: Param<Ix1>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

pub struct ConvTranspose2dCache {
    x: Array4<f64>,
}

impl ConvTranspose2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Self {
        assert!(out_pad < stride.max(1));
        Self {
            w: Param::zeros(Ix4(in_ch, out_ch, k, k)),
            b: Param::zeros(Ix1(out_ch)),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn init<R: Rng>(&mut self, std: f64, rng: &mut R) {
        self.w.init_normal(std, rng);
        self.b.v.fill(0.0);
    }

    pub fn out_channels(&self) -> usize {
        self.w.v.dim().1
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvTranspose2dCache) {
        let (_, _, h, w) = x.dim();
        let k = self.w.v.dim().2;
        let ho = conv_transpose_out_size(h, k, self.stride, self.pad, self.out_pad);
        let wo = conv_transpose_out_size(w, k, self.stride, self.pad, self.out_pad);
        // The transposed convolution is the input-gradient of a strided
        // convolution whose weight has our layout with channel axes swapped.
        let mut y = conv2d_bwd_input(x.view(), self.w.v.view(), self.stride, self.pad, (ho, wo));
        let co = self.out_channels();
        for ni in 0..y.dim().0 {
            for c in 0..co {
                let mut plane = y.index_axis_mut(Axis(0), ni);
                plane.index_axis_mut(Axis(0), c).mapv_inplace(|v| v + self.b.v[c]);
            }
        }
        (y, ConvTranspose2dCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &ConvTranspose2dCache, gy: &Array4<f64>) -> Array4<f64> {
        let k = self.w.v.dim().2;
        // Roles swap relative to Conv2d: the weight gradient correlates the
        // output gradient (acting as conv input) with our input.
        self.w.g += &conv2d_bwd_weight(gy.view(), cache.x.view(), k, k, self.stride, self.pad);
        self.b.g += &bias_grad(gy.view());
        conv2d_fwd(gy.view(), self.w.v.view(), None, self.stride, self.pad)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamView<'_>)) {
        visit(&self.w, format!("{prefix}.weight"), f);
        visit(&self.b, format!("{prefix}.bias"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        visit_mut(&mut self.w, format!("{prefix}.weight"), f);
        visit_mut(&mut self.b, format!("{prefix}.bias"), f);
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

    /// Central finite difference of `f` at `x[idx]`.
    fn fd<F: FnMut(&Array4<f64>) -> f64>(x: &Array4<f64>, idx: (usize, usize, usize, usize), mut f: F) -> f64 {
        let eps = 1e-6;
        let mut xp = x.clone();
        xp[idx] += eps;
        let mut xm = x.clone();
        xm[idx] -= eps;
        (f(&xp) - f(&xm)) / (2.0 * eps)
    }

    #[test]
    fn conv_output_sizes_match_arithmetic() {
        assert_eq!(conv_out_size(256, 4, 2, 1), 128);
        assert_eq!(conv_out_size(32, 4, 1, 1), 31);
        assert_eq!(conv_out_size(7, 3, 2, 1), 4);
        assert_eq!(conv_transpose_out_size(4, 3, 2, 1, 1), 8);
        assert_eq!(conv_transpose_out_size(8, 7, 1, 3, 0), 8);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // Direct 7-deep loop as the oracle.
        let x = randn4((2, 3, 5, 6), 1);
        let w = randn4((4, 3, 3, 3), 2);
        let b = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let (s, p) = (2, 1);
        let y = conv2d_fwd(x.view(), w.view(), Some(&b), s, p);
        let (ho, wo) = (conv_out_size(5, 3, s, p), conv_out_size(6, 3, s, p));
        assert_eq!(y.dim(), (2, 4, ho, wo));
        for n in 0..2 {
            for co in 0..4 {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..3 {
                            for u in 0..3 {
                                for v in 0..3 {
                                    let hi = (i * s + u) as isize - p as isize;
                                    let wj = (j * s + v) as isize - p as isize;
                                    if hi >= 0 && hi < 5 && wj >= 0 && wj < 6 {
                                        acc += w[[co, ci, u, v]] * x[[n, ci, hi as usize, wj as usize]];
                                    }
                                }
                            }
                        }
                        assert!((acc - y[[n, co, i, j]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = randn4((1, 2, 6, 6), 3);
        let mut layer = Conv2d::new(2, 3, 3, 2, 1);
        layer.init(0.5, &mut ChaCha20Rng::seed_from_u64(4));
        let (y, cache) = layer.forward(&x);
        let gy = randn4(y.dim(), 5);
        let gx = layer.backward(&cache, &gy);

        let loss = |layer: &Conv2d, x: &Array4<f64>| -> f64 {
            let (y, _) = layer.forward(x);
            (&y * &gy).sum()
        };
        for &idx in &[(0, 0, 0, 0), (0, 1, 3, 2), (0, 0, 5, 5)] {
            let num = fd(&x, idx, |xx| loss(&layer, xx));
            assert!((num - gx[idx]).abs() < 1e-6, "gx {num} vs {}", gx[idx]);
        }
        for &widx in &[(0, 0, 0, 0), (2, 1, 2, 2), (1, 0, 1, 1)] {
            let eps = 1e-6;
            let mut lp = layer.clone();
            lp.w.v[widx] += eps;
            let mut lm = layer.clone();
            lm.w.v[widx] -= eps;
            let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert!((num - layer.w.g[widx]).abs() < 1e-6, "gw {num} vs {}", layer.w.g[widx]);
        }
        let eps = 1e-6;
        let mut lp = layer.clone();
        lp.b.v[1] += eps;
        let mut lm = layer.clone();
        lm.b.v[1] -= eps;
        let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
        assert!((num - layer.b.g[1]).abs() < 1e-6);
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let x = randn4((1, 3, 4, 4), 6);
        let mut layer = ConvTranspose2d::new(3, 2, 3, 2, 1, 1);
        layer.init(0.5, &mut ChaCha20Rng::seed_from_u64(7));
        let (y, cache) = layer.forward(&x);
        assert_eq!(y.dim(), (1, 2, 8, 8));
        let gy = randn4(y.dim(), 8);
        let gx = layer.backward(&cache, &gy);

        let loss = |layer: &ConvTranspose2d, x: &Array4<f64>| -> f64 {
            let (y, _) = layer.forward(x);
            (&y * &gy).sum()
        };
        for &idx in &[(0, 0, 0, 0), (0, 2, 3, 1), (0, 1, 2, 2)] {
            let num = fd(&x, idx, |xx| loss(&layer, xx));
            assert!((num - gx[idx]).abs() < 1e-6, "gx {num} vs {}", gx[idx]);
        }
        for &widx in &[(0, 0, 0, 0), (2, 1, 2, 2), (1, 1, 0, 1)] {
            let eps = 1e-6;
            let mut lp = layer.clone();
            lp.w.v[widx] += eps;
            let mut lm = layer.clone();
            lm.w.v[widx] -= eps;
            let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert!((num - layer.w.g[widx]).abs() < 1e-6, "gw {num} vs {}", layer.w.g[widx]);
        }
        let eps = 1e-6;
        let mut lp = layer.clone();
        lp.b.v[0] += eps;
        let mut lm = layer.clone();
        lm.b.v[0] -= eps;
        let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
        assert!((num - layer.b.g[0]).abs() < 1e-6);
    }

    #[test]
    fn stride_one_transpose_with_k7_preserves_size() {
        let x = randn4((1, 2, 9, 9), 10);
        let mut layer = ConvTranspose2d::new(2, 3, 7, 1, 3, 0);
        layer.init(0.1, &mut ChaCha20Rng::seed_from_u64(11));
        let (y, _) = layer.forward(&x);
        assert_eq!(y.dim(), (1, 3, 9, 9));
    }
}
