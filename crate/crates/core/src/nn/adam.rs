//! Adam optimizer over a [`ParamSet`](super::ParamSet).

use ndarray::ArrayD;

use super::ParamSet;

/// Adam state for one network. Moment buffers are keyed by parameter name in
/// visit order, so state survives serialization and reattachment.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step counter used for bias correction.
    pub t: u64,
    /// `(name, first moment, second moment)` in parameter visit order.
    pub moments: Vec<(String, ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, t: 0, moments: Vec::new() }
    }

    /// Applies one update using the gradients currently accumulated in `net`.
    pub fn step(&mut self, net: &mut dyn ParamSet) {
        self.t += 1;
        if self.moments.is_empty() {
            net.for_each_param(&mut |name, p| {
                self.moments.push((
                    name.to_string(),
                    ArrayD::zeros(p.value.raw_dim()),
                    ArrayD::zeros(p.value.raw_dim()),
                ));
            });
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let mut idx = 0usize;
        let moments = &mut self.moments;
        net.for_each_param_mut(&mut |name, mut p| {
            let (stored_name, m, v) = &mut moments[idx];
            assert_eq!(stored_name, name, "optimizer state out of order");
            idx += 1;
            for ((w, &g), (m, v)) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{visit, visit_mut, Param, ParamView, ParamViewMut};
    use ndarray::Ix1;

    struct Toy {
        p: Param<Ix1>,
    }

    impl ParamSet for Toy {
        fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamView<'_>)) {
            visit(&self.p, "p".into(), f);
        }
        fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
            visit_mut(&mut self.p, "p".into(), f);
        }
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (x - 3)^2 elementwise.
        let mut net = Toy { p: Param::zeros(Ix1(4)) };
        let mut opt = Adam::new(0.1, 0.5, 0.999);
        for _ in 0..500 {
            let g = net.p.v.mapv(|x| 2.0 * (x - 3.0));
            net.p.g.assign(&g);
            opt.step(&mut net);
        }
        for &x in net.p.v.iter() {
            assert!((x - 3.0).abs() < 1e-3, "{x}");
        }
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With bias correction the very first Adam step is ~lr in magnitude.
        let mut net = Toy { p: Param::zeros(Ix1(1)) };
        net.p.g[0] = 0.37;
        let mut opt = Adam::new(2e-4, 0.5, 0.999);
        opt.step(&mut net);
        assert!((net.p.v[0].abs() - 2e-4).abs() < 1e-8);
    }
}
