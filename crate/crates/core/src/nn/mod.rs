//! Minimal f64 neural-network building blocks with explicit backward passes.
//!
//! Layers are stateless with respect to activations: `forward` returns the
//! output together with a cache value, and `backward` consumes that cache.
//! This lets one parameter set participate in several forwards per training
//! step (the cycle reconstruction reuses each generator), with gradients
//! accumulating into the `Param` buffers until the optimizer consumes them.

pub mod adam;
pub mod conv;
pub mod norm;
pub mod ops;

use ndarray::{Array, ArrayViewD, ArrayViewMutD, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A learnable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub v: Array<f64, D>,
    pub g: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn zeros(shape: D) -> Self {
        Self { v: Array::zeros(shape.clone()), g: Array::zeros(shape) }
    }

    pub fn filled(shape: D, value: f64) -> Self {
        Self { v: Array::from_elem(shape.clone(), value), g: Array::zeros(shape) }
    }

    /// Fills the value tensor with draws from `N(0, std)`, in row-major order.
    pub fn init_normal<R: Rng>(&mut self, std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        for v in self.v.iter_mut() {
            *v = dist.sample(rng);
        }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Read-only view of one named parameter.
pub struct ParamView<'a> {
    pub value: ArrayViewD<'a, f64>,
    pub grad: ArrayViewD<'a, f64>,
}

/// Mutable view of one named parameter, value and grad split-borrowed.
pub struct ParamViewMut<'a> {
    pub value: ArrayViewMutD<'a, f64>,
    pub grad: ArrayViewMutD<'a, f64>,
}

/// Anything holding named parameters. Visit order is the declaration order
/// and must stay stable: serialization, optimizer state and determinism
/// checks all key off it.
pub trait ParamSet {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamView<'_>));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>));

    fn zero_grads(&mut self) {
        self.for_each_param_mut(&mut |_, mut p| p.grad.fill(0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, p| n += p.value.len());
        n
    }

    /// All parameter names, in visit order.
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |name, _| names.push(name.to_string()));
        names
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(&mut |_, p| {
            if !p.value.iter().all(|v| v.is_finite()) {
                ok = false;
            }
        });
        ok
    }
}

pub(crate) fn visit<D: Dimension>(
    p: &Param<D>,
    name: String,
    f: &mut dyn FnMut(&str, ParamView<'_>),
) {
    f(&name, ParamView { value: p.v.view().into_dyn(), grad: p.g.view().into_dyn() });
}

pub(crate) fn visit_mut<D: Dimension>(
    p: &mut Param<D>,
    name: String,
    f: &mut dyn FnMut(&str, ParamViewMut<'_>),
) {
    f(&name, ParamViewMut { value: p.v.view_mut().into_dyn(), grad: p.g.view_mut().into_dyn() });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Ix2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn init_normal_matches_requested_moments() {
        // Law-of-large-numbers check on a million draws.
        let mut p = Param::<Ix2>::zeros(Ix2(1000, 1000));
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        p.init_normal(0.02, &mut rng);
        let n = p.v.len() as f64;
        let mean = p.v.sum() / n;
        let var = p.v.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(mean.abs() <= 3.0 * 0.02 / 1000.0, "mean {mean}");
        assert!((std - 0.02).abs() <= 0.02 * 0.01, "std {std}");
    }

    #[test]
    fn same_seed_same_draws() {
        let mut a = Param::<Ix2>::zeros(Ix2(16, 16));
        let mut b = Param::<Ix2>::zeros(Ix2(16, 16));
        a.init_normal(0.02, &mut ChaCha20Rng::seed_from_u64(7));
        b.init_normal(0.02, &mut ChaCha20Rng::seed_from_u64(7));
        assert_eq!(a.v, b.v);
    }
}
