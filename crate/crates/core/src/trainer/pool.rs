//! Buffer of past generated fakes for discriminator updates.

use ndarray::{Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Once full, each incoming fake is returned as-is or swapped against a
/// stored one with probability 1/2. Capacity 0 disables storage entirely.
#[derive(Debug, Clone)]
pub struct ImagePool {
    capacity: usize,
    items: Vec<Array4<f64>>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: Vec::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Processes a batch image by image, returning the batch to feed the
    /// discriminator. Each stored/returned item is a single `[1, C, H, W]`.
    pub fn query(&mut self, batch: &Array4<f64>, rng: &mut ChaCha20Rng) -> Array4<f64> {
        if self.capacity == 0 {
            return batch.clone();
        }
        let n = batch.dim().0;
        let mut out = batch.clone();
        for i in 0..n {
            let current = batch.index_axis(Axis(0), i).insert_axis(Axis(0)).to_owned();
            if self.items.len() < self.capacity {
                self.items.push(current);
                continue; // out already holds the current image
            }
            if rng.random_bool(0.5) {
                let k = rng.random_range(0..self.items.len());
                let stored = std::mem::replace(&mut self.items[k], current);
                out.index_axis_mut(Axis(0), i).assign(&stored.index_axis(Axis(0), 0));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn single(v: f64) -> Array4<f64> {
        Array4::from_elem((1, 1, 2, 2), v)
    }

    #[test]
    fn zero_capacity_returns_current() {
        let mut pool = ImagePool::new(0);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for k in 0..20 {
            let b = single(k as f64);
            let out = pool.query(&b, &mut rng);
            assert_eq!(out, b);
        }
        assert!(pool.is_empty());
    }

    #[test]
    fn never_exceeds_capacity() {
        let mut pool = ImagePool::new(7);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for k in 0..100 {
            pool.query(&single(k as f64), &mut rng);
            assert!(pool.len() <= 7);
        }
        assert_eq!(pool.len(), 7);
    }

    #[test]
    fn replacement_frequency_is_half() {
        // Fill with 50 distinct items, then query 10^4 more and count how
        // often a stored item comes back instead of the current one.
        let mut pool = ImagePool::new(50);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for k in 0..50 {
            pool.query(&single(k as f64), &mut rng);
        }
        let trials = 10_000;
        let mut swaps = 0;
        for k in 0..trials {
            let v = 1000.0 + k as f64;
            let out = pool.query(&single(v), &mut rng);
            if out[[0, 0, 0, 0]] != v {
                swaps += 1;
            }
        }
        let freq = swaps as f64 / trials as f64;
        assert!((freq - 0.5).abs() <= 0.02, "swap frequency {freq}");
    }

    #[test]
    fn batch_granularity_is_per_image() {
        let mut pool = ImagePool::new(2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut batch = Array4::zeros((3, 1, 2, 2));
        for i in 0..3 {
            batch.index_axis_mut(Axis(0), i).fill(i as f64);
        }
        let out = pool.query(&batch, &mut rng);
        assert_eq!(pool.len(), 2, "first two images fill the pool");
        assert_eq!(out.dim(), batch.dim());
    }
}
