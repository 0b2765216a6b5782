//! Binary sum tree over non-negative weights: `O(log n)` point updates and
//! proportional sampling.

#[derive(Clone, Debug)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(n: usize) -> Self {
        let leaves = n.max(1).next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn from_weights(weights: &[f64]) -> Self {
        let mut t = Self::new(weights.len());
        t.nodes[t.leaves..t.leaves + weights.len()].copy_from_slice(weights);
        t.rebuild();
        t
    }

    /// Recomputes all internal sums from the leaves.
    pub fn rebuild(&mut self) {
        for i in (1..self.leaves).rev() {
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, w: f64) {
        debug_assert!(w >= 0.0);
        let mut k = self.leaves + i;
        self.nodes[k] = w;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf `i` with `Σ_{l<i} w_l ≤ x < Σ_{l≤i} w_l`, and the remainder
    /// `x - Σ_{l<i} w_l`. Never returns a zero-weight leaf when the total is
    /// positive.
    pub fn find(&self, mut x: f64) -> (usize, f64) {
        let mut k = 1;
        while k < self.leaves {
            let left = self.nodes[2 * k];
            if x < left || self.nodes[2 * k + 1] == 0.0 {
                k *= 2;
                x = x.min(left);
            } else {
                x -= left;
                k = 2 * k + 1;
            }
        }
        let mut i = k - self.leaves;
        if self.get(i) == 0.0 {
            // Rounding pushed us onto an empty leaf; fall back to the
            // nearest non-empty one.
            i = (0..self.leaves)
                .filter(|&l| self.get(l) > 0.0)
                .min_by_key(|&l| l.abs_diff(i))
                .unwrap_or(i);
            x = 0.0;
        }
        (i, x.max(0.0).min(self.get(i)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampling_is_proportional() {
        let w = [1.0, 0.0, 3.0, 4.0, 0.0];
        let t = SumTree::from_weights(&w);
        assert_eq!(t.total(), 8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = [0usize; 5];
        let n = 80_000;
        for _ in 0..n {
            hits[t.find(rng.random::<f64>() * t.total()).0] += 1;
        }
        assert_eq!(hits[1] + hits[4], 0);
        for i in [0, 2, 3] {
            let p = w[i] / 8.0;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((hits[i] as f64 - n as f64 * p).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn updates_track_totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = vec![0.0; 37];
        let mut t = SumTree::new(37);
        for _ in 0..10_000 {
            let i = rng.random_range(0..37);
            w[i] = rng.random_range(0.0..5.0);
            t.set(i, w[i]);
        }
        let s: f64 = w.iter().sum();
        assert!((t.total() - s).abs() < 1e-9 * s);
        let (i, rem) = t.find(t.total() * (1.0 - 1e-17));
        assert!(t.get(i) > 0.0 && rem <= t.get(i));
    }
}
