//! Gaussian-smoothed cyclic time embeddings and plain lookup tables.

use alloc::format;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;

/// Default kernel width for the time smoothing.
pub const DEFAULT_SIGMA: f64 = 1.0;
/// Bound of the symmetric uniform initialisation of embedding tables.
pub const INIT_BOUND: f64 = 0.1;

/// Distance between two slots on a cycle of `slots` positions.
pub fn periodic_distance(tau: usize, h: usize, slots: usize) -> Result<usize> {
    ensure!(tau < slots && h < slots, "slots ({tau}, {h}) out of range for a cycle of {slots}");
    let d = tau.abs_diff(h);
    Ok(d.min(slots - d))
}

/// Row-stochastic `H x H` kernel: `w[τ][h] ∝ exp(-Δ(τ,h)² / 2σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSmoothing {
    slots: usize,
    sigma: f64,
    weights: Tensor,
}

impl TimeSmoothing {
    pub fn new(slots: usize, sigma: f64) -> Result<Self> {
        ensure!(slots >= 2, "need at least two time slots, got {slots}");
        ensure!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive, got {sigma}");
        let mut data = Vec::with_capacity(slots * slots);
        for tau in 0..slots {
            let start = data.len();
            for h in 0..slots {
                let d = periodic_distance(tau, h, slots)? as f64;
                data.push(math::exp(-d * d / (2.0 * sigma * sigma)));
            }
            let z: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|w| *w /= z);
        }
        Ok(TimeSmoothing { slots, sigma, weights: Tensor::matrix(slots, slots, data) })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weight(&self, tau: usize, h: usize) -> f64 {
        self.weights.at(tau, h)
    }
}

/// Learnable base table `E_T` read through the fixed smoothing kernel.
#[derive(Debug, Clone)]
pub struct SmoothedTimeEmbedding {
    pub smoothing: TimeSmoothing,
    pub table: ParamId,
    pub dim: usize,
}

impl SmoothedTimeEmbedding {
    pub fn register<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        smoothing: TimeSmoothing,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = reg.register(name, Tensor::uniform(&[smoothing.slots(), dim], INIT_BOUND, rng))?;
        Ok(SmoothedTimeEmbedding { smoothing, table, dim })
    }

    /// The full smoothed table `W · E_T`, shape `[H, d]`.
    pub fn smoothed_table(&self, g: &mut Graph, reg: &ParamRegistry) -> Var {
        let w = g.constant(self.smoothing.weights.clone());
        let e = g.param(reg, self.table);
        g.matmul(w, e)
    }

    /// `Σ_h w[τ][h] e_h` for a single slot, shape `[d]`.
    pub fn lookup(&self, g: &mut Graph, reg: &ParamRegistry, tau: usize) -> Result<Var> {
        let slots = self.smoothing.slots();
        ensure!(tau < slots, "slot {tau} out of range for {slots} slots");
        let row = Tensor::vector(self.smoothing.weights.row(tau).to_vec());
        let w = g.constant(row);
        let e = g.param(reg, self.table);
        Ok(g.matmul(w, e))
    }
}

/// A `[count, dim]` table of learnable rows.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn register<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        count: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(count > 0 && dim > 0, "embedding `{name}` needs positive count and dim");
        let table = reg.register(name, Tensor::uniform(&[count, dim], INIT_BOUND, rng))?;
        Ok(EmbeddingTable { table, count, dim })
    }

    /// One row as a `[dim]` vector.
    pub fn lookup(&self, g: &mut Graph, reg: &ParamRegistry, index: usize) -> Result<Var> {
        ensure!(index < self.count, "{}", format!("index {index} out of range for {} rows", self.count));
        let rows = g.gather(reg, self.table, &[index])?;
        Ok(g.reshape(rows, &[self.dim]))
    }

    /// Several rows as a `[indices.len(), dim]` matrix.
    pub fn lookup_many(&self, g: &mut Graph, reg: &ParamRegistry, indices: &[usize]) -> Result<Var> {
        g.gather(reg, self.table, indices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn periodic_distance_examples() {
        assert_eq!(periodic_distance(23, 0, 24).unwrap(), 1);
        assert_eq!(periodic_distance(0, 12, 24).unwrap(), 12);
        assert_eq!(periodic_distance(5, 5, 24).unwrap(), 0);
        assert!(periodic_distance(24, 0, 24).is_err());
    }

    #[test]
    fn unit_sigma_kernel_matches_direct_sum() {
        // Independent evaluation: Z = Σ_{h=0}^{23} exp(-Δ(0,h)²/2).
        let z: f64 = (0..24i64)
            .map(|h| {
                let d = h.min(24 - h) as f64;
                libm::exp(-d * d / 2.0)
            })
            .sum();
        assert!((z - 2.5066).abs() < 1e-3);
        let s = TimeSmoothing::new(24, 1.0).unwrap();
        assert!((s.weight(0, 0) - 1.0 / z).abs() < 1e-15);
        assert!((s.weight(0, 0) - 0.3990).abs() < 1e-4);
        let w1 = libm::exp(-0.5) / z;
        assert!((s.weight(0, 1) - w1).abs() < 1e-15);
        assert_eq!(s.weight(0, 1), s.weight(0, 23));
    }

    #[test]
    fn sharp_kernel_is_one_hot() {
        let s = TimeSmoothing::new(24, 0.01).unwrap();
        for tau in 0..24 {
            assert!(s.weight(tau, tau) > 0.999);
        }
    }

    #[test]
    fn identical_rows_are_preserved() {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = SmoothedTimeEmbedding::register(&mut reg, "t", TimeSmoothing::new(24, 1.0).unwrap(), 3, &mut rng)
            .unwrap();
        let v = [0.25, -1.5, 3.0];
        let rows: Vec<f64> = (0..24).flat_map(|_| v).collect();
        *reg.value_mut(emb.table) = Tensor::matrix(24, 3, rows);
        let mut g = Graph::new();
        for tau in 0..24 {
            let out = emb.lookup(&mut g, &reg, tau).unwrap();
            for (a, b) in g.value(out).data().iter().zip(v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lookup_gradient_is_indicator() {
        let mut reg = ParamRegistry::new();
        let id = reg.register("e", Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let table = EmbeddingTable { table: id, count: 3, dim: 3 };
        let mut g = Graph::new();
        let row = table.lookup(&mut g, &reg, 1).unwrap();
        assert_eq!(g.value(row).data(), &[0.0, 1.0, 0.0]);
        let s = g.sum(row);
        g.backward(s, &mut reg).unwrap();
        assert_eq!(reg.grad(id).unwrap().data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        assert!(table.lookup(&mut g, &reg, 3).is_err());
    }

    #[test]
    fn repeated_lookup_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut reg = ParamRegistry::new();
        let table = EmbeddingTable::register(&mut reg, "e", 4, 2, &mut rng).unwrap();
        let weights = Tensor::vector(vec![0.7, -1.3]);

        let mut g = Graph::new();
        let a = table.lookup(&mut g, &reg, 2).unwrap();
        let b = table.lookup(&mut g, &reg, 2).unwrap();
        let w = g.constant(weights.clone());
        let (wa, wb) = (g.mul(a, w), g.mul(b, w));
        let s = g.add(wa, wb);
        let root = g.sum(s);
        g.backward(root, &mut reg).unwrap();
        let twice = reg.grad(table.table).unwrap().clone();

        reg.clear_grads();
        let mut g = Graph::new();
        let a = table.lookup(&mut g, &reg, 2).unwrap();
        let w = g.constant(weights);
        let wa = g.mul(a, w);
        let s = g.sum(wa);
        let root = g.scale(s, 2.0);
        g.backward(root, &mut reg).unwrap();
        assert_eq!(&twice, reg.grad(table.table).unwrap());
    }

    proptest! {
        #[test]
        fn kernel_rows_stochastic_shift_equivariant_local(slots in 2usize..40, sigma in 0.05f64..6.0) {
            let s = TimeSmoothing::new(slots, sigma).unwrap();
            for tau in 0..slots {
                let row = s.weights().row(tau);
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for shift in 0..slots {
                    for h in 0..slots {
                        let a = s.weight(tau, h);
                        let b = s.weight((tau + shift) % slots, (h + shift) % slots);
                        prop_assert!((a - b).abs() < 1e-15);
                    }
                }
                for h in 0..slots {
                    for h2 in 0..slots {
                        let (d1, d2) = (
                            periodic_distance(tau, h, slots).unwrap(),
                            periodic_distance(tau, h2, slots).unwrap(),
                        );
                        if d1 < d2 {
                            prop_assert!(s.weight(tau, h) >= s.weight(tau, h2));
                        }
                    }
                }
            }
        }
    }
}
