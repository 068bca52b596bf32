//! Named parameter table with deterministic, order-independent
//! initialization.
//!
//! Every parameter draws from its own RNG stream keyed by (seed, name), so
//! a model that owns a subset of another model's parameters initializes the
//! shared ones to identical values. This is what makes paired-run ablation
//! comparisons exact rather than approximate.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor2D;

/// FNV-1a hash of a name, used as the RNG stream id.
pub fn name_stream(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Initialization family for a parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in (−limit, limit).
    Uniform { limit: f64 },
}

/// Ordered name → tensor map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    table: BTreeMap<String, Tensor2D>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor2D) {
        self.table.insert(name.into(), t);
    }

    /// Creates and inserts a parameter drawn from the (seed, name) stream.
    pub fn init(&mut self, name: &str, rows: usize, cols: usize, init: Init, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(name_stream(name));
        let t = match init {
            Init::Zeros => Tensor2D::zeros(rows, cols),
            Init::Ones => Tensor2D::filled(rows, cols, 1.0),
            Init::Uniform { limit } => {
                Tensor2D::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
            }
        };
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2D> {
        self.table
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2D> {
        self.table
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.table.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor2D)> {
        self.table.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor2D)> {
        self.table.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.table.keys()
    }

    /// Number of parameters (tensors).
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.table.values().map(Tensor2D::len).sum()
    }

    /// √(Σ over all entries squared), the global norm used for clipping.
    pub fn global_norm(&self) -> f64 {
        self.table
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.table.values().all(Tensor2D::all_finite)
    }

    /// Entry-wise x ← x + c·y over matching names; shapes must agree.
    pub fn axpy(&mut self, c: f64, other: &Params) -> Result<()> {
        for (name, y) in other.iter() {
            let x = self.get_mut(name)?;
            if x.shape() != y.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' shape mismatch: {:?} vs {:?}",
                    name,
                    x.shape(),
                    y.shape()
                )));
            }
            x.add_assign(&y.scale(c));
        }
        Ok(())
    }
}

/// Parameters bound onto a tape as leaves, addressable by name.
pub struct Bound {
    nodes: BTreeMap<String, NodeId>,
}

impl Bound {
    /// Wraps an existing name → node mapping (used by gradient-check
    /// harnesses that bind parameters themselves).
    pub fn from_nodes(nodes: BTreeMap<String, NodeId>) -> Self {
        Self { nodes }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter '{}' not bound", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }
}

/// Binds every parameter onto the tape; `trainable` controls whether the
/// leaves accumulate gradients.
pub fn bind(tape: &Tape, params: &Params, trainable: bool) -> Bound {
    let nodes = params
        .iter()
        .map(|(name, t)| {
            let id = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            (name.clone(), id)
        })
        .collect();
    Bound { nodes }
}

/// Reads gradients back out by name; parameters nothing flowed to get
/// zero tensors of the right shape.
pub fn collect_grads(bound: &Bound, grads: &Gradients, params: &Params) -> Result<Params> {
    let mut out = Params::new();
    for (name, t) in params.iter() {
        let id = bound.node(name)?;
        out.insert(name.clone(), grads.get_or_zeros(id, t.rows(), t.cols()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = Params::new();
        a.init("w1", 2, 3, Init::Uniform { limit: 0.5 }, 42);
        a.init("w2", 3, 3, Init::Uniform { limit: 0.5 }, 42);

        let mut b = Params::new();
        b.init("w2", 3, 3, Init::Uniform { limit: 0.5 }, 42);
        b.init("w1", 2, 3, Init::Uniform { limit: 0.5 }, 42);

        assert_eq!(a.get("w1").unwrap().data(), b.get("w1").unwrap().data());
        assert_eq!(a.get("w2").unwrap().data(), b.get("w2").unwrap().data());
    }

    #[test]
    fn init_subset_matches_superset() {
        let mut small = Params::new();
        small.init("shared", 4, 4, Init::Uniform { limit: 0.1 }, 7);

        let mut big = Params::new();
        big.init("extra", 8, 8, Init::Uniform { limit: 0.1 }, 7);
        big.init("shared", 4, 4, Init::Uniform { limit: 0.1 }, 7);

        assert_eq!(
            small.get("shared").unwrap().data(),
            big.get("shared").unwrap().data()
        );
    }

    #[test]
    fn different_names_and_seeds_differ() {
        let mut p = Params::new();
        p.init("a", 2, 2, Init::Uniform { limit: 1.0 }, 1);
        p.init("b", 2, 2, Init::Uniform { limit: 1.0 }, 1);
        assert_ne!(p.get("a").unwrap().data(), p.get("b").unwrap().data());

        let mut q = Params::new();
        q.init("a", 2, 2, Init::Uniform { limit: 1.0 }, 2);
        assert_ne!(p.get("a").unwrap().data(), q.get("a").unwrap().data());
    }

    #[test]
    fn bind_and_collect_roundtrip() {
        let mut p = Params::new();
        p.init("w", 2, 2, Init::Uniform { limit: 1.0 }, 3);
        p.init("unused", 2, 2, Init::Ones, 3);

        let tape = Tape::new();
        let bound = bind(&tape, &p, true);
        let w = bound.node("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);

        let by_name = collect_grads(&bound, &grads, &p).unwrap();
        let gw = by_name.get("w").unwrap();
        let expect = p.get("w").unwrap().scale(2.0);
        for i in 0..4 {
            assert!((gw.data()[i] - expect.data()[i]).abs() < 1e-12);
        }
        // untouched parameter gets zeros, not an absence
        assert_eq!(by_name.get("unused").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn global_norm_matches_hand_value() {
        let mut p = Params::new();
        p.insert("a", Tensor2D::new(1, 2, vec![3.0, 4.0]).unwrap());
        assert!((p.global_norm() - 5.0).abs() < 1e-12);
    }
}
