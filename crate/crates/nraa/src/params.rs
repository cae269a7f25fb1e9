//! Named parameter storage shared by every learnable module.
//!
//! Parameters live in a `BTreeMap` so iteration order (and therefore
//! checkpoint layout and update order) is deterministic. For a training step
//! the whole store is bound onto a tape as leaves; after the backward pass
//! the optimizer walks the same name -> node mapping to apply updates.

use crate::error::{Error, Result};
use crate::graph::{Gradients, NodeId, Tape};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a freshly initialized parameter; refuses to overwrite.
    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        let prev = self.map.insert(name.to_string(), value);
        assert!(prev.is_none(), "parameter `{name}` registered twice");
    }

    /// N(0, 1/sqrt(fan_in)) initialization.
    pub fn insert_normal(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) {
        let normal = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).unwrap();
        let value = Array2::from_shape_fn((rows, cols), |_| normal.sample(rng));
        self.insert(name, value);
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Copy every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.map {
            ids.insert(name.clone(), tape.leaf(value.clone()));
        }
        BoundParams { ids }
    }
}

/// Name -> tape-node mapping for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// SGD with classical momentum and optional L2 weight decay. Velocity
/// buffers live here, keyed like the parameters, so checkpoints can resume
/// mid-run.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    /// Coupled L2 decay added to the raw gradient before the momentum
    /// update. Zero disables it. Losses downstream of normalization are
    /// scale-invariant, so without decay parameter norms drift upward and
    /// quietly shrink the effective learning rate.
    pub weight_decay: f64,
    velocity: BTreeMap<String, Array2<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay: 0.0,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one update from the gradients of a bound tape.
    pub fn step(&mut self, store: &mut ParamStore, bound: &BoundParams, grads: &Gradients) {
        for (name, id) in bound.iter() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(name).expect("bound param exists in store");
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *v *= self.momentum;
            *v += g;
            if self.weight_decay != 0.0 {
                v.scaled_add(self.weight_decay, p);
            }
            p.scaled_add(-self.lr, v);
        }
    }

    pub fn velocity(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.velocity.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_velocity(&mut self, name: &str, v: Array2<f64>) {
        self.velocity.insert(name.to_string(), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_round_trips_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.insert_normal("a.w", 2, 3, 3, &mut rng);
        store.insert_zeros("b.bias", 1, 4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        assert_eq!(tape.value(bound.id("a.w")), store.get("a.w").unwrap());
        assert_eq!(tape.value(bound.id("b.bias")), store.get("b.bias").unwrap());
    }

    #[test]
    fn sgd_minimizes_a_quadratic() {
        // row_dot_const(diff, diff_value) has gradient exactly diff, i.e. the
        // gradient of 1/2 |w - target|^2; momentum SGD should converge.
        let target = array![[1.0, -2.0, 0.5]];
        let mut store = ParamStore::new();
        store.insert("w", Array2::zeros((1, 3)));
        let mut opt = SgdMomentum::new(0.05, 0.9);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let w = bound.id("w");
            let negt = tape.leaf(-target.clone());
            let diff = tape.add(w, negt);
            let diff_value = tape.value(diff).clone();
            let loss = tape.row_dot_const(diff, &diff_value);
            let grads = tape.backward(loss);
            opt.step(&mut store, &bound, &grads);
        }
        let w = store.get("w").unwrap();
        for c in 0..3 {
            assert!((w[(0, c)] - target[(0, c)]).abs() < 1e-6, "w = {w:?}");
        }
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut store = ParamStore::new();
        store.insert("w", array![[0.0]]);
        let mut opt = SgdMomentum::new(1.0, 0.5);
        // Constant gradient of 1: updates should be -1, -1.5, -1.75, ...
        let mut expected = 0.0;
        let mut vel = 0.0;
        for _ in 0..4 {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let w = bound.id("w");
            let loss = tape.row_dot_const(w, &array![[1.0]]);
            let grads = tape.backward(loss);
            opt.step(&mut store, &bound, &grads);
            vel = 0.5 * vel + 1.0;
            expected -= vel;
            assert!((store.get("w").unwrap()[(0, 0)] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut store = ParamStore::new();
        store.insert("w", array![[2.0]]);
        let mut opt = SgdMomentum::new(1.0, 0.0);
        opt.weight_decay = 0.1;
        // Zero data gradient: the only force is decay, p <- p - lr * wd * p.
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let w = bound.id("w");
        let loss = tape.scale(w, 0.0);
        let grads = tape.backward(loss);
        opt.step(&mut store, &bound, &grads);
        assert!((store.get("w").unwrap()[(0, 0)] - 1.8).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_registration_panics() {
        let mut store = ParamStore::new();
        store.insert_zeros("x", 1, 1);
        store.insert_zeros("x", 1, 1);
    }
}
