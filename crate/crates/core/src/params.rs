//! Named, shaped parameter tensors with gradient slots.
//!
//! Entries keep their insertion order, so optimizer sweeps and serialized
//! output are deterministic.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::Tensor;

pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
    }

    /// Weight matrix initialized uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    /// stored (fan_in, fan_out).
    pub fn insert_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound));
        self.insert(name, t);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) {
        self.insert(name, Tensor::scalar(v));
    }

    fn entry(&self, name: &str) -> &Entry {
        let ix = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &self.entries[ix]
    }

    fn entry_mut(&mut self, name: &str) -> &mut Entry {
        let ix = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &mut self.entries[ix]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.entry(name).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entry_mut(name).value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.entry(name).grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entry_mut(name).grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// (name, value, grad) triples in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value, &e.grad))
    }

    /// Mutable (value, grad) pairs in insertion order, for optimizer updates.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Tensor)> {
        self.entries
            .iter_mut()
            .map(|e| (e.name.as_str(), &mut e.value, &mut e.grad))
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(String, Tensor)]) {
        assert_eq!(snapshot.len(), self.entries.len(), "snapshot size mismatch");
        for (name, value) in snapshot {
            let e = self.entry_mut(name);
            assert_eq!(e.value.shape(), value.shape(), "snapshot shape mismatch");
            e.value = value.clone();
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insertion_order_is_preserved() {
        let mut store = ParamStore::new();
        store.insert_scalar("b", 1.0);
        store.insert_scalar("a", 2.0);
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    #[should_panic]
    fn duplicate_name_panics() {
        let mut store = ParamStore::new();
        store.insert_scalar("x", 0.0);
        store.insert_scalar("x", 1.0);
    }

    #[test]
    fn weight_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.insert_weight("w", 16, 8, &mut rng);
        let bound = 1.0 / 4.0;
        for &v in store.value("w").data() {
            assert!(v.abs() <= bound);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert_weight("w", 4, 4, &mut rng);
        let snap = store.snapshot();
        store.value_mut("w").fill(0.0);
        store.restore(&snap);
        assert_eq!(store.value("w"), &snap[0].1);
    }
}
