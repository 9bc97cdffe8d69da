use std::collections::HashMap;

use crate::array::Array;

/// Handle to one named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named trainable arrays plus per-parameter gradient accumulators.
///
/// Insertion order is the canonical parameter order: checkpoints, optimizer
/// state, and gradient clipping all iterate in it, which keeps every
/// training run deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    grads: Vec<Array>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Array) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Array::zeros(value.rows(), value.cols()));
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.grads[id.0]
    }

    /// Reset every gradient accumulator to exact zero.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn grad_global_norm(&self) -> f64 {
        let sq: f64 = self
            .grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum();
        sq.sqrt()
    }

    /// Scale all gradients so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in &mut self.grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_lookup() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Array::scalar(2.0));
        assert_eq!(ps.by_name("w"), Some(w));
        assert_eq!(ps.value(w).scalar_value(), 2.0);
        assert_eq!(ps.grad(w).scalar_value(), 0.0);
        assert_eq!(ps.element_count(), 1);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_name_panics() {
        let mut ps = ParamStore::new();
        ps.add("w", Array::scalar(0.0));
        ps.add("w", Array::scalar(1.0));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Array::row(vec![3.0, 0.0]));
        let b = ps.add("b", Array::row(vec![0.0, 4.0]));
        ps.grad_mut(a).data_mut().copy_from_slice(&[3.0, 0.0]);
        ps.grad_mut(b).data_mut().copy_from_slice(&[0.0, 4.0]);
        assert!((ps.grad_global_norm() - 5.0).abs() < 1e-12);
        ps.clip_grad_norm(1.0);
        assert!((ps.grad_global_norm() - 1.0).abs() < 1e-12);
        // Under the limit: untouched.
        ps.clip_grad_norm(10.0);
        assert!((ps.grad_global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_resets_exactly() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Array::row(vec![1.0, 1.0]));
        ps.grad_mut(a).data_mut().copy_from_slice(&[0.5, -0.25]);
        ps.zero_grad();
        assert_eq!(ps.grad(a).data(), &[0.0, 0.0]);
    }
}
