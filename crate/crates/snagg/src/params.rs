//! Named parameter sets shared by the encoders, aggregation heads, the LSTM
//! stack and the optimizer. Iteration order is insertion order, which keeps
//! gradient reduction and checkpoint layout deterministic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t.with_requires_grad());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_values(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn clear_grads(&mut self) {
        for t in self.map.values_mut() {
            t.clear_grad();
        }
    }

    /// Scale every accumulated gradient, used to average over a batch.
    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            if let Some(g) = t.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * factor).collect();
                t.clear_grad();
                t.accumulate_grad(&scaled);
            }
        }
    }

    /// Mark a subset of parameters as frozen: they keep their values but stop
    /// receiving gradients and optimizer updates.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, t) in self.map.iter_mut() {
            if name.starts_with(prefix) {
                t.set_requires_grad(false);
            }
        }
    }
}

/// Uniform init in [-bound, bound] from the supplied generator.
pub fn uniform_tensor<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::zeros(&[2]));
        p.insert("a", Tensor::zeros(&[3]));
        let names: Vec<&String> = p.names().collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.total_values(), 5);
    }

    #[test]
    fn freeze_prefix_stops_gradients() {
        let mut p = ParamSet::new();
        p.insert("enc.w", Tensor::zeros(&[2]));
        p.insert("head.w", Tensor::zeros(&[2]));
        p.freeze_prefix("enc.");
        assert!(!p.get("enc.w").unwrap().requires_grad());
        assert!(p.get("head.w").unwrap().requires_grad());
    }
}
