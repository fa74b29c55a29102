//! Named parameters, their gradients, and the Adam optimizer.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Learning-rate group tag.
    pub group: String,
    pub trainable: bool,
    /// Lower bound enforced after every optimizer step.
    pub min: Option<f64>,
    moment1: Vec<T>,
    moment2: Vec<T>,
    steps: u64,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, group: &str) -> Self {
        let n = value.len();
        Param {
            value,
            grad: None,
            group: group.to_string(),
            trainable: true,
            min: None,
            moment1: vec![T::zero(); n],
            moment2: vec![T::zero(); n],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.moment1, &self.moment2)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Insertion-ordered parameter collection. Names are unique and the order
/// is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, param: Param<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::op("param", format!("duplicate parameter {name}")));
        }
        self.params.insert(name.to_string(), param);
        Ok(())
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, group: &str) -> Result<()> {
        self.insert(name, Param::new(value, group))
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::op("param", format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Moves every parameter of `other` into this store.
    pub fn merge(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.params {
            self.insert(&k, v)?;
        }
        Ok(())
    }

    /// Parameters whose group tag is `group`, in order.
    pub fn subset(&self, group: &str) -> ParamStore<T> {
        let params = self
            .params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(k, p)| (k.clone(), p.clone()))
            .collect();
        ParamStore { params }
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Adds the gradients computed on `graph` to the stored ones.
    pub fn accumulate(&mut self, graph: &Graph<T>) {
        for (name, var) in graph.param_vars() {
            let (Some(p), Some(g)) = (self.params.get_mut(name), graph.grad(var)) else {
                continue;
            };
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    /// One bias-corrected Adam step. Groups missing from `lr` or with a zero
    /// rate are left untouched, moments included.
    pub fn adam_step(&mut self, lr: &BTreeMap<String, f64>, adam: Adam) -> Result<()> {
        let (b1, b2) = (T::of(adam.beta1), T::of(adam.beta2));
        let eps = T::of(adam.eps);
        for (name, p) in self.params.iter_mut() {
            let rate = lr.get(&p.group).copied().unwrap_or(0.0);
            if !p.trainable || rate == 0.0 {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                return Err(Error::Optimizer(format!("no gradient for trainable parameter {name}")));
            };
            p.steps += 1;
            let t = p.steps as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let rate = T::of(rate);
            for (((x, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(p.moment1.iter_mut())
                .zip(p.moment2.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *x = *x - rate * mh / (vh.sqrt() + eps);
            }
            if let Some(lo) = p.min {
                let lo = T::of(lo);
                p.value.data_mut().iter_mut().for_each(|x| *x = x.max(lo));
            }
        }
        Ok(())
    }

    /// Copies values (not optimizer state) from `other` for every shared name.
    pub fn load_values(&mut self, other: &ParamStore<T>) {
        for (k, p) in self.params.iter_mut() {
            if let Some(q) = other.params.get(k) {
                if q.value.shape() == p.value.shape() {
                    p.value = q.value.clone();
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let params = self
            .params
            .iter()
            .map(|(k, p)| {
                let mut q = Param::new(p.value.cast::<U>(), &p.group);
                q.trainable = p.trainable;
                q.min = p.min;
                (k.clone(), q)
            })
            .collect();
        ParamStore { params }
    }

    /// True when every value matches `other` bit for bit.
    pub fn bitwise_eq(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn glorot<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.gen_range(-a..a)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rates(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn quadratic_step(store: &mut ParamStore<f64>, lr: &BTreeMap<String, f64>) {
        store.zero_grad();
        let mut g = Graph::<f64>::eval();
        let x = g.param(store, "x").unwrap();
        let y = g.mul(x, x).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        store.accumulate(&g);
        store.adam_step(lr, Adam::default()).unwrap();
    }

    fn descent(lr: f64, steps: usize) -> Vec<f64> {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0), "a").unwrap();
        let lr = rates(&[("a", lr)]);
        (0..steps)
            .map(|_| {
                quadratic_step(&mut store, &lr);
                store.value("x").unwrap().item()
            })
            .collect()
    }

    #[test]
    fn adam_descends_a_parabola() {
        let xs = descent(0.01, 50);
        let mut prev = 1.0f64;
        for x in xs {
            assert!(x.abs() < prev, "{x} !< {prev}");
            prev = x.abs();
        }
    }

    // At lr 0.1 momentum carries x past the minimum on step 12.
    #[test]
    fn adam_overshoots_at_large_rate() {
        let xs = descent(0.1, 50);
        assert!(xs[..11].windows(2).all(|w| w[1].abs() < w[0].abs()));
        assert!(xs[11] < 0.0);
        assert!(xs[49].abs() < 0.1);
    }

    #[test]
    fn zero_gradient_only_decays_moments() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(2.0), "a").unwrap();
        let p = store.get_mut("x").unwrap();
        p.grad = Some(Tensor::scalar(0.0));
        store.adam_step(&rates(&[("a", 0.1)]), Adam::default()).unwrap();
        assert_eq!(store.value("x").unwrap().item(), 2.0);
    }

    #[test]
    fn zero_rate_group_is_bitwise_frozen() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(0.7), "frozen").unwrap();
        store.add("y", Tensor::scalar(0.7), "live").unwrap();
        let before = store.subset("frozen");
        for _ in 0..5 {
            store.zero_grad();
            let mut g = Graph::<f64>::eval();
            let x = g.param(&store, "x").unwrap();
            let y = g.param(&store, "y").unwrap();
            let p = g.mul(x, y).unwrap();
            let l = g.sum_all(p).unwrap();
            g.backward(l).unwrap();
            store.accumulate(&g);
            store.adam_step(&rates(&[("frozen", 0.0), ("live", 0.1)]), Adam::default()).unwrap();
        }
        assert!(store.subset("frozen").bitwise_eq(&before));
        assert_ne!(store.value("y").unwrap().item(), 0.7);
        assert_eq!(store.get("x").unwrap().steps(), 0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::scalar(1.0), "a").unwrap();
        let err = store.adam_step(&rates(&[("a", 0.1)]), Adam::default()).unwrap_err();
        assert!(err.to_string().contains("x"));
    }

    #[test]
    fn lower_bound_is_enforced() {
        let mut store = ParamStore::new();
        let mut p = Param::new(Tensor::scalar(0.001), "a");
        p.min = Some(1e-3);
        store.insert("m", p).unwrap();
        store.get_mut("m").unwrap().grad = Some(Tensor::scalar(100.0));
        store.adam_step(&rates(&[("a", 1.0)]), Adam::default()).unwrap();
        assert_eq!(store.value("m").unwrap().item(), 1e-3);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::scalar(1.0), "a").unwrap();
        assert!(store.add("w", Tensor::scalar(1.0), "a").is_err());
    }
}
