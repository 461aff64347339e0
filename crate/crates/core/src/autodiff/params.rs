//! Named trainable parameters with Adam state.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let n = value.numel();
        Param {
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Parameters in insertion order. Names are unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, p)| (k.as_str(), p))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.all_finite())
    }

    /// Errors unless `self` has the names, order and shapes of `reference`
    /// and internally consistent Adam state.
    pub fn check_layout(&self, reference: &ParamStore) -> Result<()> {
        if self.len() != reference.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, found {}",
                reference.len(),
                self.len()
            )));
        }
        for ((name, p), (want_name, want)) in self.params.iter().zip(&reference.params) {
            let n = want.value.numel();
            let sized = p.value.shape().iter().product::<usize>() == p.value.data().len();
            if name != want_name
                || p.value.shape() != want.value.shape()
                || !sized
                || p.m.len() != n
                || p.v.len() != n
            {
                return Err(Error::contract(format!(
                    "parameter `{name}` does not match `{want_name}` {:?}",
                    want.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Register every parameter as a leaf on `graph`, in store order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params
            .values()
            .map(|p| graph.leaf(p.value.clone()))
            .collect()
    }

    /// Gradients for bound leaves after `graph.backward`, zeros where unreached.
    pub fn collect_grads(&self, graph: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| graph.grad_or_zeros(v)).collect()
    }

    /// One bias-corrected Adam update. `grads` must align with store order.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::contract(format!(
                "adam_step got {} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for ((name, p), g) in self.params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        for (p, g) in self.params.values_mut().zip(grads) {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for (((w, m), v), &gi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
                .zip(g.data())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
