//! Named trainable parameters and the Adam update.

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered collection of parameters. Slot indices are stable for the store's lifetime.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, slot: usize) -> &Param {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Param {
        &mut self.params[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Put parameter `slot` on a graph as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph, slot: usize) -> Var {
        graph.param(slot, self.params[slot].value.clone())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Accumulate the gradients of every parameter leaf on `graph`.
    pub fn collect_grads(&mut self, graph: &Graph, grads: &Gradients) -> Result<()> {
        for (slot, var) in graph.param_vars() {
            let Some(g) = grads.get(var) else { continue };
            let p = &mut self.params[slot];
            match &mut p.grad {
                Some(existing) => existing.add_assign(g)?,
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Hash of every parameter's bits, used to check snapshot identity.
    pub fn fingerprint(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |h, p| h.rotate_left(7) ^ p.value.fingerprint())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter in a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |p: &Param| Tensor::zeros(p.value.shape());
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected update of every parameter; each must hold a gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.t as i32);
        for (slot, p) in params.params.iter_mut().enumerate() {
            let g = p.grad.as_ref().expect("checked above");
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi as f64 / bc1;
                let v_hat = *vi as f64 / bc2;
                *w -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32, grad: f32) -> ParamStore {
        let mut ps = ParamStore::new();
        let s = ps.insert("p", Tensor::scalar(value));
        ps.get_mut(s).grad = Some(Tensor::scalar(grad));
        ps
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [0.37f32, -2.5, 1e-3] {
            let mut ps = single(1.0, g);
            let mut adam = Adam::new(&ps, AdamConfig { lr: 0.01, ..Default::default() });
            adam.step(&mut ps).unwrap();
            let delta = ps.get(0).value.item() - 1.0;
            assert!((delta + 0.01 * g.signum()).abs() < 1e-6, "g={g} delta={delta}");
        }
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut ps = single(0.75, 0.0);
        let mut adam = Adam::new(&ps, AdamConfig::default());
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.get(0).value.item(), 0.75);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut ps = ParamStore::new();
        ps.insert("decoder.fc.w", Tensor::scalar(1.0));
        let mut adam = Adam::new(&ps, AdamConfig::default());
        let err = adam.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("decoder.fc.w"));
    }

    #[test]
    fn step_counter_increases_by_one() {
        let mut ps = single(1.0, 0.5);
        let mut adam = Adam::new(&ps, AdamConfig::default());
        for t in 1..=3 {
            adam.step(&mut ps).unwrap();
            assert_eq!(adam.steps(), t);
        }
    }

    /// Update recurrence for f(p) = p², written out independently in f64.
    fn scalar_adam_oracle(mut p: f64, lr: f64, steps: u32) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn three_steps_on_square_match_scalar_recurrence() {
        let mut ps = ParamStore::new();
        ps.insert("p", Tensor::scalar(1.0));
        let mut adam = Adam::new(&ps, AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..3 {
            let mut g = Graph::new();
            let p = ps.bind(&mut g, 0);
            let sq = g.mul(p, p).unwrap();
            let l = g.sum(sq);
            let grads = g.backward(l).unwrap();
            ps.zero_grads();
            ps.collect_grads(&g, &grads).unwrap();
            adam.step(&mut ps).unwrap();
        }
        let oracle = scalar_adam_oracle(1.0, 0.1, 3);
        assert!((oracle - 0.701_586_272_946_03).abs() < 1e-12);
        // f32 parameter storage: agreement to f32 resolution.
        assert!((ps.get(0).value.item() as f64 - oracle).abs() < 1e-6);
    }
}
