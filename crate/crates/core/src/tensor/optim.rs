use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Named trainable tensors plus their AdamW moment estimates.
///
/// Iteration order is the lexicographic order of names, which keeps
/// checkpoints and updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Replaces any existing entry of the same name and
    /// resets its optimizer state.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        let name = name.into();
        t.set_requires_grad(true);
        t.zero_grad();
        self.moments.insert(
            name.clone(),
            Moments {
                first: vec![0.0; t.len()],
                second: vec![0.0; t.len()],
            },
        );
        self.params.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }
}

/// Hyper-parameters of the decoupled-weight-decay Adam update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-5,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl AdamW {
    /// One update of every parameter. Fails before touching anything if a
    /// parameter has no gradient.
    pub fn step(&self, ps: &mut ParameterSet) -> Result<()> {
        if let Some((name, _)) = ps.params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::contract(format!("parameter `{name}` has no gradient")));
        }
        ps.step += 1;
        let t = ps.step as i32;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (name, p) in ps.params.iter_mut() {
            let m = ps.moments.get_mut(name).expect("moments track params");
            let grad = p.grad().expect("checked above").to_vec();
            for (i, theta) in p.values_mut().iter_mut().enumerate() {
                let g = grad[i];
                m.first[i] = b1 * m.first[i] + (1.0 - b1) * g;
                m.second[i] = b2 * m.second[i] + (1.0 - b2) * g * g;
                let mhat = m.first[i] / bc1;
                let vhat = m.second[i] / bc2;
                *theta *= decay;
                *theta -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamW::step`].
pub fn adamw_step(
    ps: &mut ParameterSet,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    AdamW {
        lr,
        weight_decay,
        betas,
        eps,
    }
    .step(ps)
}
