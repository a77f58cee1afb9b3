//! Named parameters, gradient accumulation, initialisation and Adam.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Ordered name → tensor map holding every trainable weight of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = F::zero());
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Uniform `±sqrt(6 / fan_in)` (He) initialisation.
pub fn he_uniform<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

/// Uniform `±sqrt(1 / fan_in)` initialisation for projections without a following relu.
pub fn lecun_uniform<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (3.0 / fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    He,
    Lecun,
    Zero,
}

/// Affine map `x·W + b` stored as `{name}.w` (in×out) and `{name}.b` (out).
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub inp: usize,
    pub out: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, inp: usize, out: usize) -> Self {
        Self {
            name: name.into(),
            inp,
            out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R, init: Init) {
        let shape = [self.inp, self.out];
        let w = match init {
            Init::He => he_uniform(rng, &shape, self.inp),
            Init::Lecun => lecun_uniform(rng, &shape, self.inp),
            Init::Zero => Tensor::zeros(&shape),
        };
        store.insert(self.weight_name(), w);
        store.insert(self.bias_name(), Tensor::zeros(&[self.out]));
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight_name())?;
        let b = tape.param(store, &self.bias_name())?;
        tape.linear(x, w, b)
    }
}

/// Sums parameter gradients across per-sample tapes.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator<F> {
    grads: BTreeMap<String, Vec<F>>,
    samples: usize,
}

impl<F: Scalar> GradAccumulator<F> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
            samples: 0,
        }
    }

    /// Adds the gradients of every parameter bound on `tape` (after `backward`).
    pub fn add_tape(&mut self, tape: &Tape<F>) {
        for (name, v) in tape.bindings() {
            if let Some(g) = tape.grad(v) {
                match self.grads.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        self.grads.insert(name.to_string(), g.to_vec());
                    }
                }
            }
        }
        self.samples += 1;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Mean gradient over the accumulated samples.
    pub fn mean(self) -> BTreeMap<String, Vec<F>> {
        let inv = F::of(1.0 / self.samples.max(1) as f64);
        self.grads
            .into_iter()
            .map(|(k, mut g)| {
                g.iter_mut().for_each(|v| *v = *v * inv);
                (k, g)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &BTreeMap<String, Vec<F>>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let epsf = F::of(eps);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                let denom = (*vv * inv_bc2).sqrt() + epsf;
                *pv = *pv - step_size * *mv / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5, -2.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut store, &grads, 0.1);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }
}
