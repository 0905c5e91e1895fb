//! Named parameter storage, per-step tape binding and the Adam optimizer.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Optimizer group a parameter belongs to. Each group has its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Style extractor, encoder and decoder.
    Generator,
    Discriminator,
    /// Content and style patch projection heads.
    Samplers,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Generator, ParamGroup::Discriminator, ParamGroup::Samplers];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Generator => "generator",
            ParamGroup::Discriminator => "discriminator",
            ParamGroup::Samplers => "samplers",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Rc<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), group, value: Rc::new(value) });
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialized weight (fan-in scaling).
    pub fn add_he(
        &mut self,
        rng: &mut impl Rng,
        name: impl Into<String>,
        group: ParamGroup,
        shape: Vec<usize>,
        fan_in: usize,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        self.add_normal(rng, name, group, shape, std)
    }

    pub fn add_normal(
        &mut self,
        rng: &mut impl Rng,
        name: impl Into<String>,
        group: ParamGroup,
        shape: Vec<usize>,
        std: f64,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        self.add(name, group, Tensor::new(shape, data))
    }

    pub fn add_constant(&mut self, name: impl Into<String>, group: ParamGroup, shape: Vec<usize>, v: f64) -> ParamId {
        self.add(name, group, Tensor::full(shape, T::from_f64(v)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(value.shape(), self.params[id.0].value.shape(), "parameter {} shape", self.params[id.0].name);
        self.params[id.0].value = Rc::new(value);
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    /// Total scalar count, optionally restricted to a group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter on `tape`. Parameters of groups for which
    /// `trainable` returns false become constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(ParamGroup) -> bool) -> Binding<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf_shared(p.value.clone(), trainable(p.group)))
            .collect();
        Binding { tape, vars }
    }

    /// Binds everything as constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Binding<'t, T> {
        self.bind(tape, |_| false)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, value: Rc::new(p.value.cast()) })
                .collect(),
        }
    }
}

/// The parameters of a [`ParamStore`] as variables of one tape.
pub struct Binding<'t, T: Scalar> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Binding<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Gradient for every parameter that received one.
    pub fn collect_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| grads.take(*v).map(|g| (ParamId(i), g)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with per-parameter moments and per-group step counters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub(crate) first: Vec<Tensor<T>>,
    pub(crate) second: Vec<Tensor<T>>,
    pub(crate) steps: Vec<u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let first = store.params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let second = store.params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { config, first, second, steps: vec![0; store.len()] }
    }

    /// Applies one update to each parameter in `grads` with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let eps = T::from_f64(self.config.eps);
        for (id, g) in grads {
            let i = id.0;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.config.beta1.powi(t);
            let c2 = 1.0 - self.config.beta2.powi(t);
            let step_size = T::from_f64(lr / c1);
            let c2_sqrt = T::from_f64(c2.sqrt());
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.value_mut(*id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                p[k] -= step_size * m[k] / (v[k].sqrt() / c2_sqrt + eps);
            }
        }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>], &[u64]) {
        (&self.first, &self.second, &self.steps)
    }

    pub fn restore(&mut self, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>, steps: Vec<u64>) {
        assert_eq!(first.len(), self.first.len());
        self.first = first;
        self.second = second;
        self.steps = steps;
    }
}
