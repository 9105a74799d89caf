//! Flat parameter storage shared by every trainable component, plus the
//! AdamW optimizer that walks it.

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::float::Float;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors addressed by [`ParamId`]. Gradients and optimizer moments
/// use the same layout (see [`ParamStore::zeros_like`]).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.push(name, ArrayD::zeros(IxDyn(shape)))
    }

    /// Truncated normal at ±2σ, the usual transformer initialization.
    pub fn trunc_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break T::of(x);
            }
        });
        self.push(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, T> {
        self.values[id.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("parameter is a matrix")
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, T> {
        self.values[id.0]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("parameter is a matrix")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, T> {
        self.values[id.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("parameter is a vector")
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, T> {
        self.values[id.0]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("parameter is a vector")
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[ArrayD<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.values
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.values {
            v.fill(T::zero());
        }
    }

    /// `self += k * other`; layouts must match.
    pub fn add_scaled(&mut self, other: &Self, k: T) {
        debug_assert_eq!(self.names, other.names);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.scaled_add(k, b);
        }
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(&self.values)
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.as_str())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::of(x.as_f64())))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay applied to every tensor.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: ParamStore<T>,
    v: ParamStore<T>,
    step: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let decay = T::of(1.0 - lr * c.weight_decay);
        let step_size = T::of(lr / bias1);
        let inv_bias2 = T::of(1.0 / bias2);
        let eps = T::of(c.eps);
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(&grads.values)
            .zip(&mut self.m.values)
            .zip(&mut self.v.values)
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *p *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v * inv_bias2).sqrt() + eps);
            });
        }
    }
}
