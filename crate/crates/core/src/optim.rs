//! Named parameter storage with adaptive-moment optimizer state.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    first_moment: Tensor<T>,
    second_moment: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn first_moment(&self) -> &Tensor<T> {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor<T> {
        &self.second_moment
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
    step: u64,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: None,
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Adds `scale * grad` into each parameter's accumulator.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * x;
                    }
                }
                None => {
                    let mut t = g.clone();
                    if scale != T::one() {
                        t.data_mut().iter_mut().for_each(|x| *x *= scale);
                    }
                    p.grad = Some(t);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Squared L2 norm of all accumulated gradients.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()))
            .sum()
    }

    /// Zeroes both moment estimates and the shared step counter. Weights are untouched.
    pub fn reset_optimizer_state(&mut self) {
        for p in &mut self.params {
            p.first_moment.data_mut().iter_mut().for_each(|x| *x = T::zero());
            p.second_moment.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        self.step = 0;
    }

    pub fn moments_are_zero(&self) -> bool {
        self.step == 0
            && self.params.iter().all(|p| {
                p.first_moment.data().iter().all(|x| x.is_zero())
                    && p.second_moment.data().iter().all(|x| x.is_zero())
            })
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    first_moment: p.first_moment.cast(),
                    second_moment: p.second_moment.cast(),
                })
                .collect(),
            index: self.index.clone(),
            step: self.step,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Applies one bias-corrected update from the accumulated gradients, then clears them.
    pub fn step<T: Real>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::State(format!("parameter {} has no gradient", p.name)));
        }
        if store
            .params
            .iter()
            .any(|p| !p.grad.as_ref().is_some_and(Tensor::is_finite))
        {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in &mut store.params {
            let grad = p.grad.take().expect("checked above");
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let mut g = grad.data()[i].as_f64();
                if self.weight_decay != 0.0 {
                    g += self.weight_decay * w[i].as_f64();
                }
                let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                w[i] = T::from_f64(w[i].as_f64() - update);
            }
        }
        Ok(())
    }
}
