use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Vec<F>,
    pub first_moment: Vec<F>,
    pub second_moment: Vec<F>,
}

impl<F: Real> Parameter<F> {
    fn new(name: String, value: Tensor<F>) -> Self {
        let n = value.numel();
        Self {
            name,
            value,
            grad: vec![F::zero(); n],
            first_moment: vec![F::zero(); n],
            second_moment: vec![F::zero(); n],
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<F>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn grad_norm(&self) -> F {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .fold(F::zero(), |acc, &g| acc + g * g)
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: F) -> F {
        let norm = self.grad_norm();
        if norm > max_norm && norm > F::zero() {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g = *g * s);
            }
        }
        norm
    }

    /// Copies values of every parameter of `other` whose name exists here.
    /// Shapes must match.
    pub fn copy_values_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for src in other.iter() {
            if let Some(&i) = self.by_name.get(&src.name) {
                let dst = &mut self.params[i];
                if dst.value.shape() != src.value.shape() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "copy_values_from",
                        detail: format!(
                            "{}: {:?} vs {:?}",
                            src.name,
                            dst.value.shape(),
                            src.value.shape()
                        ),
                    });
                }
                dst.value = src.value.clone();
            }
        }
        Ok(())
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, Copy)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: F) -> Self {
        Self {
            lr,
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            weight_decay: F::zero(),
        }
    }

    /// Applies one update using the gradients stored in `params`. `step` is
    /// 1-based and drives bias correction.
    pub fn step(&self, params: &mut ParamStore<F>, step: u64) -> Result<()> {
        if step == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "adam_step",
                detail: "step must be >= 1".into(),
            });
        }
        let t = step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for p in params.iter_mut() {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                let m = self.beta1 * p.first_moment[i] + (F::one() - self.beta1) * g;
                let v = self.beta2 * p.second_moment[i] + (F::one() - self.beta2) * g * g;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let mut x = data[i];
                if self.weight_decay > F::zero() {
                    x = x - self.lr * self.weight_decay * x;
                }
                data[i] = x - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
