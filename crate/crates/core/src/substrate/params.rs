use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{CignError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which weight-decay group a parameter belongs to: classification (F) or router (H).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    F,
    H,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tag: ParamTag,
    /// Biases are excluded from weight decay.
    pub decays: bool,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

/// Weight-decay coefficients per tag; the optimizer adds `2 * lambda * w`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecayByTag {
    pub f: f64,
    pub h: f64,
}

impl DecayByTag {
    pub fn get(&self, tag: ParamTag) -> f64 {
        match tag {
            ParamTag::F => self.f,
            ParamTag::H => self.h,
        }
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tag: ParamTag,
        decays: bool,
        value: Tensor<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(CignError::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.clone(),
            tag,
            decays,
            grad: Tensor::zeros(shape.clone()),
            momentum: Tensor::zeros(shape),
            value,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Truncated normal (resampled beyond two standard deviations) for weights.
    pub fn init_truncated_normal<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break T::of(z * std);
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape product matches")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != grad.shape() {
            return Err(CignError::shape(
                format!("gradient of {}", p.name),
                format!("{:?}", p.grad.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        p.grad.add_assign(grad);
        Ok(())
    }
}

/// One SGD-with-momentum update; clears the gradient slots afterwards.
///
/// `v <- momentum * v + (grad + 2 * lambda_tag * w)`, `w <- w - lr * v`.
pub fn sgd_step<T: Scalar>(params: &mut ParameterSet<T>, lr: f64, momentum: f64, decay: DecayByTag) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(CignError::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(CignError::Config(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for p in params.iter_mut() {
        let two_lambda = if p.decays { T::of(2.0 * decay.get(p.tag)) } else { T::zero() };
        let w = p.value.data_mut();
        let v = p.momentum.data_mut();
        let g = p.grad.data_mut();
        for i in 0..w.len() {
            v[i] = mu * v[i] + g[i] + two_lambda * w[i];
            w[i] -= lr * v[i];
            g[i] = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(w: f64, g: f64, v: f64) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", ParamTag::F, true, Tensor::scalar(w)).unwrap();
        ps.get_mut(id).grad = Tensor::scalar(g);
        ps.get_mut(id).momentum = Tensor::scalar(v);
        ps
    }

    #[test]
    fn plain_gradient_step() {
        let mut ps = single(1.0, 0.5, 0.0);
        sgd_step(&mut ps, 0.1, 0.0, DecayByTag::default()).unwrap();
        assert!((ps.get(ParamId(0)).value.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(ps.get(ParamId(0)).grad.data()[0], 0.0);
    }

    #[test]
    fn momentum_keeps_moving_without_gradient() {
        let mut ps = single(1.0, 0.0, 2.0);
        sgd_step(&mut ps, 0.1, 0.9, DecayByTag::default()).unwrap();
        assert!((ps.get(ParamId(0)).value.data()[0] - (1.0 - 0.1 * 0.9 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_step_hand_value() {
        let mut ps = single(1.0, 0.0, 0.0);
        sgd_step(&mut ps, 0.025, 0.0, DecayByTag { f: 9e-4, h: 0.0 }).unwrap();
        assert!((ps.get(ParamId(0)).value.data()[0] - 0.999955).abs() < 1e-15);
    }

    #[test]
    fn biases_are_not_decayed() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert("b", ParamTag::H, false, Tensor::scalar(1.0)).unwrap();
        sgd_step(&mut ps, 0.1, 0.0, DecayByTag { f: 0.0, h: 0.5 }).unwrap();
        assert_eq!(ps.get(ParamId(0)).value.data()[0], 1.0);
    }

    #[test]
    fn non_positive_learning_rate_rejected() {
        let mut ps = single(1.0, 0.0, 0.0);
        assert!(matches!(sgd_step(&mut ps, 0.0, 0.9, DecayByTag::default()), Err(CignError::Config(_))));
        assert!(sgd_step(&mut ps, -1.0, 0.9, DecayByTag::default()).is_err());
    }

    #[test]
    fn truncated_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = ParameterSet::<f64>::init_truncated_normal(vec![1000], 0.1, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.2));
        let mean = t.sum() / 1000.0;
        assert!(mean.abs() < 0.02);
    }
}
