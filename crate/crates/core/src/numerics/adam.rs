use super::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step_count: 0,
        }
    }
}

/// A trainable tensor with its gradient accumulator and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam: AdamState,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            adam: AdamState::new(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(self.value.shape());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Bias-corrected Adam update on every parameter, then zeroes the gradients.
///
/// All gradients are checked before any value is touched, so a non-finite
/// gradient leaves every parameter unchanged.
pub fn adam_step(params: &mut [&mut Parameter], lr: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    for p in params.iter_mut() {
        let state = &mut p.adam;
        state.step_count += 1;
        let t = state.step_count as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        let grads = p.grad.data();
        let values = p.value.data_mut();
        let m = state.m.data_mut();
        let v = state.v.data_mut();
        for i in 0..grads.len() {
            let g = grads[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
        p.zero_grad();
    }
    Ok(())
}

/// Plain gradient descent, used by the FedAvg clients.
pub fn sgd_step(params: &mut [&mut Parameter], lr: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    for p in params.iter_mut() {
        let (values, grads) = (p.value.data_mut(), p.grad.data());
        for (w, g) in values.iter_mut().zip(grads) {
            *w -= lr * g;
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64) -> Parameter {
        Parameter::new("w", Tensor::from_vec(&[1], vec![value]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_values_unchanged() {
        let mut p = Parameter::new("w", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        for _ in 0..10 {
            adam_step(&mut [&mut p], 0.001).unwrap();
        }
        assert_eq!(p.value.data(), &[0.5, -1.0, 2.0]);
        assert_eq!(p.adam.step_count, 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(1.0);
        p.grad.data_mut()[0] = 1.0;
        adam_step(&mut [&mut p], 0.001).unwrap();
        // m_hat / sqrt(v_hat) == 1 on the first step.
        assert!((p.value.data()[0] - 0.999).abs() < 1e-9);
        assert_eq!(p.grad.data()[0], 0.0);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut p = scalar(0.0);
        let mut prev = p.value.data()[0];
        for _ in 0..2 {
            p.grad.data_mut()[0] = 0.3;
            adam_step(&mut [&mut p], 0.01).unwrap();
            assert!(p.value.data()[0] < prev);
            prev = p.value.data()[0];
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut a = scalar(1.0);
        let mut b = Parameter::new("decoder.bias", Tensor::zeros(&[2]));
        b.grad.data_mut()[1] = f64::NAN;
        a.grad.data_mut()[0] = 1.0;
        let err = adam_step(&mut [&mut a, &mut b], 0.1).unwrap_err();
        assert!(err.to_string().contains("decoder.bias"));
        assert_eq!(a.value.data()[0], 1.0, "no partial update");
    }
}
