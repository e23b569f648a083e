//! Trainable parameters and the Adam optimizer.

use super::{Result, Scalar, Tensor, TensorError};

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = value.zeros_like();
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Adds `g` into the accumulated gradient.
    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param: &Parameter<T>, config: AdamConfig) -> Self {
        Self {
            m: param.value.zeros_like(),
            v: param.value.zeros_like(),
            t: 0,
            config,
        }
    }

    pub fn for_params(params: &[&Parameter<T>], config: AdamConfig) -> Vec<Self> {
        params.iter().map(|p| Self::new(p, config)).collect()
    }
}

/// One bias-corrected Adam update of every parameter from its `grad`.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Parameter<T>],
    states: &mut [AdamState<T>],
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    if params.len() != states.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "{} parameters but {} optimizer states",
            params.len(),
            states.len()
        )));
    }
    for (p, s) in params.iter_mut().zip(states.iter_mut()) {
        if s.m.shape() != p.value.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "optimizer state for {} has shape {:?}, parameter {:?}",
                p.name,
                s.m.shape(),
                p.value.shape()
            )));
        }
        s.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = s.config;
        let bc1 = 1.0 - beta1.powi(s.t as i32);
        let bc2 = 1.0 - beta2.powi(s.t as i32);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let (one_b1, one_b2) = (
            T::from_f64_lossy(1.0 - beta1),
            T::from_f64_lossy(1.0 - beta2),
        );
        let (inv_bc1, inv_bc2) = (T::from_f64_lossy(1.0 / bc1), T::from_f64_lossy(1.0 / bc2));
        let (lr_t, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(epsilon));
        let values = p.value.data_mut();
        for (((x, &g), m), v) in values
            .iter_mut()
            .zip(p.grad.data())
            .zip(s.m.data_mut())
            .zip(s.v.data_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            *x -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
