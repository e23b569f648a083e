//! Per-channel batch normalization over `(N, D, H, W)`.

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean/variance of a batch-norm layer. Uninitialized stats cannot
/// be used in eval mode; the first training step initializes them with the
/// batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    pub fn uninitialized(channels: usize) -> Result<Self> {
        Ok(Self {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::full(&[channels], T::one())?,
            initialized: false,
        })
    }

    /// Zero mean, unit variance, usable in eval mode immediately.
    pub fn standard(channels: usize) -> Result<Self> {
        Ok(Self {
            initialized: true,
            ..Self::uninitialized(channels)?
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Values saved by a train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Batch normalization. In train mode the output is normalized with the
/// biased batch variance and the running stats move by
/// `running ← (1−momentum)·running + momentum·batch`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm3d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: BnMode,
    epsilon: T,
    momentum: T,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let [n, c, d, h, w] = input.dims5()?;
    if gamma.shape() != [c] || beta.shape() != [c] || running.channels() != c {
        return Err(TensorError::ShapeMismatch(format!(
            "batch norm over {c} channels got gamma {:?}, beta {:?}, running {}",
            gamma.shape(),
            beta.shape(),
            running.channels()
        )));
    }
    let vol = d * h * w;
    let count = T::from_usize(n * vol).expect("count fits");
    let x = input.data();
    let mut out = input.zeros_like();
    match mode {
        BnMode::Eval => {
            if !running.initialized {
                return Err(TensorError::InvalidArgument(
                    "eval-mode batch norm with uninitialized running stats".into(),
                ));
            }
            let o = out.data_mut();
            for ch in 0..c {
                let inv = (running.var.data()[ch] + epsilon).sqrt().recip();
                let mean = running.mean.data()[ch];
                let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                for s in 0..n {
                    let off = (s * c + ch) * vol;
                    for i in off..off + vol {
                        o[i] = g * (x[i] - mean) * inv + b;
                    }
                }
            }
            Ok((out, None))
        }
        BnMode::Train => {
            let mut normalized = input.zeros_like();
            let mut inv_std = Vec::with_capacity(c);
            for ch in 0..c {
                let mut sum = T::zero();
                for s in 0..n {
                    let off = (s * c + ch) * vol;
                    sum += x[off..off + vol].iter().copied().sum();
                }
                let mean = sum / count;
                let mut sq = T::zero();
                for s in 0..n {
                    let off = (s * c + ch) * vol;
                    sq += x[off..off + vol]
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum();
                }
                let var = sq / count;
                let inv = (var + epsilon).sqrt().recip();
                inv_std.push(inv);
                let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                for s in 0..n {
                    let off = (s * c + ch) * vol;
                    let span = off..off + vol;
                    let dst = normalized.data_mut()[span.clone()]
                        .iter_mut()
                        .zip(&mut out.data_mut()[span.clone()]);
                    for ((nv, ov), &xv) in dst.zip(&x[span]) {
                        let xh = (xv - mean) * inv;
                        *nv = xh;
                        *ov = g * xh + b;
                    }
                }
                let (rm, rv) = (
                    &mut running.mean.data_mut()[ch],
                    &mut running.var.data_mut()[ch],
                );
                if running.initialized {
                    *rm = (T::one() - momentum) * *rm + momentum * mean;
                    *rv = (T::one() - momentum) * *rv + momentum * var;
                } else {
                    *rm = mean;
                    *rv = var;
                }
            }
            running.initialized = true;
            Ok((
                out,
                Some(BatchNormCache {
                    normalized,
                    inv_std,
                }),
            ))
        }
    }
}

/// Train-mode backward: returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.expect_same_shape(&cache.normalized, "batchnorm backward")?;
    let [n, c, d, h, w] = grad_out.dims5()?;
    let vol = d * h * w;
    let count = T::from_usize(n * vol).expect("count fits");
    let (go, xh) = (grad_out.data(), cache.normalized.data());
    let mut grad_input = grad_out.zeros_like();
    let mut grad_gamma = Tensor::zeros(&[c])?;
    let mut grad_beta = Tensor::zeros(&[c])?;
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for s in 0..n {
            let off = (s * c + ch) * vol;
            for i in off..off + vol {
                sum_dy += go[i];
                sum_dy_xh += go[i] * xh[i];
            }
        }
        grad_gamma.data_mut()[ch] = sum_dy_xh;
        grad_beta.data_mut()[ch] = sum_dy;
        let scale = gamma.data()[ch] * cache.inv_std[ch] / count;
        let gi = grad_input.data_mut();
        for s in 0..n {
            let off = (s * c + ch) * vol;
            for i in off..off + vol {
                gi[i] = scale * (count * go[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}
