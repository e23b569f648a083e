//! Soft Dice loss over a chosen set of channels.

use super::{Result, Scalar, Tensor, TensorError};

/// Soft Dice loss configuration.
///
/// For each scored channel `c`, with sums taken over the batch and all
/// voxels: `dice_c = (2·Σp·g + s) / (Σp + Σg + s)`. The loss is
/// `1 − mean_c dice_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceLoss {
    pub classes: Vec<usize>,
    pub smoothing: f64,
}

impl DiceLoss {
    pub const DEFAULT_SMOOTHING: f64 = 1e-6;

    pub fn new(classes: Vec<usize>) -> Self {
        Self {
            classes,
            smoothing: Self::DEFAULT_SMOOTHING,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiceOutput<T: Scalar> {
    pub loss: f64,
    /// Soft Dice per scored class, in the order of `DiceLoss::classes`.
    pub per_class: Vec<f64>,
    pub grad: Tensor<T>,
}

/// Loss value and its analytic gradient with respect to `probs`. Channels not
/// listed in `cfg.classes` receive zero gradient.
pub fn dice_loss<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &DiceLoss,
) -> Result<DiceOutput<T>> {
    probs.expect_same_shape(target, "dice loss")?;
    let [n, c, d, h, w] = probs.dims5()?;
    if cfg.classes.is_empty() {
        return Err(TensorError::InvalidArgument(
            "dice loss needs at least one class".into(),
        ));
    }
    if let Some(&bad) = cfg.classes.iter().find(|&&k| k >= c) {
        return Err(TensorError::InvalidArgument(format!(
            "class {bad} out of range for {c} channels"
        )));
    }
    if !(cfg.smoothing > 0.0) {
        return Err(TensorError::InvalidArgument("smoothing must be > 0".into()));
    }
    let vol = d * h * w;
    let (p, g) = (probs.data(), target.data());
    let s = cfg.smoothing;
    let weight = -1.0 / cfg.classes.len() as f64;
    let mut grad = probs.zeros_like();
    let mut per_class = Vec::with_capacity(cfg.classes.len());
    for &k in &cfg.classes {
        let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + k) * vol;
            for i in off..off + vol {
                let (pv, gv) = (p[i].to_f64_lossy(), g[i].to_f64_lossy());
                inter += pv * gv;
                sp += pv;
                sg += gv;
            }
        }
        let num = 2.0 * inter + s;
        let den = sp + sg + s;
        per_class.push(num / den);
        // d(dice)/dp_i = (2 g_i · den − num) / den²
        let inv_den2 = 1.0 / (den * den);
        for b in 0..n {
            let off = (b * c + k) * vol;
            let span = off..off + vol;
            for (d, gv) in grad.data_mut()[span.clone()].iter_mut().zip(&g[span]) {
                *d = T::from_f64_lossy(weight * (2.0 * gv.to_f64_lossy() * den - num) * inv_den2);
            }
        }
    }
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    let loss = 1.0 - mean;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite("dice loss".into()));
    }
    Ok(DiceOutput {
        loss,
        per_class,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let t = Tensor::<f64>::from_fn(&[1, 2, 1, 2, 2], |i| {
            if (i % 4 < 2) == (i < 4) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let out = dice_loss(&t, &t, &DiceLoss::new(vec![0, 1])).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn half_probabilities_over_half_target() {
        // 8 voxels at p = 0.5, 4 target voxels: 2·2 / (4 + 4) = 0.5
        let p = Tensor::<f64>::full(&[1, 1, 1, 2, 4], 0.5).unwrap();
        let g = Tensor::from_fn(&[1, 1, 1, 2, 4], |i| if i < 4 { 1.0 } else { 0.0 }).unwrap();
        let out = dice_loss(&p, &g, &DiceLoss::new(vec![0])).unwrap();
        assert!((out.per_class[0] - 0.5).abs() < 1e-6);
        assert!((out.loss - 0.5).abs() < 1e-6);
    }

    #[test]
    fn unscored_channels_get_no_gradient() {
        let p = Tensor::<f64>::full(&[1, 3, 1, 1, 2], 0.3).unwrap();
        let g = Tensor::from_fn(&[1, 3, 1, 1, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 }).unwrap();
        let out = dice_loss(&p, &g, &DiceLoss::new(vec![1, 2])).unwrap();
        assert!(out.grad.data()[..2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_class_set_rejected() {
        let p = Tensor::<f64>::full(&[1, 1, 1, 1, 1], 0.3).unwrap();
        assert!(dice_loss(&p, &p, &DiceLoss::new(vec![])).is_err());
    }
}
