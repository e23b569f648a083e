//! Central finite-difference verification of analytic gradients.

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares `analytic[i]` against central differences of the scalar map `f`
/// with respect to each tensor in `inputs`.
///
/// The step for an element `x` is `h = 1e-4·max(1, |x|)`. The per-element
/// error is `|a − n| / max(|a|, |n|, 1e-3·‖n‖∞, 1e-12)`, so entries that are
/// tiny compared with the rest of the tensor are judged on the tensor's
/// scale rather than on their own.
pub fn gradient_check<F>(
    mut f: F,
    inputs: &[(&str, Tensor<f64>)],
    analytic: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    if inputs.len() != analytic.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "{} inputs but {} analytic gradients",
            inputs.len(),
            analytic.len()
        )));
    }
    let mut point: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let base = f(&point);
    if !base.is_finite() {
        return Err(TensorError::NonFinite(
            "forward map at the base point".into(),
        ));
    }
    let mut entries = Vec::with_capacity(inputs.len());
    for (ti, ((name, _), grad)) in inputs.iter().zip(analytic).enumerate() {
        grad.expect_same_shape(&point[ti], name)?;
        let mut numeric = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            let x0 = point[ti].data()[i];
            let h = 1e-4 * x0.abs().max(1.0);
            point[ti].data_mut()[i] = x0 + h;
            let fp = f(&point);
            point[ti].data_mut()[i] = x0 - h;
            let fm = f(&point);
            point[ti].data_mut()[i] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "forward map while perturbing {name}[{i}]"
                )));
            }
            numeric.push((fp - fm) / (2.0 * h));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        let max_rel_error = grad
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max);
        entries.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_error,
            passed: max_rel_error <= tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_fn(&[6], |i| i as f64 * 0.3 - 1.0).unwrap();
        let grad = Tensor::full(&[6], 3.0).unwrap();
        let report = gradient_check(|t| 3.0 * t[0].sum(), &[("x", x)], &[grad], 1e-9).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let x = Tensor::from_fn(&[4], |i| i as f64 + 0.5).unwrap();
        // f = Σ x², true gradient 2x; supply 4x
        let wrong = x.map(|v| 4.0 * v);
        let report = gradient_check(
            |t| t[0].data().iter().map(|v| v * v).sum(),
            &[("x", x)],
            &[wrong],
            1e-5,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.4);
    }

    #[test]
    fn non_finite_forward_rejected() {
        let x = Tensor::full(&[1], 1.0).unwrap();
        let g = x.clone();
        assert!(gradient_check(|_| f64::NAN, &[("x", x)], &[g], 1e-5).is_err());
    }
}
