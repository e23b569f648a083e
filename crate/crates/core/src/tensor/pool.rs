//! Non-overlapping 3-D max pooling.

use super::{Result, Scalar, Tensor, TensorError};

/// Pooled values plus, per output element, the flat input index it came from.
#[derive(Debug, Clone)]
pub struct MaxPoolOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Max over disjoint windows. Ties resolve to the lowest flat input index.
pub fn maxpool3d_forward<T: Scalar>(
    input: &Tensor<T>,
    window: [usize; 3],
) -> Result<MaxPoolOutput<T>> {
    let [n, c, d, h, w] = input.dims5()?;
    if window.contains(&0) {
        return Err(TensorError::InvalidArgument(
            "pool window must be >= 1".into(),
        ));
    }
    let [wd, wh, ww] = window;
    if d % wd != 0 || h % wh != 0 || w % ww != 0 {
        return Err(TensorError::ShapeMismatch(format!(
            "spatial extents {:?} not divisible by window {window:?}",
            [d, h, w]
        )));
    }
    let (od, oh, ow) = (d / wd, h / wh, w / ww);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + ((z * wd) * h + y * wh) * w + xo * ww;
                    for a in 0..wd {
                        for b in 0..wh {
                            let row = base + ((z * wd + a) * h + y * wh + b) * w + xo * ww;
                            for idx in row..row + ww {
                                // strict comparison keeps the earliest index on ties;
                                // rows are visited in increasing flat order
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::new(&[n, c, od, oh, ow], out)?,
        argmax,
    })
}

/// Routes each upstream gradient to the input element that won its window.
pub fn maxpool3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "grad_out has {} values, argmax {}",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape)?;
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        if idx >= g.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "argmax index {idx} out of range"
            )));
        }
        g[idx] += v;
    }
    Ok(grad)
}
