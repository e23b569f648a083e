//! 3-D convolution and transposed convolution.
//!
//! Stride-1 same-padded convolutions use a register-blocked direct kernel;
//! every other case goes through im2col + GEMM.
//!
//! Weights follow the usual layouts: `[Cout, Cin, kd, kh, kw]` for the
//! convolution and `[Cin, Cout, kd, kh, kw]` for the transposed convolution,
//! so a convolution weight reinterpreted as a transposed-convolution weight
//! gives the exact adjoint operator.
//!
//! Samples of a batch are processed in parallel. Weight and bias gradients
//! are produced per sample and summed in batch order afterwards, so results
//! do not depend on the number of worker threads.

use rayon::prelude::*;

use super::direct;
use super::{Result, Scalar, Tensor, TensorError};

/// Spatial padding mode of [`conv3d_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Pad `k/2` zeros on each side; requires odd kernels. With stride 1 the
    /// output has the input's spatial extents.
    #[default]
    Same,
    /// No padding.
    Valid,
}

/// Gradients of a (transposed) convolution with respect to its operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub grad_input: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel_volume()
    }

    /// 1×1×1 kernels with unit stride read the input directly as the column
    /// matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    /// Stride-1 same-padded kernels that the register-blocked path handles.
    fn direct_shape(&self) -> Option<direct::Shape> {
        let same = self.pad == [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2];
        let odd = self.kernel.iter().all(|k| k % 2 == 1);
        (!self.is_pointwise()
            && self.stride == [1, 1, 1]
            && same
            && odd
            && matches!(self.kernel[2], 1 | 3))
        .then_some(direct::Shape {
            cin: self.cin,
            cout: self.cout,
            spatial: self.input,
            kernel: self.kernel,
        })
    }
}

fn conv_geometry(
    input: &[usize],
    weight: &[usize],
    stride: [usize; 3],
    padding: Padding,
) -> Result<Geometry> {
    let [n, cin, d, h, w]: [usize; 5] = input.try_into().map_err(|_| {
        TensorError::ShapeMismatch(format!("conv input must be rank 5, got {input:?}"))
    })?;
    let [cout, wcin, kd, kh, kw]: [usize; 5] = weight.try_into().map_err(|_| {
        TensorError::ShapeMismatch(format!("conv weight must be rank 5, got {weight:?}"))
    })?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch(format!(
            "input has {cin} channels but weight expects {wcin}"
        )));
    }
    if stride.contains(&0) {
        return Err(TensorError::InvalidArgument("stride must be >= 1".into()));
    }
    let kernel = [kd, kh, kw];
    let pad = match padding {
        Padding::Same => {
            if kernel.iter().any(|k| k % 2 == 0) {
                return Err(TensorError::InvalidArgument(format!(
                    "same padding needs odd kernel extents, got {kernel:?}"
                )));
            }
            [kd / 2, kh / 2, kw / 2]
        }
        Padding::Valid => [0, 0, 0],
    };
    let spatial = [d, h, w];
    let mut output = [0; 3];
    for i in 0..3 {
        let padded = spatial[i] + 2 * pad[i];
        if padded < kernel[i] {
            return Err(TensorError::ShapeMismatch(format!(
                "kernel {kernel:?} larger than padded input {spatial:?}"
            )));
        }
        output[i] = (padded - kernel[i]) / stride[i] + 1;
    }
    Ok(Geometry {
        n,
        cin,
        cout,
        input: spatial,
        kernel,
        stride,
        pad,
        output,
    })
}

/// Source index along one axis, or `None` when it falls into the padding.
#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

/// Range of output x positions whose source column lies inside the input.
#[inline]
fn valid_x_range(g: &Geometry, kx: usize) -> (usize, usize) {
    let (sw, pw, iw, ow) = (g.stride[2], g.pad[2], g.input[2], g.output[2]);
    // x*sw + kx - pw >= 0  and  x*sw + kx - pw < iw
    let lo = if kx >= pw { 0 } else { (pw - kx).div_ceil(sw) };
    let hi_excl = if iw + pw > kx {
        ((iw + pw - kx - 1) / sw + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let p = g.out_volume();
    let mut row = 0;
    for ci in 0..g.cin {
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi) = valid_x_range(g, c);
                    for z in 0..od {
                        let zi = source(z, a, g.stride[0], g.pad[0], id);
                        for y in 0..oh {
                            let seg = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let yi = source(y, b, g.stride[1], g.pad[1], ih);
                            let (Some(zi), Some(yi)) = (zi, yi) else {
                                seg.fill(T::zero());
                                continue;
                            };
                            let src = &x[((ci * id + zi) * ih + yi) * iw..][..iw];
                            seg[..lo].fill(T::zero());
                            seg[hi..].fill(T::zero());
                            if g.stride[2] == 1 {
                                let start = lo + c - g.pad[2];
                                seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                            } else {
                                for (xo, v) in seg[lo..hi].iter_mut().enumerate() {
                                    *v = src[(xo + lo) * g.stride[2] + c - g.pad[2]];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, col: &[T], x: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let p = g.out_volume();
    let mut row = 0;
    for ci in 0..g.cin {
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let src_rows = &col[row * p..(row + 1) * p];
                    let (lo, hi) = valid_x_range(g, c);
                    for z in 0..od {
                        let Some(zi) = source(z, a, g.stride[0], g.pad[0], id) else {
                            continue;
                        };
                        for y in 0..oh {
                            let Some(yi) = source(y, b, g.stride[1], g.pad[1], ih) else {
                                continue;
                            };
                            let seg = &src_rows[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let dst = &mut x[((ci * id + zi) * ih + yi) * iw..][..iw];
                            for (xo, &v) in seg[lo..hi].iter().enumerate() {
                                dst[(xo + lo) * g.stride[2] + c - g.pad[2]] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(TensorError::ShapeMismatch(format!(
            "bias shape {:?}, expected [{channels}]",
            bias.shape()
        )));
    }
    Ok(())
}

/// Direct 3-D cross-correlation plus bias.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: [usize; 3],
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input.shape(), weight.shape(), stride, padding)?;
    check_bias(bias, g.cout)?;
    let (k, p, inv) = (g.col_rows(), g.out_volume(), g.in_volume());
    let [od, oh, ow] = g.output;
    let mut out = Tensor::zeros(&[g.n, g.cout, od, oh, ow])?;
    let w = weight.data();
    let b = bias.data();
    out.data_mut()
        .par_chunks_mut(g.cout * p)
        .zip(input.data().par_chunks(g.cin * inv))
        .for_each(|(o, x)| {
            if let Some(s) = g.direct_shape() {
                direct::forward(x, w, Some(b), &s, o);
                return;
            }
            let scratch;
            let col: &[T] = if g.is_pointwise() {
                x
            } else {
                let mut buf = vec![T::zero(); k * p];
                im2col(&g, x, &mut buf);
                scratch = buf;
                &scratch
            };
            T::gemm(
                g.cout,
                k,
                p,
                w,
                k as isize,
                1,
                col,
                p as isize,
                1,
                T::zero(),
                o,
                p as isize,
                1,
            );
            for (row, &bv) in o.chunks_mut(p).zip(b) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        });
    Ok(out)
}

/// Gradients of [`conv3d_forward`] given the upstream gradient and the saved
/// forward input.
pub fn conv3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: [usize; 3],
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input.shape(), weight.shape(), stride, padding)?;
    let [od, oh, ow] = g.output;
    if grad_out.shape() != [g.n, g.cout, od, oh, ow] {
        return Err(TensorError::ShapeMismatch(format!(
            "grad_out {:?} does not match forward output {:?}",
            grad_out.shape(),
            [g.n, g.cout, od, oh, ow]
        )));
    }
    let (k, p, inv) = (g.col_rows(), g.out_volume(), g.in_volume());
    let w = weight.data();
    let mut grad_input = input.zeros_like();
    let per_sample: Vec<(Vec<T>, Vec<T>)> = grad_input
        .data_mut()
        .par_chunks_mut(g.cin * inv)
        .zip(input.data().par_chunks(g.cin * inv))
        .zip(grad_out.data().par_chunks(g.cout * p))
        .map(|((gx, x), go)| {
            let mut gw = vec![T::zero(); g.cout * k];
            let gb: Vec<T> = go.chunks(p).map(|r| r.iter().copied().sum()).collect();
            if let Some(s) = g.direct_shape() {
                direct::backward_weight(x, go, &s, &mut gw);
                direct::backward_input(go, w, &s, gx);
            } else if g.is_pointwise() {
                // gw = go · xᵀ ; gx = wᵀ · go
                T::gemm(
                    g.cout,
                    p,
                    k,
                    go,
                    p as isize,
                    1,
                    x,
                    1,
                    p as isize,
                    T::zero(),
                    &mut gw,
                    k as isize,
                    1,
                );
                T::gemm(
                    k,
                    g.cout,
                    p,
                    w,
                    1,
                    k as isize,
                    go,
                    p as isize,
                    1,
                    T::zero(),
                    gx,
                    p as isize,
                    1,
                );
            } else {
                let mut col = vec![T::zero(); k * p];
                im2col(&g, x, &mut col);
                T::gemm(
                    g.cout,
                    p,
                    k,
                    go,
                    p as isize,
                    1,
                    &col,
                    1,
                    p as isize,
                    T::zero(),
                    &mut gw,
                    k as isize,
                    1,
                );
                T::gemm(
                    k,
                    g.cout,
                    p,
                    w,
                    1,
                    k as isize,
                    go,
                    p as isize,
                    1,
                    T::zero(),
                    &mut col,
                    p as isize,
                    1,
                );
                col2im(&g, &col, gx);
            }
            (gw, gb)
        })
        .collect();
    let mut grad_weight = weight.zeros_like();
    let mut grad_bias = Tensor::zeros(&[g.cout])?;
    for (gw, gb) in &per_sample {
        for (a, &b) in grad_weight.data_mut().iter_mut().zip(gw) {
            *a += b;
        }
        for (a, &b) in grad_bias.data_mut().iter_mut().zip(gb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        grad_input,
        grad_weight,
        grad_bias,
    })
}

struct TransposeGeometry {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    stride: [usize; 3],
}

impl TransposeGeometry {
    fn output(&self) -> [usize; 3] {
        [
            self.input[0] * self.stride[0],
            self.input[1] * self.stride[1],
            self.input[2] * self.stride[2],
        ]
    }

    fn kernel_volume(&self) -> usize {
        self.stride.iter().product()
    }
}

fn transpose_geometry(
    input: &[usize],
    weight: &[usize],
    stride: [usize; 3],
) -> Result<TransposeGeometry> {
    let [n, cin, d, h, w]: [usize; 5] = input.try_into().map_err(|_| {
        TensorError::ShapeMismatch(format!(
            "transposed conv input must be rank 5, got {input:?}"
        ))
    })?;
    let [wcin, cout, kd, kh, kw]: [usize; 5] = weight.try_into().map_err(|_| {
        TensorError::ShapeMismatch(format!(
            "transposed conv weight must be rank 5, got {weight:?}"
        ))
    })?;
    if stride.iter().any(|s| !(1..=2).contains(s)) {
        return Err(TensorError::InvalidArgument(format!(
            "transposed conv stride must be 1 or 2 per axis, got {stride:?}"
        )));
    }
    if [kd, kh, kw] != stride {
        return Err(TensorError::InvalidArgument(format!(
            "transposed conv kernel {:?} must equal stride {stride:?}",
            [kd, kh, kw]
        )));
    }
    if wcin != cin {
        return Err(TensorError::ShapeMismatch(format!(
            "input has {cin} channels but weight expects {wcin}"
        )));
    }
    Ok(TransposeGeometry {
        n,
        cin,
        cout,
        input: [d, h, w],
        stride,
    })
}

/// Visits every (column row, source position, output position) triple of the
/// non-overlapping scatter performed by the transposed convolution.
fn for_each_scatter(g: &TransposeGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let [id, ih, iw] = g.input;
    let [sd, sh, sw] = g.stride;
    let [_, oh, ow] = g.output();
    let pin = id * ih * iw;
    let ovol: usize = g.output().iter().product();
    for co in 0..g.cout {
        for a in 0..sd {
            for b in 0..sh {
                for c in 0..sw {
                    let row = co * g.kernel_volume() + (a * sh + b) * sw + c;
                    for z in 0..id {
                        for y in 0..ih {
                            let src = (z * ih + y) * iw;
                            let dst = co * ovol + ((z * sd + a) * oh + y * sh + b) * ow + c;
                            for x in 0..iw {
                                f(row * pin + src + x, dst + x * sw, co);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution with kernel equal to stride (non-overlapping
/// upsampling). Output extents are input extents times stride.
pub fn conv3d_transpose_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let g = transpose_geometry(input.shape(), weight.shape(), stride)?;
    check_bias(bias, g.cout)?;
    let kv = g.kernel_volume();
    let pin: usize = g.input.iter().product();
    let [od, oh, ow] = g.output();
    let ovol = od * oh * ow;
    let mut out = Tensor::zeros(&[g.n, g.cout, od, oh, ow])?;
    let (w, b) = (weight.data(), bias.data());
    let rows = g.cout * kv;
    out.data_mut()
        .par_chunks_mut(g.cout * ovol)
        .zip(input.data().par_chunks(g.cin * pin))
        .for_each(|(o, x)| {
            let mut cols = vec![T::zero(); rows * pin];
            T::gemm(
                rows,
                g.cin,
                pin,
                w,
                1,
                rows as isize,
                x,
                pin as isize,
                1,
                T::zero(),
                &mut cols,
                pin as isize,
                1,
            );
            for_each_scatter(&g, |src, dst, co| o[dst] = cols[src] + b[co]);
        });
    Ok(out)
}

/// Gradients of [`conv3d_transpose_forward`].
pub fn conv3d_transpose_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: [usize; 3],
) -> Result<ConvGrads<T>> {
    let g = transpose_geometry(input.shape(), weight.shape(), stride)?;
    let [od, oh, ow] = g.output();
    if grad_out.shape() != [g.n, g.cout, od, oh, ow] {
        return Err(TensorError::ShapeMismatch(format!(
            "grad_out {:?} does not match forward output {:?}",
            grad_out.shape(),
            [g.n, g.cout, od, oh, ow]
        )));
    }
    let kv = g.kernel_volume();
    let pin: usize = g.input.iter().product();
    let ovol = od * oh * ow;
    let rows = g.cout * kv;
    let w = weight.data();
    let mut grad_input = input.zeros_like();
    let per_sample: Vec<(Vec<T>, Vec<T>)> = grad_input
        .data_mut()
        .par_chunks_mut(g.cin * pin)
        .zip(input.data().par_chunks(g.cin * pin))
        .zip(grad_out.data().par_chunks(g.cout * ovol))
        .map(|((gx, x), go)| {
            let mut gcols = vec![T::zero(); rows * pin];
            for_each_scatter(&g, |src, dst, _| gcols[src] = go[dst]);
            // gx = W · gcols ; gW = x · gcolsᵀ
            T::gemm(
                g.cin,
                rows,
                pin,
                w,
                rows as isize,
                1,
                &gcols,
                pin as isize,
                1,
                T::zero(),
                gx,
                pin as isize,
                1,
            );
            let mut gw = vec![T::zero(); g.cin * rows];
            T::gemm(
                g.cin,
                pin,
                rows,
                x,
                pin as isize,
                1,
                &gcols,
                1,
                pin as isize,
                T::zero(),
                &mut gw,
                rows as isize,
                1,
            );
            let gb = go.chunks(ovol).map(|r| r.iter().copied().sum()).collect();
            (gw, gb)
        })
        .collect();
    let mut grad_weight = weight.zeros_like();
    let mut grad_bias = Tensor::zeros(&[g.cout])?;
    for (gw, gb) in &per_sample {
        for (a, &b) in grad_weight.data_mut().iter_mut().zip(gw) {
            *a += b;
        }
        for (a, &b) in grad_bias.data_mut().iter_mut().zip(gb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        grad_input,
        grad_weight,
        grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive 7-loop convolution used as the reference.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: [usize; 3],
        padding: Padding,
    ) -> Tensor<f64> {
        let g = conv_geometry(x.shape(), w.shape(), stride, padding).unwrap();
        let [od, oh, ow] = g.output;
        let [id, ih, iw] = g.input;
        let [kd, kh, kw] = g.kernel;
        Tensor::from_fn(&[g.n, g.cout, od, oh, ow], |flat| {
            let xo = flat % ow;
            let yo = (flat / ow) % oh;
            let zo = (flat / (ow * oh)) % od;
            let co = (flat / (ow * oh * od)) % g.cout;
            let n = flat / (ow * oh * od * g.cout);
            let mut acc = b.data()[co];
            for ci in 0..g.cin {
                for a in 0..kd {
                    for bb in 0..kh {
                        for c in 0..kw {
                            let (Some(z), Some(y), Some(xx)) = (
                                source(zo, a, stride[0], g.pad[0], id),
                                source(yo, bb, stride[1], g.pad[1], ih),
                                source(xo, c, stride[2], g.pad[2], iw),
                            ) else {
                                continue;
                            };
                            acc += w.data()[(((co * g.cin + ci) * kd + a) * kh + bb) * kw + c]
                                * x.data()[(((n * g.cin + ci) * id + z) * ih + y) * iw + xx];
                        }
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
        .unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2, 2], 3.0).unwrap();
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv3d_forward(&x, &w, &b, [1, 1, 1], Padding::Same).unwrap();
        assert_eq!(y, x);
        let grads = conv3d_backward(&y, &x, &w, [1, 1, 1], Padding::Same).unwrap();
        assert_eq!(grads.grad_input, y);
    }

    #[test]
    fn all_ones_3x3_center_is_total_sum() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 1, 3, 3], |i| (i + 1) as f64).unwrap();
        let w = Tensor::full(&[1, 1, 1, 3, 3], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv3d_forward(&x, &w, &b, [1, 1, 1], Padding::Same).unwrap();
        // direct summation: corner sees 1+2+4+5, center sees everything
        assert_eq!(y.data()[4], 45.0);
        assert_eq!(y.data()[0], 12.0);
    }

    #[test]
    fn zero_weight_yields_bias() {
        let x = pseudo(&[2, 3, 2, 3, 4], 1);
        let w = Tensor::zeros(&[2, 3, 3, 3, 3]).unwrap();
        let b = Tensor::new(&[2], vec![0.25, -1.5]).unwrap();
        let y = conv3d_forward(&x, &w, &b, [1, 1, 1], Padding::Same).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let c = (i / 24) % 2;
            assert_eq!(*v, b.data()[c]);
        }
    }

    #[test]
    fn matches_naive_reference_for_strides_and_padding() {
        for (stride, padding, k) in [
            ([1, 1, 1], Padding::Same, [3, 3, 3]),
            ([1, 2, 2], Padding::Same, [1, 3, 3]),
            ([2, 2, 1], Padding::Valid, [2, 2, 1]),
            ([1, 1, 1], Padding::Valid, [2, 3, 1]),
            ([1, 1, 1], Padding::Same, [1, 1, 1]),
        ] {
            let x = pseudo(&[2, 2, 4, 5, 6], 7);
            let w = pseudo(&[3, 2, k[0], k[1], k[2]], 9);
            let b = pseudo(&[3], 11);
            let fast = conv3d_forward(&x, &w, &b, stride, padding).unwrap();
            let slow = naive_conv(&x, &w, &b, stride, padding);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{stride:?} {padding:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_matches_naive_adjoint() {
        for (k, w_extent, cout) in [([3, 3, 3], 5, 3), ([3, 3, 1], 18, 9), ([1, 3, 3], 17, 2)] {
            let x = pseudo(&[2, 2, 3, 4, w_extent], 31);
            let w = pseudo(&[cout, 2, k[0], k[1], k[2]], 32);
            let zero_b = Tensor::zeros(&[cout]).unwrap();
            let go = pseudo(&[2, cout, 3, 4, w_extent], 33);
            let grads = conv3d_backward(&go, &x, &w, [1, 1, 1], Padding::Same).unwrap();
            // ⟨conv(x), go⟩ is linear in x and in w separately
            let pair = |xx: &Tensor<f64>, ww: &Tensor<f64>| {
                naive_conv(xx, ww, &zero_b, [1, 1, 1], Padding::Same)
                    .dot(&go)
                    .unwrap()
            };
            for i in 0..x.len() {
                let mut e = x.zeros_like();
                e.data_mut()[i] = 1.0;
                assert!((grads.grad_input.data()[i] - pair(&e, &w)).abs() < 1e-10);
            }
            for i in 0..w.len() {
                let mut e = w.zeros_like();
                e.data_mut()[i] = 1.0;
                assert!((grads.grad_weight.data()[i] - pair(&x, &e)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bias_gradient_is_channel_sum() {
        let x = pseudo(&[2, 1, 2, 3, 3], 3);
        let w = pseudo(&[2, 1, 3, 3, 3], 4);
        let go = pseudo(&[2, 2, 2, 3, 3], 5);
        let grads = conv3d_backward(&go, &x, &w, [1, 1, 1], Padding::Same).unwrap();
        for c in 0..2 {
            let expected: f64 = (0..2)
                .flat_map(|n| go.data()[(n * 2 + c) * 18..(n * 2 + c + 1) * 18].iter())
                .sum();
            assert!((grads.grad_bias.data()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_even_same_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2, 2]).unwrap();
        let w = Tensor::zeros(&[1, 3, 1, 1, 1]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert!(matches!(
            conv3d_forward(&x, &w, &b, [1, 1, 1], Padding::Same),
            Err(TensorError::ShapeMismatch(_))
        ));
        let w = Tensor::zeros(&[1, 2, 2, 2, 2]).unwrap();
        assert!(matches!(
            conv3d_forward(&x, &w, &b, [1, 1, 1], Padding::Same),
            Err(TensorError::InvalidArgument(_))
        ));
    }

    #[test]
    fn transpose_block_replicates() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full(&[1, 1, 1, 2, 2], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv3d_transpose_forward(&x, &w, &b, [1, 2, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn transpose_unit_kernel_is_identity() {
        let x = pseudo(&[2, 1, 2, 3, 4], 21);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert_eq!(conv3d_transpose_forward(&x, &w, &b, [1, 1, 1]).unwrap(), x);
    }

    #[test]
    fn transpose_rejects_unsupported_stride() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]).unwrap();
        let w = Tensor::zeros(&[1, 1, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert!(matches!(
            conv3d_transpose_forward(&x, &w, &b, [3, 3, 3]),
            Err(TensorError::InvalidArgument(_))
        ));
    }
}
