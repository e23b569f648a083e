//! Register-blocked direct convolution for the stride-1, same-padding case.
//!
//! This is the hot path of the network: 3×3×3 kernels with few output
//! channels, where im2col + GEMM spends most of its time materialising and
//! packing the column matrix. Here a block of `CB` output channels times
//! `XB` consecutive x positions is accumulated in a fixed-size array while
//! the reduction runs over input channels and kernel taps.

use super::Scalar;

const XB: usize = 16;
const CB: usize = 8;
const GCB: usize = 4;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Shape {
    pub cin: usize,
    pub cout: usize,
    pub spatial: [usize; 3],
    pub kernel: [usize; 3],
}

impl Shape {
    fn padded_row(&self) -> usize {
        self.spatial[2].div_ceil(XB) * XB + self.kernel[2] - 1
    }
}

/// Copies `x` (`[c, D, H, W]`) into rows of length `padded_row` with
/// `kw/2` leading zeros and zero tail.
fn pad_rows<T: Scalar>(x: &[T], channels: usize, s: &Shape) -> Vec<T> {
    let [d, h, w] = s.spatial;
    let wp = s.padded_row();
    let lead = s.kernel[2] / 2;
    let mut out = vec![T::zero(); channels * d * h * wp];
    for (r, row) in x.chunks_exact(w).enumerate() {
        out[r * wp + lead..r * wp + lead + w].copy_from_slice(row);
    }
    out
}

#[inline]
fn shifted(o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

/// Runs the portable body compiled with AVX2 when the CPU has it. The lane
/// arithmetic is identical either way, only the vector width changes.
macro_rules! dispatch {
    ($fast:ident, $portable:ident, ($($arg:ident: $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $fast<T: Scalar>($($arg: $ty),*) {
            $portable($($arg),*)
        }

        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the features enabled on the callee were detected above.
            return unsafe { $fast($($arg),*) };
        }
        $portable($($arg),*)
    };
}

/// `out[co] = bias[co] + Σ_ci w[co, ci] ⋆ x[ci]` for one sample.
pub(crate) fn forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, s: &Shape, out: &mut [T]) {
    dispatch!(forward_avx2, forward_body, (x: &[T], w: &[T], bias: Option<&[T]>, s: &Shape, out: &mut [T]));
}

#[inline(always)]
fn forward_body<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, s: &Shape, out: &mut [T]) {
    let [d, h, wd] = s.spatial;
    let [kd, kh, kw] = s.kernel;
    let taps = kd * kh * kw;
    let wp = s.padded_row();
    let xp = pad_rows(x, s.cin, s);
    let blocks = s.cout.div_ceil(CB);
    // weights regrouped as [block][ci][tap][CB]
    let mut wb = vec![T::zero(); blocks * s.cin * taps * CB];
    for co in 0..s.cout {
        let (blk, j) = (co / CB, co % CB);
        for ci in 0..s.cin {
            for t in 0..taps {
                wb[((blk * s.cin + ci) * taps + t) * CB + j] = w[(co * s.cin + ci) * taps + t];
            }
        }
    }
    for blk in 0..blocks {
        let wblk = &wb[blk * s.cin * taps * CB..(blk + 1) * s.cin * taps * CB];
        let nco = CB.min(s.cout - blk * CB);
        for z in 0..d {
            for y in 0..h {
                for x0 in (0..wd).step_by(XB) {
                    let mut acc = [[T::zero(); XB]; CB];
                    for ci in 0..s.cin {
                        for a in 0..kd {
                            let Some(zi) = shifted(z, a, kd / 2, d) else {
                                continue;
                            };
                            for b in 0..kh {
                                let Some(yi) = shifted(y, b, kh / 2, h) else {
                                    continue;
                                };
                                let row = &xp[((ci * d + zi) * h + yi) * wp..][..wp];
                                let wrow = &wblk[(ci * taps + (a * kh + b) * kw) * CB..];
                                for c in 0..kw {
                                    let r: &[T; XB] = row[x0 + c..x0 + c + XB].try_into().unwrap();
                                    let wk: &[T; CB] =
                                        wrow[c * CB..(c + 1) * CB].try_into().unwrap();
                                    for j in 0..CB {
                                        let wv = wk[j];
                                        for l in 0..XB {
                                            acc[j][l] += wv * r[l];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let n = XB.min(wd - x0);
                    for (j, accj) in acc.iter().enumerate().take(nco) {
                        let co = blk * CB + j;
                        let bv = bias.map_or(T::zero(), |b| b[co]);
                        let dst = &mut out[((co * d + z) * h + y) * wd + x0..][..n];
                        for (o, &v) in dst.iter_mut().zip(accj) {
                            *o = v + bv;
                        }
                    }
                }
            }
        }
    }
}

/// Input gradient: correlation of `grad_out` with the channel-swapped,
/// spatially flipped kernel.
pub(crate) fn backward_input<T: Scalar>(grad_out: &[T], w: &[T], s: &Shape, grad_in: &mut [T]) {
    let [kd, kh, kw] = s.kernel;
    let taps = kd * kh * kw;
    let mut flipped = vec![T::zero(); w.len()];
    for co in 0..s.cout {
        for ci in 0..s.cin {
            for t in 0..taps {
                flipped[(ci * s.cout + co) * taps + (taps - 1 - t)] =
                    w[(co * s.cin + ci) * taps + t];
            }
        }
    }
    let swapped = Shape {
        cin: s.cout,
        cout: s.cin,
        ..*s
    };
    forward(grad_out, &flipped, None, &swapped, grad_in);
}

/// Weight gradient for one sample, written into `gw` (`[cout, cin, taps]`).
pub(crate) fn backward_weight<T: Scalar>(x: &[T], grad_out: &[T], s: &Shape, gw: &mut [T]) {
    match s.kernel[2] {
        1 => backward_weight_kw::<T, 1>(x, grad_out, s, gw),
        3 => backward_weight_kw::<T, 3>(x, grad_out, s, gw),
        _ => unreachable!("direct path restricted to kw in {{1, 3}}"),
    }
}

fn backward_weight_kw<T: Scalar, const KW: usize>(
    x: &[T],
    grad_out: &[T],
    s: &Shape,
    gw: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn fast<T: Scalar, const KW: usize>(x: &[T], grad_out: &[T], s: &Shape, gw: &mut [T]) {
        backward_weight_body::<T, KW>(x, grad_out, s, gw)
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the features enabled on the callee were detected above.
        return unsafe { fast::<T, KW>(x, grad_out, s, gw) };
    }
    backward_weight_body::<T, KW>(x, grad_out, s, gw)
}

#[inline(always)]
fn backward_weight_body<T: Scalar, const KW: usize>(
    x: &[T],
    grad_out: &[T],
    s: &Shape,
    gw: &mut [T],
) {
    let [d, h, wd] = s.spatial;
    let [kd, kh, _] = s.kernel;
    let taps = kd * kh * KW;
    let wp = s.padded_row();
    let xp = pad_rows(x, s.cin, s);
    // grad_out rows padded to a multiple of XB with zeros, no lead
    let gp_row = wd.div_ceil(XB) * XB;
    let mut gp = vec![T::zero(); s.cout * d * h * gp_row];
    for (r, row) in grad_out.chunks_exact(wd).enumerate() {
        gp[r * gp_row..r * gp_row + wd].copy_from_slice(row);
    }
    for co0 in (0..s.cout).step_by(GCB) {
        let nco = GCB.min(s.cout - co0);
        for ci in 0..s.cin {
            for a in 0..kd {
                for b in 0..kh {
                    let mut acc = [[[T::zero(); XB]; GCB]; KW];
                    for z in 0..d {
                        let Some(zi) = shifted(z, a, kd / 2, d) else {
                            continue;
                        };
                        for y in 0..h {
                            let Some(yi) = shifted(y, b, kh / 2, h) else {
                                continue;
                            };
                            let row = &xp[((ci * d + zi) * h + yi) * wp..][..wp];
                            for x0 in (0..wd).step_by(XB) {
                                let mut g = [[T::zero(); XB]; GCB];
                                for (j, gj) in g.iter_mut().enumerate().take(nco) {
                                    let src =
                                        &gp[(((co0 + j) * d + z) * h + y) * gp_row + x0..][..XB];
                                    gj.copy_from_slice(src);
                                }
                                for (c, accc) in acc.iter_mut().enumerate() {
                                    let r: &[T; XB] = row[x0 + c..x0 + c + XB].try_into().unwrap();
                                    for j in 0..GCB {
                                        for l in 0..XB {
                                            accc[j][l] += g[j][l] * r[l];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for (c, accc) in acc.iter().enumerate() {
                        for (j, lanes) in accc.iter().enumerate().take(nco) {
                            let t = (a * kh + b) * KW + c;
                            gw[((co0 + j) * s.cin + ci) * taps + t] = lanes.iter().copied().sum();
                        }
                    }
                }
            }
        }
    }
}
