//! Randomized self-checks of the layer kernels: finite-difference gradient
//! checks in double precision and the convolution adjoint identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    batchnorm3d, batchnorm3d_backward, conv3d_backward, conv3d_forward, conv3d_transpose_backward,
    conv3d_transpose_forward, dice_loss, gradient_check, maxpool3d_backward, maxpool3d_forward,
    relu, relu_backward, sigmoid, sigmoid_backward, BnMode, DiceLoss, GradCheckReport, Padding,
    Result, RunningStats, Tensor,
};

/// Layers covered by [`gradient_suite`], in report order.
pub const LAYERS: [&str; 7] = [
    "conv3d",
    "conv3d_transpose",
    "batchnorm3d",
    "relu",
    "sigmoid",
    "maxpool3d",
    "dice_loss",
];

/// Outcome of all trials of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so a finite-difference step never crosses
/// the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn spatial(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    std::array::from_fn(|_| rng.random_range(lo..=hi))
}

fn check_one(layer: &'static str, rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let n = rng.random_range(1..=2);
    match layer {
        "conv3d" => {
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let same = rng.random::<bool>();
            let kernel: [usize; 3] = std::array::from_fn(|_| {
                if same {
                    [1, 3][rng.random_range(0..2)]
                } else {
                    rng.random_range(1..=3)
                }
            });
            let stride = std::array::from_fn(|_| rng.random_range(1..=2));
            let pad = if same { Padding::Same } else { Padding::Valid };
            let [d, h, w] = spatial(rng, 3, 5);
            let x = uniform(rng, &[n, cin, d, h, w], -1.0, 1.0)?;
            let wt = uniform(
                rng,
                &[cout, cin, kernel[0], kernel[1], kernel[2]],
                -1.0,
                1.0,
            )?;
            let b = uniform(rng, &[cout], -1.0, 1.0)?;
            let out = conv3d_forward(&x, &wt, &b, stride, pad)?;
            let r = uniform(rng, out.shape(), -1.0, 1.0)?;
            let g = conv3d_backward(&r, &x, &wt, stride, pad)?;
            gradient_check(
                |v| {
                    conv3d_forward(&v[0], &v[1], &v[2], stride, pad)
                        .and_then(|o| o.dot(&r))
                        .unwrap_or(f64::NAN)
                },
                &[("input", x), ("weight", wt), ("bias", b)],
                &[g.grad_input, g.grad_weight, g.grad_bias],
                tol,
            )
        }
        "conv3d_transpose" => {
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let stride: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=2));
            let [d, h, w] = spatial(rng, 1, 3);
            let x = uniform(rng, &[n, cin, d, h, w], -1.0, 1.0)?;
            let wt = uniform(
                rng,
                &[cin, cout, stride[0], stride[1], stride[2]],
                -1.0,
                1.0,
            )?;
            let b = uniform(rng, &[cout], -1.0, 1.0)?;
            let out = conv3d_transpose_forward(&x, &wt, &b, stride)?;
            let r = uniform(rng, out.shape(), -1.0, 1.0)?;
            let g = conv3d_transpose_backward(&r, &x, &wt, stride)?;
            gradient_check(
                |v| {
                    conv3d_transpose_forward(&v[0], &v[1], &v[2], stride)
                        .and_then(|o| o.dot(&r))
                        .unwrap_or(f64::NAN)
                },
                &[("input", x), ("weight", wt), ("bias", b)],
                &[g.grad_input, g.grad_weight, g.grad_bias],
                tol,
            )
        }
        "batchnorm3d" => {
            let c = rng.random_range(1..=3);
            let [d, h, w] = spatial(rng, 2, 3);
            let x = uniform(rng, &[n, c, d, h, w], -2.0, 2.0)?;
            let gamma = uniform(rng, &[c], 0.5, 1.5)?;
            let beta = uniform(rng, &[c], -0.5, 0.5)?;
            let bn = |x: &Tensor<f64>, gm: &Tensor<f64>, bt: &Tensor<f64>| {
                let mut stats = RunningStats::uninitialized(c)?;
                batchnorm3d(x, gm, bt, &mut stats, BnMode::Train, 1e-5, 0.1)
            };
            let (out, cache) = bn(&x, &gamma, &beta)?;
            let r = uniform(rng, out.shape(), -1.0, 1.0)?;
            let (gx, gg, gb) =
                batchnorm3d_backward(&r, &cache.expect("train mode caches"), &gamma)?;
            gradient_check(
                |v| {
                    bn(&v[0], &v[1], &v[2])
                        .and_then(|(o, _)| o.dot(&r))
                        .unwrap_or(f64::NAN)
                },
                &[("input", x), ("gamma", gamma), ("beta", beta)],
                &[gx, gg, gb],
                tol,
            )
        }
        "relu" | "sigmoid" => {
            let shape = [n, rng.random_range(1..=3), 2, 3, 4];
            let x = away_from_zero(rng, &shape)?;
            let r = uniform(rng, &shape, -1.0, 1.0)?;
            let is_relu = layer == "relu";
            let f = |x: &Tensor<f64>| if is_relu { relu(x) } else { sigmoid(x) };
            let out = f(&x);
            let g = if is_relu {
                relu_backward(&r, &out)?
            } else {
                sigmoid_backward(&r, &out)?
            };
            gradient_check(
                |v| f(&v[0]).dot(&r).unwrap_or(f64::NAN),
                &[("input", x)],
                &[g],
                tol,
            )
        }
        "maxpool3d" => {
            let window: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=2));
            let c = rng.random_range(1..=2);
            let mult = spatial(rng, 1, 3);
            let shape = [
                n,
                c,
                window[0] * mult[0],
                window[1] * mult[1],
                window[2] * mult[2],
            ];
            // distinct values 0.01 apart keep every window free of ties
            let len: usize = shape.iter().product();
            let mut order: Vec<usize> = (0..len).collect();
            for i in (1..len).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let x = Tensor::new(&shape, order.iter().map(|&k| k as f64 * 0.01).collect())?;
            let pooled = maxpool3d_forward(&x, window)?;
            let r = uniform(rng, pooled.output.shape(), -1.0, 1.0)?;
            let g = maxpool3d_backward(&r, &pooled.argmax, &shape)?;
            gradient_check(
                |v| {
                    maxpool3d_forward(&v[0], window)
                        .and_then(|p| p.output.dot(&r))
                        .unwrap_or(f64::NAN)
                },
                &[("input", x)],
                &[g],
                tol,
            )
        }
        "dice_loss" => {
            let c = rng.random_range(2..=3);
            let shape = [n, c, 2, 2, rng.random_range(2..=4)];
            let probs = uniform(rng, &shape, 0.05, 0.95)?;
            let vol = shape[2] * shape[3] * shape[4];
            let mut target = Tensor::zeros(&shape)?;
            for b in 0..n {
                for i in 0..vol {
                    let k = rng.random_range(0..c);
                    target.data_mut()[(b * c + k) * vol + i] = 1.0;
                }
            }
            let classes: Vec<usize> = (0..c).filter(|_| rng.random::<bool>()).collect();
            let cfg = DiceLoss::new(if classes.is_empty() {
                vec![c - 1]
            } else {
                classes
            });
            let out = dice_loss(&probs, &target, &cfg)?;
            gradient_check(
                |v| {
                    dice_loss(&v[0], &target, &cfg)
                        .map(|o| o.loss)
                        .unwrap_or(f64::NAN)
                },
                &[("probs", probs)],
                &[out.grad],
                tol,
            )
        }
        other => unreachable!("unknown layer {other}"),
    }
}

/// Runs `trials` random finite-difference checks for every layer in
/// [`LAYERS`] with relative tolerance `tol`.
pub fn gradient_suite(trials: usize, seed: u64, tol: f64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LAYERS
        .iter()
        .map(|&layer| {
            let mut check = LayerCheck {
                layer,
                trials,
                max_rel_error: 0.0,
                failures: 0,
            };
            for _ in 0..trials {
                let report = check_one(layer, &mut rng, tol)?;
                check.max_rel_error = check.max_rel_error.max(report.max_rel_error());
                check.failures += usize::from(!report.passed());
            }
            Ok(check)
        })
        .collect()
}

/// One adjoint comparison `⟨A x, y⟩` against `⟨x, Aᵀ y⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointCase {
    pub transposed: bool,
    pub input_shape: Vec<usize>,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub forward: f64,
    pub adjoint: f64,
}

impl AdjointCase {
    pub fn rel_error(&self) -> f64 {
        let scale = self
            .forward
            .abs()
            .max(self.adjoint.abs())
            .max(f64::MIN_POSITIVE);
        (self.forward - self.adjoint).abs() / scale
    }
}

/// `cases` random shape/stride combinations alternating between the
/// convolution and the transposed convolution, in double precision. The
/// adjoint side is the input gradient of the backward pass.
pub fn adjoint_suite(cases: usize, seed: u64) -> Result<Vec<AdjointCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for i in 0..cases {
        let n = rng.random_range(1..=2);
        let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let transposed = i % 2 == 1;
        let case = if transposed {
            let stride: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=2));
            let s = spatial(&mut rng, 1, 4);
            let x = uniform(&mut rng, &[n, cin, s[0], s[1], s[2]], -1.0, 1.0)?;
            let w = uniform(
                &mut rng,
                &[cin, cout, stride[0], stride[1], stride[2]],
                -1.0,
                1.0,
            )?;
            let zero = Tensor::<f64>::zeros(&[cout])?;
            let ax = conv3d_transpose_forward(&x, &w, &zero, stride)?;
            let y = uniform(&mut rng, ax.shape(), -1.0, 1.0)?;
            let aty = conv3d_transpose_backward(&y, &x, &w, stride)?.grad_input;
            AdjointCase {
                transposed,
                input_shape: x.shape().to_vec(),
                kernel: stride,
                stride,
                forward: ax.dot(&y)?,
                adjoint: x.dot(&aty)?,
            }
        } else {
            let same = rng.random::<bool>();
            let kernel: [usize; 3] = std::array::from_fn(|_| {
                if same {
                    [1, 3][rng.random_range(0..2)]
                } else {
                    rng.random_range(1..=3)
                }
            });
            let stride = std::array::from_fn(|_| rng.random_range(1..=2));
            let pad = if same { Padding::Same } else { Padding::Valid };
            let s = spatial(&mut rng, 3, 9);
            let x = uniform(&mut rng, &[n, cin, s[0], s[1], s[2]], -1.0, 1.0)?;
            let w = uniform(
                &mut rng,
                &[cout, cin, kernel[0], kernel[1], kernel[2]],
                -1.0,
                1.0,
            )?;
            let zero = Tensor::<f64>::zeros(&[cout])?;
            let ax = conv3d_forward(&x, &w, &zero, stride, pad)?;
            let y = uniform(&mut rng, ax.shape(), -1.0, 1.0)?;
            let aty = conv3d_backward(&y, &x, &w, stride, pad)?.grad_input;
            AdjointCase {
                transposed,
                input_shape: x.shape().to_vec(),
                kernel,
                stride,
                forward: ax.dot(&y)?,
                adjoint: x.dot(&aty)?,
            }
        };
        out.push(case);
    }
    Ok(out)
}
