//! Three-level 3-D U-Net assembled from the tensor kernels.
//!
//! Each encoder level runs two `conv3×3×3 → batch norm → ReLU` stages, then
//! max-pools. The decoder upsamples with a transposed convolution whose
//! kernel equals the pooling window, concatenates `[upsampled, skip]` along
//! channels and runs another two-stage block. A pointwise convolution maps
//! to one logit per class; the decode is a per-channel sigmoid and argmax.
//!
//! Spatial tensors are `[N, C, D, H, W]` with `D = z`, `H = y`, `W = x`.
//! Configuration triples such as `patch_shape` are given in `(x, y, z)`.

mod file;
mod infer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    batchnorm3d, batchnorm3d_backward, conv3d_backward, conv3d_forward, conv3d_transpose_backward,
    conv3d_transpose_forward, maxpool3d_backward, maxpool3d_forward, relu, relu_backward,
    BatchNormCache, BnMode, Padding, Parameter, RunningStats, Scalar, Tensor, TensorError,
};

pub use file::{
    decode_model, encode_model, load_checkpoint, load_model, save_checkpoint, save_model,
    MODEL_MAGIC, MODEL_VERSION,
};
pub use infer::{
    predict_labels, sliding_window_infer, sliding_window_logits, window_starts, DEFAULT_STRIDE,
};

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file: bad magic bytes")]
    BadMagic,
    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("model file truncated: {0}")]
    Truncated(String),
    #[error("malformed model header: {0}")]
    Header(String),
    #[error("layer shapes inconsistent with the configuration: {0}")]
    ShapeChain(String),
}

pub type Result<T> = std::result::Result<T, UNetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub base_channels: usize,
    /// Resolution levels including the bottleneck; `levels − 1` poolings.
    pub levels: usize,
    /// `(x, y, z)` extent of a network input patch.
    pub patch_shape: [usize; 3],
    pub seed: u64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            classes: 3,
            base_channels: 16,
            levels: 3,
            patch_shape: [64, 64, 4],
            seed: 0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UNetError::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1".into());
        }
        if self.levels == 0 || self.levels > 8 {
            return bad(format!("levels must be in 1..=8, got {}", self.levels));
        }
        if self.patch_shape.contains(&0) {
            return bad(format!(
                "patch shape {:?} has a zero extent",
                self.patch_shape
            ));
        }
        let f = 1usize << (self.levels - 1);
        if !self.patch_shape[0].is_multiple_of(f) || !self.patch_shape[1].is_multiple_of(f) {
            return bad(format!(
                "patch x/y extents {:?} must be multiples of {f} for {} levels",
                &self.patch_shape[..2],
                self.levels
            ));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_eps must be > 0 and bn_momentum in (0, 1]".into());
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Pooling windows in `[D, H, W]` order. The axial window drops to 1 once
    /// the remaining depth is odd, so shallow patches stop pooling along z.
    pub fn pool_windows(&self) -> Vec<[usize; 3]> {
        let mut depth = self.patch_shape[2];
        (0..self.levels - 1)
            .map(|_| {
                let wz = if depth.is_multiple_of(2) { 2 } else { 1 };
                depth /= wz;
                [wz, 2, 2]
            })
            .collect()
    }

    /// Network input shape for a batch of `n` patches.
    pub fn input_shape(&self, n: usize) -> [usize; 5] {
        let [x, y, z] = self.patch_shape;
        [n, self.in_channels, z, y, x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvRef {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BnRef {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockRef {
    conv1: ConvRef,
    bn1: BnRef,
    conv2: ConvRef,
    bn2: BnRef,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Zero,
    One,
}

/// Parameter and norm-layer indices, derived purely from the configuration.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc: Vec<BlockRef>,
    /// Indexed by the level the upsampling produces.
    up: Vec<ConvRef>,
    dec: Vec<BlockRef>,
    head: ConvRef,
    pools: Vec<[usize; 3]>,
    params: Vec<(String, Vec<usize>, Init)>,
    stats: Vec<(String, usize)>,
}

#[derive(Default)]
struct LayoutBuilder {
    params: Vec<(String, Vec<usize>, Init)>,
    stats: Vec<(String, usize)>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.params.push((name, shape, init));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: [usize; 3]) -> ConvRef {
        let fan_in = cin * k.iter().product::<usize>();
        ConvRef {
            w: self.push(
                format!("{name}.weight"),
                vec![cout, cin, k[0], k[1], k[2]],
                Init::He(fan_in),
            ),
            b: self.push(format!("{name}.bias"), vec![cout], Init::Zero),
        }
    }

    fn bn(&mut self, name: String, channels: usize) -> BnRef {
        let r = BnRef {
            gamma: self.push(format!("{name}.gamma"), vec![channels], Init::One),
            beta: self.push(format!("{name}.beta"), vec![channels], Init::Zero),
            stats: self.stats.len(),
        };
        self.stats.push((name, channels));
        r
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> BlockRef {
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, [3, 3, 3]);
        let bn1 = self.bn(format!("{name}.bn1"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, [3, 3, 3]);
        let bn2 = self.bn(format!("{name}.bn2"), cout);
        BlockRef {
            conv1,
            bn1,
            conv2,
            bn2,
        }
    }
}

impl Layout {
    fn new(cfg: &UNetConfig) -> Self {
        let mut b = LayoutBuilder::default();
        let pools = cfg.pool_windows();
        let enc: Vec<BlockRef> = (0..cfg.levels)
            .map(|l| {
                let cin = if l == 0 {
                    cfg.in_channels
                } else {
                    cfg.channels_at(l - 1)
                };
                b.block(&format!("enc{l}"), cin, cfg.channels_at(l))
            })
            .collect();
        let mut up = vec![ConvRef { w: 0, b: 0 }; cfg.levels - 1];
        let mut dec = vec![enc[0]; cfg.levels - 1];
        for l in (0..cfg.levels - 1).rev() {
            let (cin, cout) = (cfg.channels_at(l + 1), cfg.channels_at(l));
            let k = pools[l];
            // transposed weight is [Cin, Cout, k]; each output sees Cin taps
            up[l] = ConvRef {
                w: b.push(
                    format!("up{l}.weight"),
                    vec![cin, cout, k[0], k[1], k[2]],
                    Init::He(cin),
                ),
                b: b.push(format!("up{l}.bias"), vec![cout], Init::Zero),
            };
            dec[l] = b.block(&format!("dec{l}"), 2 * cout, cout);
        }
        let head = b.conv("head", cfg.channels_at(0), cfg.classes, [1, 1, 1]);
        Self {
            enc,
            up,
            dec,
            head,
            pools,
            params: b.params,
            stats: b.stats,
        }
    }
}

/// Saved activations of one encoder or decoder block.
#[derive(Debug, Clone)]
struct BlockTape<T: Scalar> {
    input: Tensor<T>,
    bn1: BatchNormCache<T>,
    a1: Tensor<T>,
    bn2: BatchNormCache<T>,
    a2: Tensor<T>,
}

/// Activations recorded by [`UNet::forward_train`] and consumed by
/// [`UNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar> {
    enc: Vec<BlockTape<T>>,
    pools: Vec<(Vec<usize>, Vec<usize>)>,
    up_inputs: Vec<Tensor<T>>,
    dec: Vec<BlockTape<T>>,
    head_input: Tensor<T>,
}

/// Network parameters, running statistics and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T: Scalar = f32> {
    config: UNetConfig,
    layout: Layout,
    params: Vec<Parameter<T>>,
    stats: Vec<RunningStats<T>>,
}

const UNIT: [usize; 3] = [1, 1, 1];

impl<T: Scalar> UNet<T> {
    /// Deterministic He-normal initialization from `config.seed`.
    pub fn build(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(layout.params.len());
        for (name, shape, init) in &layout.params {
            let value = match *init {
                Init::He(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| UNetError::Config(e.to_string()))?;
                    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))?
                }
                Init::Zero => Tensor::zeros(shape)?,
                Init::One => Tensor::full(shape, T::one())?,
            };
            params.push(Parameter::new(name.clone(), value));
        }
        let stats = layout
            .stats
            .iter()
            .map(|(_, c)| RunningStats::standard(*c))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            config,
            layout,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Running statistics with their layer names (`enc0.bn1`, ...).
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.layout
            .stats
            .iter()
            .map(|(n, _)| n.as_str())
            .zip(&self.stats)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Same network with every tensor converted to another precision.
    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.cast(),
                    var: s.var.cast(),
                    initialized: s.initialized,
                })
                .collect(),
        }
    }

    /// Eval-mode forward pass; running statistics are read, never updated.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut stats = self.stats.clone();
        Ok(forward(
            &self.config,
            &self.layout,
            &self.params,
            &mut stats,
            input,
            BnMode::Eval,
            false,
        )?
        .0)
    }

    /// Train-mode forward pass using batch statistics. Updates the running
    /// statistics and returns the logits with the activations needed by
    /// [`UNet::backward`].
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let (logits, tape) = forward(
            &self.config,
            &self.layout,
            &self.params,
            &mut self.stats,
            input,
            BnMode::Train,
            true,
        )?;
        Ok((logits, tape.expect("tape requested")))
    }

    /// Accumulates parameter gradients of a scalar loss given its gradient
    /// with respect to the logits.
    pub fn backward(&mut self, tape: Tape<T>, grad_logits: &Tensor<T>) -> Result<()> {
        let lay = &self.layout;
        let params = &mut self.params;
        let head = conv3d_backward(
            grad_logits,
            &tape.head_input,
            &params[lay.head.w].value,
            UNIT,
            Padding::Same,
        )?;
        accumulate_conv(params, lay.head, &head.grad_weight, &head.grad_bias)?;
        let mut g = head.grad_input;

        let levels = self.config.levels;
        let mut skip_grads = Vec::with_capacity(levels - 1);
        let mut dec_tapes = tape.dec.into_iter();
        let mut up_inputs = tape.up_inputs.into_iter();
        for l in 0..levels - 1 {
            let bt = dec_tapes.next().expect("decoder tape");
            let g_cat = block_backward(params, lay.dec[l], bt, g)?;
            let c = self.config.channels_at(l);
            let mut parts = g_cat.split_channels(&[c, c])?.into_iter();
            let (g_up, g_skip) = (
                parts.next().expect("up part"),
                parts.next().expect("skip part"),
            );
            skip_grads.push(g_skip);
            let x = up_inputs.next().expect("upsampling input");
            let ug =
                conv3d_transpose_backward(&g_up, &x, &params[lay.up[l].w].value, lay.pools[l])?;
            accumulate_conv(params, lay.up[l], &ug.grad_weight, &ug.grad_bias)?;
            g = ug.grad_input;
        }

        let mut enc_tapes = tape.enc;
        let mut pools = tape.pools;
        for l in (0..levels).rev() {
            if l < levels - 1 {
                g.add_assign(&skip_grads[l])?;
            }
            let bt = enc_tapes.pop().expect("encoder tape");
            g = block_backward(params, lay.enc[l], bt, g)?;
            if l > 0 {
                let (argmax, shape) = pools.pop().expect("pool tape");
                g = maxpool3d_backward(&g, &argmax, &shape)?;
            }
        }
        Ok(())
    }
}

fn accumulate_conv<T: Scalar>(
    params: &mut [Parameter<T>],
    r: ConvRef,
    gw: &Tensor<T>,
    gb: &Tensor<T>,
) -> Result<()> {
    params[r.w].accumulate(gw)?;
    params[r.b].accumulate(gb)?;
    Ok(())
}

fn forward<T: Scalar>(
    cfg: &UNetConfig,
    lay: &Layout,
    params: &[Parameter<T>],
    stats: &mut [RunningStats<T>],
    input: &Tensor<T>,
    mode: BnMode,
    record: bool,
) -> Result<(Tensor<T>, Option<Tape<T>>)> {
    let [n, ..] = input.dims5()?;
    if n == 0 || input.shape() != cfg.input_shape(n) {
        return Err(UNetError::Tensor(TensorError::ShapeMismatch(format!(
            "network input {:?}, expected {:?}",
            input.shape(),
            cfg.input_shape(n)
        ))));
    }
    let eps = T::from_f64_lossy(cfg.bn_eps);
    let mom = T::from_f64_lossy(cfg.bn_momentum);
    let mut run_block = |b: BlockRef, x: Tensor<T>| -> Result<(Tensor<T>, Option<BlockTape<T>>)> {
        let stage =
            |x: &Tensor<T>, c: ConvRef, bn: BnRef, stats: &mut [RunningStats<T>]| -> Result<_> {
                let z = conv3d_forward(
                    x,
                    &params[c.w].value,
                    &params[c.b].value,
                    UNIT,
                    Padding::Same,
                )?;
                let (y, cache) = batchnorm3d(
                    &z,
                    &params[bn.gamma].value,
                    &params[bn.beta].value,
                    &mut stats[bn.stats],
                    mode,
                    eps,
                    mom,
                )?;
                Ok((relu(&y), cache))
            };
        let (a1, bn1) = stage(&x, b.conv1, b.bn1, stats)?;
        let (a2, bn2) = stage(&a1, b.conv2, b.bn2, stats)?;
        let tape = match (record, bn1, bn2) {
            (true, Some(bn1), Some(bn2)) => Some(BlockTape {
                input: x,
                bn1,
                a1,
                bn2,
                a2: a2.clone(),
            }),
            _ => None,
        };
        Ok((a2, tape))
    };

    let levels = cfg.levels;
    let mut enc_tapes = Vec::new();
    let mut pool_tapes = Vec::new();
    let mut skips = Vec::with_capacity(levels - 1);
    let mut x = input.clone();
    for l in 0..levels {
        let (a, t) = run_block(lay.enc[l], x)?;
        enc_tapes.extend(t);
        if l + 1 < levels {
            let pooled = maxpool3d_forward(&a, lay.pools[l])?;
            if record {
                pool_tapes.push((pooled.argmax, a.shape().to_vec()));
            }
            skips.push(a);
            x = pooled.output;
        } else {
            x = a;
        }
    }

    let mut up_inputs = Vec::new();
    let mut dec_tapes = Vec::new();
    for l in (0..levels - 1).rev() {
        let r = lay.up[l];
        let u = conv3d_transpose_forward(&x, &params[r.w].value, &params[r.b].value, lay.pools[l])?;
        if record {
            up_inputs.push(x);
        }
        let cat = Tensor::concat_channels(&[&u, &skips[l]])?;
        let (a, t) = run_block(lay.dec[l], cat)?;
        dec_tapes.extend(t);
        x = a;
    }
    let logits = conv3d_forward(
        &x,
        &params[lay.head.w].value,
        &params[lay.head.b].value,
        UNIT,
        Padding::Same,
    )?;
    if !record {
        return Ok((logits, None));
    }
    // backward walks the decoder from level 0 upward
    up_inputs.reverse();
    dec_tapes.reverse();
    Ok((
        logits,
        Some(Tape {
            enc: enc_tapes,
            pools: pool_tapes,
            up_inputs,
            dec: dec_tapes,
            head_input: x,
        }),
    ))
}

fn block_backward<T: Scalar>(
    params: &mut [Parameter<T>],
    b: BlockRef,
    t: BlockTape<T>,
    g: Tensor<T>,
) -> Result<Tensor<T>> {
    let mut stage = |g: Tensor<T>,
                     out: &Tensor<T>,
                     cache: &BatchNormCache<T>,
                     bn: BnRef,
                     c: ConvRef,
                     x: &Tensor<T>|
     -> Result<Tensor<T>> {
        let g = relu_backward(&g, out)?;
        let (g, gg, gb) = batchnorm3d_backward(&g, cache, &params[bn.gamma].value)?;
        params[bn.gamma].accumulate(&gg)?;
        params[bn.beta].accumulate(&gb)?;
        let cg = conv3d_backward(&g, x, &params[c.w].value, UNIT, Padding::Same)?;
        accumulate_conv(params, c, &cg.grad_weight, &cg.grad_bias)?;
        Ok(cg.grad_input)
    };
    let g = stage(g, &t.a2, &t.bn2, b.bn2, b.conv2, &t.a1)?;
    stage(g, &t.a1, &t.bn1, b.bn1, b.conv1, &t.input)
}

#[cfg(test)]
mod tests;
