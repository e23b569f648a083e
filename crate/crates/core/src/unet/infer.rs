//! Label decoding and whole-volume sliding-window inference.

use super::{Result, UNet, UNetError};
use crate::data_io::{voxel_index, LabelMask, Volume};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Default window step in `(x, y, z)`: half the default patch.
pub const DEFAULT_STRIDE: [usize; 3] = [32, 32, 2];

/// Windows evaluated per network call.
const WINDOW_BATCH: usize = 4;

/// Per-voxel argmax over channels of `[N, C, D, H, W]` logits, returned in
/// `[N, D, H, W]` order. Sigmoid is strictly increasing, so the argmax of the
/// logits is the argmax of the per-channel sigmoid scores. Ties go to the
/// lowest channel.
pub fn predict_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, d, h, w] = logits.dims5()?;
    if c > usize::from(u8::MAX) + 1 {
        return Err(
            TensorError::InvalidArgument(format!("{c} channels do not fit in u8 labels")).into(),
        );
    }
    let vol = d * h * w;
    let data = logits.data();
    let mut out = vec![0u8; n * vol];
    for b in 0..n {
        let base = b * c * vol;
        for (i, label) in out[b * vol..(b + 1) * vol].iter_mut().enumerate() {
            let mut best = data[base + i];
            for ch in 1..c {
                let v = data[base + ch * vol + i];
                if v > best {
                    best = v;
                    *label = ch as u8;
                }
            }
        }
    }
    Ok(out)
}

/// Window origins along one axis: multiples of `stride` while the window
/// fits, plus a final window flush with the far edge.
pub fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(patch <= extent && stride > 0, "window must fit and advance");
    let last = extent - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Mean of the window logits covering each voxel, as `[1, C, Z, Y, X]`.
pub fn sliding_window_logits(model: &UNet, volume: &Volume, stride: [usize; 3]) -> Result<Tensor> {
    let cfg = model.config();
    let dims = volume.dims();
    let patch = cfg.patch_shape;
    if cfg.in_channels != 1 {
        return Err(UNetError::Config(
            "sliding-window inference needs a single input channel".into(),
        ));
    }
    if (0..3).any(|a| dims[a] < patch[a]) {
        return Err(TensorError::ShapeMismatch(format!(
            "volume {dims:?} is smaller than the patch {patch:?}"
        ))
        .into());
    }
    if (0..3).any(|a| stride[a] == 0 || stride[a] > patch[a]) {
        return Err(UNetError::Config(format!(
            "stride {stride:?} must be in 1..=patch {patch:?} on every axis"
        )));
    }
    let axes: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(dims[a], patch[a], stride[a]))
        .collect();
    let mut origins = Vec::new();
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                origins.push([x, y, z]);
            }
        }
    }

    let classes = cfg.classes;
    let n_vox = volume.values.len();
    let mut sum = vec![0f64; classes * n_vox];
    let mut count = vec![0u32; n_vox];
    let pvol: usize = patch.iter().product();
    for chunk in origins.chunks(WINDOW_BATCH) {
        let mut input = Vec::with_capacity(chunk.len() * pvol);
        for o in chunk {
            for_each_window_voxel(dims, *o, patch, |src| input.push(volume.values[src]));
        }
        let batch = Tensor::new(&cfg.input_shape(chunk.len()), input)?;
        let logits = model.infer(&batch)?;
        for (b, o) in chunk.iter().enumerate() {
            let out = &logits.data()[b * classes * pvol..(b + 1) * classes * pvol];
            let mut k = 0;
            for_each_window_voxel(dims, *o, patch, |dst| {
                count[dst] += 1;
                for c in 0..classes {
                    sum[c * n_vox + dst] += f64::from(out[c * pvol + k]);
                }
                k += 1;
            });
        }
    }
    let [x, y, z] = dims;
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, s)| (s / f64::from(count[i % n_vox])) as f32)
        .collect();
    Ok(Tensor::new(&[1, classes, z, y, x], data)?)
}

/// Whole-volume label map from averaged window logits.
pub fn sliding_window_infer(
    model: &UNet,
    volume: &Volume,
    stride: [usize; 3],
) -> Result<LabelMask> {
    let logits = sliding_window_logits(model, volume, stride)?;
    Ok(LabelMask::new(volume.header, predict_labels(&logits)?))
}

/// Visits the flat volume index of every window voxel in patch order.
fn for_each_window_voxel(
    dims: [usize; 3],
    origin: [usize; 3],
    patch: [usize; 3],
    mut f: impl FnMut(usize),
) {
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            let start = voxel_index(dims, origin[0], origin[1] + y, origin[2] + z);
            (start..start + patch[0]).for_each(&mut f);
        }
    }
}
