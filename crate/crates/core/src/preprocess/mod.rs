//! Heart localization, canonical crop/pad, papillary-muscle mask cleaning,
//! label remapping and random patch extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data_io::{
    normalize_intensity, voxel_index, LabelMask, Volume, VolumeHeader, BACKGROUND, LV_CAVITY,
    MYOCARDIUM, NUM_CLASSES,
};
use crate::tensor::Tensor;

pub mod components;

pub use components::{label_components, Components, Connectivity};

/// Canonical (x, y, z) extents every volume is cropped or padded to.
pub const CANONICAL_SHAPE: [usize; 3] = [156, 156, 6];
/// Training patch extents in (x, y, z).
pub const PATCH_SHAPE: [usize; 3] = [64, 64, 4];

const MAX_FOREGROUND_ATTEMPTS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("mask has no foreground voxels to localize the heart")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("patch {patch:?} does not fit in volume {volume:?}")]
    PatchTooLarge {
        patch: [usize; 3],
        volume: [usize; 3],
    },
    #[error("invalid patch shape {0:?}: extents must be positive multiples of 4")]
    InvalidPatch([usize; 3]),
    #[error("raw label {value} at voxel {index} is outside 0..=3")]
    InvalidLabel { value: u8, index: usize },
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

/// Floor midpoint of the bounding box of voxels where `keep` holds.
fn bbox_center(dims: [usize; 3], mut keep: impl FnMut(usize) -> bool) -> Option<[usize; 3]> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if keep(voxel_index(dims, x, y, z)) {
                    any = true;
                    for (i, v) in [x, y, z].into_iter().enumerate() {
                        lo[i] = lo[i].min(v);
                        hi[i] = hi[i].max(v);
                    }
                }
            }
        }
    }
    any.then(|| {
        [
            (lo[0] + hi[0]) / 2,
            (lo[1] + hi[1]) / 2,
            (lo[2] + hi[2]) / 2,
        ]
    })
}

/// Center of the bounding box of all nonzero labels.
pub fn locate_heart_bbox(mask: &LabelMask) -> Result<[usize; 3]> {
    bbox_center(mask.dims(), |i| mask.labels[i] != BACKGROUND).ok_or(PreprocessError::EmptyMask)
}

/// Localization without annotations: the bounding-box center of the largest
/// 26-connected component of voxels brighter than the normalized image's
/// 75th percentile. A constant image yields the grid center.
pub fn locate_heart_maskless(image: &Volume) -> [usize; 3] {
    let dims = image.dims();
    let norm = normalize_intensity(image);
    let mut sorted = norm.values.clone();
    sorted.sort_by(f32::total_cmp);
    let threshold = sorted[(0.75 * (sorted.len() - 1) as f64).floor() as usize];
    let fg: Vec<bool> = norm.values.iter().map(|&v| v > threshold).collect();
    let comps = label_components(&fg, dims, Connectivity::Volume26);
    let Some(best) = largest(&comps.sizes, 0..comps.sizes.len()) else {
        return [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    };
    bbox_center(dims, |i| comps.labels[i] == best as u32).expect("component is nonempty")
}

/// Largest component among `ids`; ties go to the lowest id.
fn largest(sizes: &[usize], ids: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for id in ids {
        if best.is_none_or(|b| sizes[id] > sizes[b]) {
            best = Some(id);
        }
    }
    best
}

/// Placement of a canonical window inside a source grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    /// Source voxel that lands at canonical voxel (0, 0, 0); may be negative.
    pub origin: [isize; 3],
    pub size: [usize; 3],
    pub source_dims: [usize; 3],
}

impl CropWindow {
    /// Window of extent `size` around `center`. Any bounding box no longer
    /// than `size` whose floor midpoint is `center` lies fully inside.
    pub fn centered(source_dims: [usize; 3], center: [usize; 3], size: [usize; 3]) -> Self {
        let origin = std::array::from_fn(|i| center[i] as isize - ((size[i] - 1) / 2) as isize);
        Self {
            origin,
            size,
            source_dims,
        }
    }

    fn source_of(&self, c: [usize; 3]) -> Option<usize> {
        let mut s = [0usize; 3];
        for i in 0..3 {
            let v = self.origin[i] + c[i] as isize;
            if v < 0 || v as usize >= self.source_dims[i] {
                return None;
            }
            s[i] = v as usize;
        }
        Some(voxel_index(self.source_dims, s[0], s[1], s[2]))
    }

    /// Copies the window out of `source`, zero-filling outside it.
    pub fn crop<T: Copy + Default>(&self, source: &[T]) -> Vec<T> {
        let [w, h, d] = self.size;
        let mut out = vec![T::default(); w * h * d];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if let Some(s) = self.source_of([x, y, z]) {
                        out[voxel_index(self.size, x, y, z)] = source[s];
                    }
                }
            }
        }
        out
    }

    /// Inverse placement: writes canonical values back onto a zeroed source
    /// grid. Canonical voxels outside the source are dropped.
    pub fn uncrop<T: Copy + Default>(&self, canonical: &[T]) -> Vec<T> {
        let [w, h, d] = self.size;
        let mut out = vec![T::default(); self.source_dims.iter().product()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if let Some(s) = self.source_of([x, y, z]) {
                        out[s] = canonical[voxel_index(self.size, x, y, z)];
                    }
                }
            }
        }
        out
    }
}

pub fn crop_or_pad_volume(
    volume: &Volume,
    center: [usize; 3],
    target: [usize; 3],
) -> (Volume, CropWindow) {
    let win = CropWindow::centered(volume.dims(), center, target);
    (
        Volume::new(volume.header.with_dims(target), win.crop(&volume.values)),
        win,
    )
}

pub fn crop_or_pad_mask(
    mask: &LabelMask,
    center: [usize; 3],
    target: [usize; 3],
) -> (LabelMask, CropWindow) {
    let win = CropWindow::centered(mask.dims(), center, target);
    (
        LabelMask::new(mask.header.with_dims(target), win.crop(&mask.labels)),
        win,
    )
}

/// Normalized image and mask on the canonical grid.
#[derive(Debug, Clone)]
pub struct Canonical {
    pub image: Volume,
    pub mask: Option<LabelMask>,
    pub window: CropWindow,
}

/// Normalizes the image and crops both image and mask around the heart.
/// With a mask the heart is located from its labels, otherwise from the
/// image alone.
pub fn canonicalize(
    image: &Volume,
    mask: Option<&LabelMask>,
    target: [usize; 3],
) -> Result<Canonical> {
    if let Some(m) = mask {
        if m.dims() != image.dims() {
            return Err(PreprocessError::DimMismatch(format!(
                "image {:?} vs mask {:?}",
                image.dims(),
                m.dims()
            )));
        }
    }
    let center = match mask {
        Some(m) => locate_heart_bbox(m)?,
        None => locate_heart_maskless(image),
    };
    let (image, window) = crop_or_pad_volume(&normalize_intensity(image), center, target);
    let mask = mask.map(|m| crop_or_pad_mask(m, center, target).0);
    Ok(Canonical {
        image,
        mask,
        window,
    })
}

/// Removes papillary muscles and stray fragments from the myocardium label.
///
/// Within each group (an axial slice for [`Connectivity::Slice8`], the whole
/// volume for [`Connectivity::Volume26`]) the largest myocardium component
/// is kept. Any other component whose 1-voxel dilation meets only LV cavity
/// or itself becomes LV cavity; the rest become background.
pub fn clean_mask(mask: &LabelMask, conn: Connectivity) -> LabelMask {
    let dims = mask.dims();
    let fg: Vec<bool> = mask.labels.iter().map(|&l| l == MYOCARDIUM).collect();
    let comps = label_components(&fg, dims, conn);
    let n = comps.sizes.len();
    let group_of = |id: usize| match conn {
        Connectivity::Slice8 => comps.seeds[id] / (dims[0] * dims[1]),
        Connectivity::Volume26 => 0,
    };
    let groups = match conn {
        Connectivity::Slice8 => dims[2],
        Connectivity::Volume26 => 1,
    };
    let mut keep = vec![false; n];
    for g in 0..groups {
        if let Some(b) = largest(&comps.sizes, (0..n).filter(|&id| group_of(id) == g)) {
            keep[b] = true;
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &c) in comps.labels.iter().enumerate() {
        if c != components::UNLABELED {
            members[c as usize].push(i);
        }
    }
    let offsets = conn.offsets();
    let mut labels = mask.labels.clone();
    for id in (0..n).filter(|&id| !keep[id]) {
        let enclosed = members[id].iter().all(|&i| {
            let p = components::coords(dims, i);
            offsets
                .iter()
                .all(|&o| match components::neighbor(dims, p, o) {
                    Some(j) => mask.labels[j] == LV_CAVITY || comps.labels[j] == id as u32,
                    None => false,
                })
        });
        let target = if enclosed { LV_CAVITY } else { BACKGROUND };
        for &i in &members[id] {
            labels[i] = target;
        }
    }
    LabelMask::new(mask.header, labels)
}

/// Maps public four-class labels {0 bg, 1 RV, 2 myo, 3 LV} to the
/// three-class convention.
pub fn remap_labels(header: VolumeHeader, raw: &[u8]) -> Result<LabelMask> {
    if raw.len() != header.voxel_count() {
        return Err(PreprocessError::DimMismatch(format!(
            "{} labels for dims {:?}",
            raw.len(),
            header.dims
        )));
    }
    let labels = raw
        .iter()
        .enumerate()
        .map(|(index, &value)| match value {
            0 | 1 => Ok(BACKGROUND),
            2 => Ok(MYOCARDIUM),
            3 => Ok(LV_CAVITY),
            _ => Err(PreprocessError::InvalidLabel { value, index }),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(LabelMask::new(header, labels))
}

/// `[1, 1, Z, Y, X]` tensor of a volume.
pub fn volume_tensor(volume: &Volume) -> Tensor<f32> {
    let [x, y, z] = volume.dims();
    Tensor::new(&[1, 1, z, y, x], volume.values.clone()).expect("volume shape")
}

/// `[1, 3, Z, Y, X]` one-hot encoding of a mask.
pub fn one_hot(mask: &LabelMask) -> Tensor<f32> {
    let [x, y, z] = mask.dims();
    let p = x * y * z;
    let mut data = vec![0.0; NUM_CLASSES * p];
    for (i, &l) in mask.labels.iter().enumerate() {
        data[l as usize * p + i] = 1.0;
    }
    Tensor::new(&[1, NUM_CLASSES, z, y, x], data).expect("mask shape")
}

/// Training sample cut from a canonical volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `[1, 1, pz, py, px]`.
    pub image: Tensor<f32>,
    /// One-hot `[1, 3, pz, py, px]`.
    pub label: Tensor<f32>,
    /// Canonical (x, y, z) voxel at the patch's first corner.
    pub origin: [usize; 3],
}

pub fn validate_patch(patch: [usize; 3]) -> Result<()> {
    if patch.iter().any(|&p| p < 4 || p % 4 != 0) {
        return Err(PreprocessError::InvalidPatch(patch));
    }
    Ok(())
}

fn copy_patch<T: Copy>(
    src: &[T],
    dims: [usize; 3],
    origin: [usize; 3],
    patch: [usize; 3],
    mut f: impl FnMut(usize, T),
) {
    let mut k = 0;
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            let start = voxel_index(dims, origin[0], origin[1] + y, origin[2] + z);
            for &v in &src[start..start + patch[0]] {
                f(k, v);
                k += 1;
            }
        }
    }
}

/// Draws `count` patches with uniformly random origins from a seeded
/// generator. Even-numbered patches are resampled (up to 100 attempts)
/// until they contain foreground, so at least half of them do whenever the
/// mask has any.
pub fn extract_patches(
    image: &Volume,
    mask: &LabelMask,
    patch: [usize; 3],
    count: usize,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    validate_patch(patch)?;
    let dims = image.dims();
    if mask.dims() != dims {
        return Err(PreprocessError::DimMismatch(format!(
            "image {dims:?} vs mask {:?}",
            mask.dims()
        )));
    }
    if (0..3).any(|i| patch[i] > dims[i]) {
        return Err(PreprocessError::PatchTooLarge {
            patch,
            volume: dims,
        });
    }
    let has_fg = mask.labels.iter().any(|&l| l != BACKGROUND);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pvol: usize = patch.iter().product();
    let mut out = Vec::with_capacity(count);
    for n in 0..count {
        let mut origin = [0; 3];
        for attempt in 0..MAX_FOREGROUND_ATTEMPTS {
            origin = std::array::from_fn(|i| rng.random_range(0..=dims[i] - patch[i]));
            if !has_fg || n % 2 == 1 || attempt + 1 == MAX_FOREGROUND_ATTEMPTS {
                break;
            }
            let mut fg = false;
            copy_patch(&mask.labels, dims, origin, patch, |_, l| {
                fg |= l != BACKGROUND
            });
            if fg {
                break;
            }
        }
        let mut img = vec![0.0f32; pvol];
        copy_patch(&image.values, dims, origin, patch, |k, v| img[k] = v);
        let mut lab = vec![0.0f32; NUM_CLASSES * pvol];
        copy_patch(&mask.labels, dims, origin, patch, |k, l| {
            lab[l as usize * pvol + k] = 1.0
        });
        let [px, py, pz] = patch;
        out.push(PatchSample {
            image: Tensor::new(&[1, 1, pz, py, px], img).expect("patch shape"),
            label: Tensor::new(&[1, NUM_CLASSES, pz, py, px], lab).expect("patch shape"),
            origin,
        });
    }
    Ok(out)
}
