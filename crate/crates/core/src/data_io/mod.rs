//! Volumes, label masks, NIfTI-1 I/O and dataset indexing.

use serde::{Deserialize, Serialize};

pub mod dataset;
pub mod nifti;

pub use dataset::{
    split_dataset, DatasetEntry, DatasetError, DatasetIndex, Phase, Split, SplitFractions,
};
pub use nifti::{
    is_nifti_path, read_nifti, write_labels, write_mask, write_volume, NiftiError, NiftiImage,
};

/// Label values of a three-class cardiac mask.
pub const BACKGROUND: u8 = 0;
pub const MYOCARDIUM: u8 = 1;
pub const LV_CAVITY: u8 = 2;
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataType {
    Uint8,
    Int16,
    Float32,
}

impl DataType {
    pub fn byte_width(self) -> usize {
        match self {
            DataType::Uint8 => 1,
            DataType::Int16 => 2,
            DataType::Float32 => 4,
        }
    }
}

/// Grid geometry shared by a volume and its masks. `dims` and `spacing_mm`
/// are in (x, y, z) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub datatype: DataType,
    pub slope: f32,
    pub intercept: f32,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3], spacing_mm: [f32; 3]) -> Self {
        Self {
            dims,
            spacing_mm,
            datatype: DataType::Float32,
            slope: 1.0,
            intercept: 0.0,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Same grid, different dims (used after cropping).
    pub fn with_dims(&self, dims: [usize; 3]) -> Self {
        Self { dims, ..*self }
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().map(|&s| s as f64).product()
    }
}

/// Flat index of voxel `(x, y, z)` with x fastest.
#[inline]
pub fn voxel_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

/// Scalar image on a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub values: Vec<f32>,
}

impl Volume {
    pub fn new(header: VolumeHeader, values: Vec<f32>) -> Self {
        assert_eq!(header.voxel_count(), values.len(), "volume size mismatch");
        Self { header, values }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }
}

/// Three-class label field: background, myocardium, LV cavity.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub header: VolumeHeader,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(header: VolumeHeader, labels: Vec<u8>) -> Self {
        assert_eq!(header.voxel_count(), labels.len(), "mask size mismatch");
        Self {
            header: VolumeHeader {
                datatype: DataType::Uint8,
                ..header
            },
            labels,
        }
    }

    pub fn empty(header: VolumeHeader) -> Self {
        Self::new(header, vec![BACKGROUND; header.voxel_count()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Min-max rescale to `[0, 1]`. Constant volumes map to all zeros.
pub fn normalize_intensity(volume: &Volume) -> Volume {
    let (lo, hi) = volume
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let values = if range > 0.0 {
        volume.values.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; volume.values.len()]
    };
    Volume {
        header: volume.header,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(values: Vec<f32>) -> Volume {
        Volume::new(VolumeHeader::new([values.len(), 1, 1], [1.0; 3]), values)
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_intensity(&vol(vec![0.0, 50.0, 100.0])).values,
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(normalize_intensity(&vol(vec![7.0; 4])).values, vec![0.0; 4]);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_spans_unit_range(values in prop::collection::vec(-1e4f32..1e4, 2..64)) {
            let v = vol(values);
            let once = normalize_intensity(&v);
            let twice = normalize_intensity(&once);
            prop_assert_eq!(&once.values, &twice.values);
            let lo = once.values.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = once.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if v.values.iter().any(|&x| x != v.values[0]) {
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
            }
        }
    }
}
