//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only the header fields needed for 3-D scalar volumes are interpreted:
//! `dim`, `pixdim`, `datatype`, `vox_offset`, `scl_slope`, `scl_inter` and
//! the magic string. Both byte orders are accepted on read; files are always
//! written little-endian with the payload at offset 352.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use super::{DataType, LabelMask, Volume, VolumeHeader};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("bad magic {0:?}; expected \"n+1\\0\" or \"ni1\\0\"")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality dim[0] = {0}")]
    UnsupportedDims(i16),
    #[error("truncated payload: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("invalid label value {value} at voxel {index}")]
    InvalidLabel { value: f32, index: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Decoded NIfTI image: header plus scaled voxel values, X fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub header: VolumeHeader,
    pub values: Vec<f32>,
}

impl NiftiImage {
    pub fn into_volume(self) -> Volume {
        Volume {
            header: self.header,
            values: self.values,
        }
    }

    /// Interprets values as class labels, which must be integers in `0..=max_label`.
    pub fn into_labels(self, max_label: u8) -> Result<(VolumeHeader, Vec<u8>), NiftiError> {
        let labels = self
            .values
            .iter()
            .enumerate()
            .map(|(index, &v)| {
                if v.fract() == 0.0 && v >= 0.0 && v <= max_label as f32 {
                    Ok(v as u8)
                } else {
                    Err(NiftiError::InvalidLabel { value: v, index })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((self.header, labels))
    }

    /// Three-class mask (`0` background, `1` myocardium, `2` LV cavity).
    pub fn into_label_mask(self) -> Result<LabelMask, NiftiError> {
        let (header, labels) = self.into_labels(2)?;
        Ok(LabelMask { header, labels })
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>, NiftiError> {
    let raw = fs::read(path).map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct RawHeader {
    dims: [usize; 3],
    spacing: [f32; 3],
    datatype: DataType,
    vox_offset: usize,
    slope: f32,
    intercept: f32,
    detached: bool,
}

fn parse_header<B: ByteOrder>(h: &[u8]) -> Result<RawHeader, NiftiError> {
    let magic: [u8; 4] = h[344..348].try_into().expect("4 bytes");
    let detached = match &magic {
        b"n+1\0" => false,
        b"ni1\0" => true,
        _ => return Err(NiftiError::BadMagic(magic)),
    };
    let dim: Vec<i16> = (0..8).map(|i| B::read_i16(&h[40 + 2 * i..])).collect();
    if !(2..=4).contains(&dim[0]) {
        return Err(NiftiError::UnsupportedDims(dim[0]));
    }
    let mut dims = [1usize; 3];
    for (i, d) in dims.iter_mut().enumerate().take(dim[0].min(3) as usize) {
        if dim[i + 1] < 1 {
            return Err(NiftiError::Header(format!(
                "dim[{}] = {} must be >= 1",
                i + 1,
                dim[i + 1]
            )));
        }
        *d = dim[i + 1] as usize;
    }
    let datatype = match B::read_i16(&h[70..]) {
        DT_UINT8 => DataType::Uint8,
        DT_INT16 => DataType::Int16,
        DT_FLOAT32 => DataType::Float32,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let mut spacing = [1.0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let v = B::read_f32(&h[76 + 4 * (i + 1)..]).abs();
        // dimensions beyond dim[0] may carry a zero pixdim
        *s = if v > 0.0 && v.is_finite() { v } else { 1.0 };
    }
    let vox_offset = B::read_f32(&h[108..]);
    if !(vox_offset >= 0.0) || (!detached && (vox_offset as usize) < HEADER_SIZE) {
        return Err(NiftiError::Header(format!(
            "vox_offset {vox_offset} invalid"
        )));
    }
    Ok(RawHeader {
        dims,
        spacing,
        datatype,
        vox_offset: vox_offset as usize,
        slope: B::read_f32(&h[112..]),
        intercept: B::read_f32(&h[116..]),
        detached,
    })
}

fn decode_values<B: ByteOrder>(payload: &[u8], hdr: &RawHeader) -> Result<Vec<f32>, NiftiError> {
    let count: usize = hdr.dims.iter().product();
    let width = hdr.datatype.byte_width();
    let needed = count * width;
    if payload.len() < needed {
        return Err(NiftiError::Truncated {
            needed,
            found: payload.len(),
        });
    }
    let payload = &payload[..needed];
    let mut values: Vec<f32> = match hdr.datatype {
        DataType::Uint8 => payload.iter().map(|&b| b as f32).collect(),
        DataType::Int16 => payload
            .chunks_exact(2)
            .map(|c| B::read_i16(c) as f32)
            .collect(),
        DataType::Float32 => payload.chunks_exact(4).map(B::read_f32).collect(),
    };
    if hdr.slope != 0.0 && hdr.slope.is_finite() && !(hdr.slope == 1.0 && hdr.intercept == 0.0) {
        values
            .iter_mut()
            .for_each(|v| *v = *v * hdr.slope + hdr.intercept);
    }
    Ok(values)
}

/// Reads a NIfTI-1 image (optionally gzip-compressed). A `ni1` header reads
/// its payload from the sibling `.img` file.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage, NiftiError> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            needed: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let h = &bytes[..HEADER_SIZE];
    let (hdr, values) = if LittleEndian::read_i32(h) == HEADER_SIZE as i32 {
        let hdr = parse_header::<LittleEndian>(h)?;
        let payload = payload_for(path, &bytes, &hdr)?;
        let values = decode_values::<LittleEndian>(&payload, &hdr)?;
        (hdr, values)
    } else if BigEndian::read_i32(h) == HEADER_SIZE as i32 {
        let hdr = parse_header::<BigEndian>(h)?;
        let payload = payload_for(path, &bytes, &hdr)?;
        let values = decode_values::<BigEndian>(&payload, &hdr)?;
        (hdr, values)
    } else {
        return Err(NiftiError::Header(format!(
            "sizeof_hdr is {} (expected 348)",
            LittleEndian::read_i32(h)
        )));
    };
    let header = VolumeHeader {
        dims: hdr.dims,
        spacing_mm: hdr.spacing,
        datatype: hdr.datatype,
        slope: hdr.slope,
        intercept: hdr.intercept,
    };
    Ok(NiftiImage { header, values })
}

fn payload_for(path: &Path, bytes: &[u8], hdr: &RawHeader) -> Result<Vec<u8>, NiftiError> {
    if hdr.detached {
        let img = path.with_extension("img");
        let data = read_all(&img)?;
        Ok(data.get(hdr.vox_offset..).unwrap_or_default().to_vec())
    } else {
        Ok(bytes.get(hdr.vox_offset..).unwrap_or_default().to_vec())
    }
}

fn encode_header(dims: [usize; 3], spacing: [f32; 3], datatype: DataType) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r'; // regular
    let dim = [
        3i16,
        dims[0] as i16,
        dims[1] as i16,
        dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    let (code, bitpix) = match datatype {
        DataType::Uint8 => (DT_UINT8, 8),
        DataType::Int16 => (DT_INT16, 16),
        DataType::Float32 => (DT_FLOAT32, 32),
    };
    LittleEndian::write_i16(&mut h[70..], code);
    LittleEndian::write_i16(&mut h[72..], bitpix);
    let pixdim = [
        1.0f32, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_f32(&mut h[116..], 0.0);
    h[123] = 2 | 8; // mm, seconds
                    // sform: diagonal voxel-to-mm affine
    LittleEndian::write_i16(&mut h[254..], 1);
    LittleEndian::write_f32(&mut h[280..], spacing[0]);
    LittleEndian::write_f32(&mut h[280 + 16 + 4..], spacing[1]);
    LittleEndian::write_f32(&mut h[280 + 32 + 8..], spacing[2]);
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_bytes(path: &Path, bytes: &[u8], gzip: bool) -> Result<(), NiftiError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    if gzip {
        let mut enc = GzEncoder::new(&mut w, Compression::default());
        enc.write_all(bytes).map_err(io_err(path))?;
        enc.finish().map_err(io_err(path))?;
    } else {
        w.write_all(bytes).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes a float32 volume. The header's scaling is not applied: stored
/// values are the volume's values with slope 1 and intercept 0.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>, gzip: bool) -> Result<(), NiftiError> {
    let mut bytes = encode_header(
        volume.header.dims,
        volume.header.spacing_mm,
        DataType::Float32,
    );
    bytes.reserve(volume.values.len() * 4);
    for v in &volume.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path.as_ref(), &bytes, gzip)
}

/// Writes an 8-bit label mask.
pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>, gzip: bool) -> Result<(), NiftiError> {
    write_labels(
        mask.header.dims,
        mask.header.spacing_mm,
        &mask.labels,
        path,
        gzip,
    )
}

pub fn write_labels(
    dims: [usize; 3],
    spacing: [f32; 3],
    labels: &[u8],
    path: impl AsRef<Path>,
    gzip: bool,
) -> Result<(), NiftiError> {
    let mut bytes = encode_header(dims, spacing, DataType::Uint8);
    bytes.extend_from_slice(labels);
    write_bytes(path.as_ref(), &bytes, gzip)
}

/// Whether the path names a NIfTI file by extension.
pub fn is_nifti_path(path: &Path) -> bool {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    name.ends_with(".nii") || name.ends_with(".nii.gz") || name.ends_with(".hdr")
}
