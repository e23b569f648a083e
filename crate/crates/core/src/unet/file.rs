//! Binary model and checkpoint files.
//!
//! Layout: magic `CSG1`, one version byte, a little-endian `u32` byte
//! length, that many bytes of UTF-8 JSON header, then every tensor listed in
//! the header as little-endian `f32` values in header order. Models list the
//! parameters followed by each norm layer's running mean and variance.
//! Checkpoints additionally list the Adam moments as `adam.m.<name>` and
//! `adam.v.<name>`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Layout, Result, UNet, UNetConfig, UNetError};
use crate::tensor::{AdamConfig, AdamState, Parameter, RunningStats, Tensor};

pub const MODEL_MAGIC: [u8; 4] = *b"CSG1";
pub const MODEL_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: UNetConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam: Option<AdamHeader>,
}

/// Tensor names and shapes implied by a configuration.
fn expected_entries(layout: &Layout, with_adam: bool) -> Vec<TensorEntry> {
    let mut out: Vec<TensorEntry> = layout
        .params
        .iter()
        .map(|(name, shape, _)| TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
        })
        .collect();
    for (name, c) in &layout.stats {
        for suffix in ["running_mean", "running_var"] {
            out.push(TensorEntry {
                name: format!("{name}.{suffix}"),
                shape: vec![*c],
            });
        }
    }
    if with_adam {
        for moment in ["m", "v"] {
            for (name, shape, _) in &layout.params {
                out.push(TensorEntry {
                    name: format!("adam.{moment}.{name}"),
                    shape: shape.clone(),
                });
            }
        }
    }
    out
}

/// Serializes a model, plus optimizer state for a checkpoint.
pub fn encode_model(model: &UNet, adam: Option<&[AdamState]>) -> Result<Vec<u8>> {
    let adam_header = match adam {
        None => None,
        Some(states) => {
            if states.len() != model.params.len() {
                return Err(UNetError::ShapeChain(format!(
                    "{} optimizer states for {} parameters",
                    states.len(),
                    model.params.len()
                )));
            }
            let first = states
                .first()
                .map(|s| (s.t, s.config))
                .unwrap_or((0, AdamConfig::default()));
            if states.iter().any(|s| s.t != first.0 || s.config != first.1) {
                return Err(UNetError::ShapeChain(
                    "optimizer states disagree on step or config".into(),
                ));
            }
            Some(AdamHeader {
                step: first.0,
                beta1: first.1.beta1,
                beta2: first.1.beta2,
                epsilon: first.1.epsilon,
            })
        }
    };
    let header = Header {
        config: model.config.clone(),
        tensors: expected_entries(&model.layout, adam.is_some()),
        adam: adam_header,
    };
    let json = serde_json::to_vec(&header).map_err(|e| UNetError::Header(e.to_string()))?;

    let mut tensors: Vec<&Tensor> = model.params.iter().map(|p| &p.value).collect();
    for s in &model.stats {
        tensors.push(&s.mean);
        tensors.push(&s.var);
    }
    if let Some(states) = adam {
        tensors.extend(states.iter().map(|s| &s.m));
        tensors.extend(states.iter().map(|s| &s.v));
    }
    for (t, e) in tensors.iter().zip(&header.tensors) {
        if t.shape() != e.shape.as_slice() {
            return Err(UNetError::ShapeChain(format!(
                "{} has shape {:?}, expected {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
    }

    let floats: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(9 + json.len() + 4 * floats);
    out.extend_from_slice(&MODEL_MAGIC);
    out.push(MODEL_VERSION);
    let len =
        u32::try_from(json.len()).map_err(|_| UNetError::Header("header too large".into()))?;
    out.write_u32::<LittleEndian>(len)?;
    out.extend_from_slice(&json);
    for t in tensors {
        for &v in t.data() {
            out.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(out)
}

/// Parses a model or checkpoint. Optimizer states are returned only when the
/// file carries them.
pub fn decode_model(bytes: &[u8]) -> Result<(UNet, Option<Vec<AdamState>>)> {
    let prefix = &bytes[..bytes.len().min(4)];
    if prefix != &MODEL_MAGIC[..prefix.len()] {
        return Err(UNetError::BadMagic);
    }
    if bytes.len() < 9 {
        return Err(UNetError::Truncated(format!(
            "{} bytes is shorter than the preamble",
            bytes.len()
        )));
    }
    if bytes[4] != MODEL_VERSION {
        return Err(UNetError::Version {
            found: bytes[4],
            expected: MODEL_VERSION,
        });
    }
    let mut cur = Cursor::new(&bytes[5..]);
    let len = cur.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    cur.read_exact(&mut json)
        .map_err(|_| UNetError::Truncated(format!("header of {len} bytes is cut short")))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| UNetError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| UNetError::Header(e.to_string()))?;

    let mut model = UNet::<f32>::build(header.config.clone())?;
    let expected = expected_entries(&model.layout, header.adam.is_some());
    if header.tensors.len() != expected.len() {
        return Err(UNetError::ShapeChain(format!(
            "{} tensors listed, configuration implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    if let Some((got, want)) = header.tensors.iter().zip(&expected).find(|(g, w)| g != w) {
        return Err(UNetError::ShapeChain(format!(
            "tensor {} {:?} where the configuration implies {} {:?}",
            got.name, got.shape, want.name, want.shape
        )));
    }

    let floats: usize = expected
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    let payload = &bytes[9 + len..];
    if payload.len() < 4 * floats {
        return Err(UNetError::Truncated(format!(
            "{} payload bytes, need {}",
            payload.len(),
            4 * floats
        )));
    }
    if payload.len() > 4 * floats {
        return Err(UNetError::Header(format!(
            "{} trailing bytes after the last tensor",
            payload.len() - 4 * floats
        )));
    }
    let mut cur = Cursor::new(payload);
    let mut read = |shape: &[usize]| -> Result<Tensor> {
        let mut data = vec![0f32; shape.iter().product()];
        cur.read_f32_into::<LittleEndian>(&mut data)?;
        Ok(Tensor::new(shape, data)?)
    };
    for p in &mut model.params {
        *p = Parameter::new(p.name.clone(), read(p.value.shape())?);
    }
    for s in &mut model.stats {
        let c = [s.channels()];
        *s = RunningStats {
            mean: read(&c)?,
            var: read(&c)?,
            initialized: true,
        };
    }
    let adam = match header.adam {
        None => None,
        Some(h) => {
            let config = AdamConfig {
                beta1: h.beta1,
                beta2: h.beta2,
                epsilon: h.epsilon,
            };
            let ms = model
                .params
                .iter()
                .map(|p| read(p.value.shape()))
                .collect::<Result<Vec<_>>>()?;
            let mut states = Vec::with_capacity(ms.len());
            for (m, p) in ms.into_iter().zip(&model.params) {
                states.push(AdamState {
                    m,
                    v: read(p.value.shape())?,
                    t: h.step,
                    config,
                });
            }
            Some(states)
        }
    };
    Ok((model, adam))
}

pub fn save_model(model: &UNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model, None)?)?;
    Ok(())
}

/// Loads model weights; optimizer state in a checkpoint file is ignored.
pub fn load_model(path: impl AsRef<Path>) -> Result<UNet> {
    Ok(decode_model(&fs::read(path)?)?.0)
}

pub fn save_checkpoint(model: &UNet, adam: &[AdamState], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model, Some(adam))?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(UNet, Option<Vec<AdamState>>)> {
    decode_model(&fs::read(path)?)
}
