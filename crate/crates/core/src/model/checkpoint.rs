//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FLGTCKPT"  u32 format_version
//! u32 header_len, header bytes (TOML echo of the model config + label names)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, u64 dims[ndim], f64 values[..]
//! ```
//!
//! Frozen label-side tensors are stored under the `frozen.` prefix and are
//! kept apart from the trainable parameters on load.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LabelGuide, ModelConfig};
use crate::embeddings::{EmbeddingMatrix, Provenance, StateEmbeddings};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FLGTCKPT";
pub const FORMAT_VERSION: u32 = 1;

const FROZEN_LABELS: &str = "frozen.label_embeddings";
const FROZEN_POSITIVE: &str = "frozen.state_positive";
const FROZEN_NEGATIVE: &str = "frozen.state_negative";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    label_names: Vec<String>,
    label_provenance: Option<Provenance>,
}

/// Everything needed to run the model again: config, trainable parameters
/// and frozen label inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub guide: LabelGuide,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.config.clone(),
            label_names: self
                .guide
                .labels
                .as_ref()
                .map(|l| l.names().to_vec())
                .unwrap_or_default(),
            label_provenance: self.guide.labels.as_ref().map(EmbeddingMatrix::provenance),
        };
        let header = toml::to_string(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());

        let mut frozen: Vec<(&str, Tensor)> = Vec::new();
        if let Some(l) = &self.guide.labels {
            frozen.push((FROZEN_LABELS, l.rows().clone()));
        }
        frozen.push((
            FROZEN_POSITIVE,
            Tensor::vector(self.guide.states.positive().to_vec()),
        ));
        frozen.push((
            FROZEN_NEGATIVE,
            Tensor::vector(self.guide.states.negative().to_vec()),
        ));

        put_u32(&mut out, (self.params.len() + frozen.len()) as u32);
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        for (name, t) in &frozen {
            put_tensor(&mut out, name, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = read_u32(&mut r)? as usize;
        let htext = take(&mut r, hlen)?;
        let htext = std::str::from_utf8(htext)
            .map_err(|_| CheckpointError::Corrupt("header is not UTF-8".into()))?;
        let header: Header =
            toml::from_str(htext).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

        let count = read_u32(&mut r)?;
        let mut params = ParameterSet::new();
        let mut frozen_labels = None;
        let mut positive = None;
        let mut negative = None;
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, nlen)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let raw = take(&mut r, 8)?;
                shape.push(u64::from_le_bytes(raw.try_into().expect("8 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(
                &mut r,
                n.checked_mul(8).ok_or_else(|| {
                    CheckpointError::Corrupt(format!("tensor `{name}` is too large"))
                })?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t =
                Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            match name.as_str() {
                FROZEN_LABELS => frozen_labels = Some(t),
                FROZEN_POSITIVE => positive = Some(t.into_data()),
                FROZEN_NEGATIVE => negative = Some(t.into_data()),
                _ => {
                    params.insert(&name, t);
                }
            }
        }
        if !r.is_empty() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                r.len()
            )));
        }
        let states = StateEmbeddings::new(
            positive.ok_or_else(|| CheckpointError::Corrupt("missing positive state".into()))?,
            negative.ok_or_else(|| CheckpointError::Corrupt("missing negative state".into()))?,
        )
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let labels = frozen_labels
            .map(|rows| {
                EmbeddingMatrix::new(
                    header.label_names.clone(),
                    rows,
                    header.label_provenance.unwrap_or(Provenance::File),
                )
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))
            })
            .transpose()?;
        let expected: Vec<String> = header
            .model
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut got: Vec<String> = params.names().map(str::to_string).collect();
        let mut want = expected.clone();
        got.sort();
        want.sort();
        if got != want {
            return Err(CheckpointError::Corrupt(
                "parameter names do not match the stored model config".into(),
            ));
        }
        Ok(Checkpoint {
            config: header.model,
            params,
            guide: LabelGuide { labels, states },
        })
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(CheckpointError::Corrupt("unexpected end of file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let raw = take(r, 4)?;
    Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
