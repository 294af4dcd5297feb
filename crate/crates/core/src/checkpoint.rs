//! Binary checkpoint files: a JSON header describing the segment layout,
//! model architecture and optimizer, followed by raw little-endian f64
//! parameter values (and moment arrays when the optimizer is adaptive).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::OptimizerState;
use crate::params::{ParamVector, Segment};

const MAGIC: &[u8; 4] = b"OWCP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header parse error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("bad magic or version")]
    Format,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    kind: crate::optim::OptimizerKind,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    segments: Vec<Segment>,
    optimizer: Option<OptimizerMeta>,
    /// Arbitrary caller metadata, e.g. the model architecture specs.
    extra: serde_json::Value,
}

pub fn save(
    path: &Path,
    params: &ParamVector,
    optimizer: Option<&OptimizerState>,
    extra: serde_json::Value,
) -> Result<(), CheckpointError> {
    let header = Header {
        segments: params.segments().to_vec(),
        optimizer: optimizer.map(|o| OptimizerMeta {
            kind: o.kind,
            step: o.step,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }),
        extra,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for &v in params.values() {
        w.write_f64::<LittleEndian>(v)?;
    }
    if let Some(o) = optimizer {
        for &v in o.m.iter().chain(o.v.iter()) {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(
    path: &Path,
) -> Result<(ParamVector, Option<OptimizerState>, serde_json::Value), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC || r.read_u32::<LittleEndian>()? != VERSION {
        return Err(CheckpointError::Format);
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let total: usize = header.segments.iter().map(|s| s.len()).sum();
    let mut builder = ParamVector::builder();
    let mut values = vec![0.0; total];
    for v in values.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    for seg in &header.segments {
        builder = builder.push(&seg.name, seg.rows, seg.cols, values[seg.range()].to_vec());
    }
    let params = builder.build();

    let optimizer = match header.optimizer {
        Some(meta) => {
            let mut m = vec![0.0; total];
            let mut v = vec![0.0; total];
            for x in m.iter_mut() {
                *x = r.read_f64::<LittleEndian>()?;
            }
            for x in v.iter_mut() {
                *x = r.read_f64::<LittleEndian>()?;
            }
            Some(OptimizerState {
                kind: meta.kind,
                step: meta.step,
                lr: meta.lr,
                beta1: meta.beta1,
                beta2: meta.beta2,
                eps: meta.eps,
                m,
                v,
            })
        }
        None => None,
    };

    Ok((params, optimizer, header.extra))
}
