//! Checkpoint container: model spec, flat parameters and batch-norm
//! running statistics in a little-endian binary layout that round-trips
//! bit-exactly across machines.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{Architecture, BnRunningStats, ModelSpec, ParameterVector};
use crate::tensor::{BnLayerStats, Scalar};

const MAGIC: &[u8; 4] = b"LTCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint precision tag {got} does not match requested scalar ({want})")]
    Precision { got: u8, want: u8 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint does not match its model spec: {0}")]
    Inconsistent(String),
}

/// A pre-trained model ready for evaluation or adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub spec: ModelSpec,
    pub params: ParameterVector<S>,
    pub bn_stats: BnRunningStats<S>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn scalars<S: Scalar>(&mut self, count: usize) -> Result<Vec<S>, CheckpointError> {
        let bytes = self.take(count * S::BYTES)?;
        Ok(bytes.chunks_exact(S::BYTES).map(S::read_le).collect())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_spec(out: &mut Vec<u8>, spec: &ModelSpec) {
    out.push(match spec.arch {
        Architecture::MnistCnn => 0,
        Architecture::Mlp => 1,
    });
    put_u32(out, spec.class_count as u32);
    put_u32(out, spec.input.0 as u32);
    put_u32(out, spec.input.1 as u32);
    put_u32(out, spec.input.2 as u32);
    put_u32(out, spec.hidden.len() as u32);
    for &h in &spec.hidden {
        put_u32(out, h as u32);
    }
    out.push(spec.mlp_bias as u8);
}

fn decode_spec(r: &mut Reader) -> Result<ModelSpec, CheckpointError> {
    let arch = match r.u8()? {
        0 => Architecture::MnistCnn,
        1 => Architecture::Mlp,
        other => {
            return Err(CheckpointError::Inconsistent(format!(
                "unknown architecture tag {other}"
            )))
        }
    };
    let class_count = r.u32()? as usize;
    let input = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let hidden_len = r.u32()? as usize;
    let mut hidden = Vec::with_capacity(hidden_len);
    for _ in 0..hidden_len {
        hidden.push(r.u32()? as usize);
    }
    let mlp_bias = r.u8()? != 0;
    Ok(ModelSpec {
        arch,
        class_count,
        input,
        hidden,
        mlp_bias,
    })
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    ckpt: &Checkpoint<S>,
) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(S::TAG);
    encode_spec(&mut out, &ckpt.spec);
    put_u64(&mut out, ckpt.params.len() as u64);
    for &v in ckpt.params.values() {
        v.write_le(&mut out);
    }
    put_u32(&mut out, ckpt.bn_stats.layers.len() as u32);
    for layer in &ckpt.bn_stats.layers {
        put_u32(&mut out, layer.mean.len() as u32);
        for &v in &layer.mean {
            v.write_le(&mut out);
        }
        for &v in &layer.var {
            v.write_le(&mut out);
        }
    }
    fs::write(path, out).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>, CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let tag = r.u8()?;
    if tag != S::TAG {
        return Err(CheckpointError::Precision {
            got: tag,
            want: S::TAG,
        });
    }
    let spec = decode_spec(&mut r)?;
    let param_len = r.u64()? as usize;
    let layout = spec.layout();
    if layout.total_len() != param_len {
        return Err(CheckpointError::Inconsistent(format!(
            "spec implies {} parameters, file stores {param_len}",
            layout.total_len()
        )));
    }
    let values = r.scalars::<S>(param_len)?;
    let params = ParameterVector::new(layout, values)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    let layer_count = r.u32()? as usize;
    let expected = spec.bn_channels();
    if layer_count != expected.len() {
        return Err(CheckpointError::Inconsistent(format!(
            "spec implies {} batchnorm layers, file stores {layer_count}",
            expected.len()
        )));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for channels in expected {
        let stored = r.u32()? as usize;
        if stored != channels {
            return Err(CheckpointError::Inconsistent(format!(
                "batchnorm layer has {channels} channels, file stores {stored}"
            )));
        }
        let mean = r.scalars::<S>(channels)?;
        let var = r.scalars::<S>(channels)?;
        layers.push(BnLayerStats { mean, var });
    }
    Ok(Checkpoint {
        spec,
        params,
        bn_stats: BnRunningStats { layers },
    })
}
