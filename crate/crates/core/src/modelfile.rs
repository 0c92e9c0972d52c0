//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CNF1" | version: u32 | meta_len: u32 | meta: JSON (meta_len bytes)
//!        | tensor_count: u32 | per tensor: ndim: u32, dims: u32 × ndim,
//!          values: f64 × product(dims)
//! ```
//!
//! Tensors appear in network parameter order (weight, bias per layer).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainedModel, REPORT_SCHEMA_VERSION};
use crate::nn::Network;
use crate::optim::ParamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CNF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    class_names: Vec<String>,
    seed: u64,
    fresh_per_fold: bool,
    weight_decay_on_bias: bool,
    report_schema_version: u32,
    history: Vec<Vec<f64>>,
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::ModelFile(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &TrainedModel) -> Result<Vec<u8>> {
    let meta = Metadata {
        config: model.config.clone(),
        class_names: model.class_names.clone(),
        seed: model.seed,
        fresh_per_fold: model.fresh_per_fold,
        weight_decay_on_bias: true,
        report_schema_version: REPORT_SCHEMA_VERSION,
        history: model.history.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    push_u32(&mut out, model.params.params.len())?;
    for t in &model.params.params {
        push_u32(&mut out, t.ndim())?;
        for &d in t.shape() {
            push_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::ModelFile(format!(
                "truncated at offset {}: needed {n} bytes for {what}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::ModelFile("bad magic bytes; not a cnf model file".into()));
    }
    let version = r.u32("format version")?;
    if version > FORMAT_VERSION as usize {
        return Err(Error::ModelFile(format!(
            "format version {version} is newer than this build supports ({FORMAT_VERSION}); upgrade cnf to read it"
        )));
    }
    if version == 0 {
        return Err(Error::ModelFile("format version 0 is invalid".into()));
    }
    let meta_len = r.u32("metadata length")?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::ModelFile(format!("corrupt metadata: {e}")))?;
    let network = Network::from_config(&meta.config)?;
    let count = r.u32("tensor count")?;
    if count != network.param_shapes().len() {
        return Err(Error::ModelFile(format!(
            "file holds {count} tensors but the {} config needs {}",
            meta.config.name,
            network.param_shapes().len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (i, expected) in network.param_shapes().iter().enumerate() {
        let ndim = r.u32("tensor rank")?;
        let shape = (0..ndim).map(|_| r.u32("tensor dimension")).collect::<Result<Vec<_>>>()?;
        if &shape != expected {
            return Err(Error::ModelFile(format!(
                "tensor {i} has shape {shape:?}, config expects {expected:?}"
            )));
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFile(format!("{} trailing bytes after offset {}", bytes.len() - r.pos, r.pos)));
    }
    Ok(TrainedModel {
        config: meta.config,
        network,
        params: ParamState::new(params),
        class_names: meta.class_names,
        history: meta.history,
        seed: meta.seed,
        fresh_per_fold: meta.fresh_per_fold,
    })
}

/// Writes `bytes` through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
