//! Single-file checkpoint: one JSON header line, then the tensor payloads as
//! row-major little-endian `f64`. Tensor offsets are relative to the first
//! payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassCentroids, RunConfig};
use crate::diffkernel::Matrix;
use crate::error::{Error, Result};
use crate::gnn::{
    AggregationMode, Domain, ModelBundle, NsawLayer, PredictorHead, ProjectionEncoder, SOURCE_ENCODER,
    TARGET_ENCODER,
};

pub const CHECKPOINT_VERSION: u32 = 1;

const CENTROID_NORMAL: &str = "centroids.normal";
const CENTROID_ANOMALY: &str = "centroids.anomaly";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub bundle: ModelBundle,
    pub centroids: Option<ClassCentroids>,
}

impl Checkpoint {
    /// Fails unless the stored bundle aggregates in `mode`.
    pub fn ensure_mode(&self, mode: AggregationMode) -> Result<()> {
        if self.bundle.mode() != mode {
            return Err(Error::Config(format!(
                "checkpoint was trained with {:?} aggregation, {:?} requested",
                self.bundle.mode(),
                mode
            )));
        }
        Ok(())
    }

    pub fn require_centroids(&self) -> Result<&ClassCentroids> {
        self.centroids
            .as_ref()
            .ok_or_else(|| Error::Data("checkpoint has no class centroids".into()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    byte_offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
}

fn encode(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    let Checkpoint {
        config,
        bundle,
        centroids,
    } = checkpoint;
    bundle.validate()?;
    let mut config = config.clone();
    config.nsaw_enabled = bundle.nsaw_enabled;
    config.identity_encoder = bundle.source_encoder.is_identity();

    let mut owned = Vec::new();
    if let Some(c) = centroids {
        c.validate()?;
        owned.push((CENTROID_NORMAL.to_string(), Matrix::from_vec(1, c.dim(), c.normal.clone())?));
        owned.push((CENTROID_ANOMALY.to_string(), Matrix::from_vec(1, c.dim(), c.anomaly.clone())?));
    }
    let mut tensors: Vec<(String, &Matrix)> = bundle.named_tensors();
    tensors.extend(owned.iter().map(|(n, m)| (n.clone(), m)));

    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, m) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            byte_offset: payload.len(),
        });
        for &x in m.as_slice() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config,
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(checkpoint)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(detail: impl std::fmt::Display) -> Error {
    Error::Data(format!("corrupt tensor block: {detail}"))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Data("corrupt checkpoint header: no header line".into()))?;
    let header_value: serde_json::Value = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Data(format!("corrupt checkpoint header: {e}")))?;
    match header_value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Data(format!(
                "checkpoint version mismatch: file has {v}, expected {CHECKPOINT_VERSION}"
            )))
        }
        None => return Err(Error::Data("corrupt checkpoint header: no version".into())),
    }
    let header: Header = serde_json::from_value(header_value)
        .map_err(|e| Error::Data(format!("corrupt checkpoint header: {e}")))?;
    let payload = &bytes[split + 1..];

    let mut expected = 0usize;
    let mut tensors = BTreeMap::new();
    for t in &header.tensors {
        let len = t.rows * t.cols * 8;
        if t.byte_offset != expected {
            return Err(corrupt(format!("{} starts at {}, expected {expected}", t.name, t.byte_offset)));
        }
        let end = t.byte_offset + len;
        if end > payload.len() {
            return Err(corrupt(format!("{} needs {end} bytes, payload has {}", t.name, payload.len())));
        }
        let data = payload[t.byte_offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if tensors
            .insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, data)?)
            .is_some()
        {
            return Err(corrupt(format!("duplicate tensor {}", t.name)));
        }
        expected = end;
    }
    if expected != payload.len() {
        return Err(corrupt(format!("{} trailing bytes", payload.len() - expected)));
    }

    let config = header.config;
    let mut take = |name: &str| -> Result<Matrix> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {name}")))
    };
    let source_encoder = if config.identity_encoder {
        ProjectionEncoder::identity(Domain::Source, config.dims.embedding_dim)
    } else {
        ProjectionEncoder::from_weight(Domain::Source, take(SOURCE_ENCODER)?)
    };
    let target_encoder = take(TARGET_ENCODER)
        .ok()
        .map(|w| ProjectionEncoder::from_weight(Domain::Target, w));
    let mut layers = Vec::with_capacity(config.dims.num_layers);
    for i in 0..config.dims.num_layers {
        layers.push(NsawLayer {
            weight: take(&format!("layers.{i}.weight"))?,
            bias: take(&format!("layers.{i}.bias"))?,
            attention: take(&format!("layers.{i}.attention"))?,
        });
    }
    let predictor = PredictorHead {
        hidden_weight: take("predictor.hidden.weight")?,
        hidden_bias: take("predictor.hidden.bias")?,
        out_weight: take("predictor.out.weight")?,
        out_bias: take("predictor.out.bias")?,
    };
    let centroids = match (take(CENTROID_NORMAL).ok(), take(CENTROID_ANOMALY).ok()) {
        (Some(n), Some(a)) => Some(ClassCentroids {
            normal: n.into_vec(),
            anomaly: a.into_vec(),
        }),
        (None, None) => None,
        _ => return Err(Error::Data("checkpoint has only one class centroid".into())),
    };
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Data(format!("checkpoint has unknown tensor {name}")));
    }
    let bundle = ModelBundle {
        source_encoder,
        target_encoder,
        layers,
        predictor,
        nsaw_enabled: config.nsaw_enabled,
    };
    bundle.validate()?;
    if let Some(c) = &centroids {
        c.validate()?;
    }
    Ok(Checkpoint {
        config,
        bundle,
        centroids,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
