//! `A2I1` parameter checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::container;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"A2I1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset relative to the start of the float payload.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    architecture: serde_json::Value,
    params: Vec<ParamEntry>,
}

pub fn encode(architecture: &serde_json::Value, params: &ParamStore) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for p in params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: (payload.len() * 8) as u64,
            trainable: p.trainable,
        });
        payload.extend_from_slice(p.value.data());
    }
    container::encode(
        MAGIC,
        &Header {
            architecture: architecture.clone(),
            params: entries,
        },
        &payload,
    )
}

pub struct LoadedCheckpoint {
    pub architecture: serde_json::Value,
    pub params: Vec<(ParamEntry, Tensor)>,
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<LoadedCheckpoint> {
    let d: container::Decoded<Header> = container::decode(MAGIC, bytes, path)?;
    let mut params = Vec::with_capacity(d.header.params.len());
    for e in d.header.params {
        let n: usize = e.shape.iter().product();
        let start = (e.offset / 8) as usize;
        if e.offset % 8 != 0 || start + n > d.payload.len() {
            return Err(Error::format(
                path,
                d.payload_offset + e.offset,
                format!("parameter {} extends past end of payload", e.name),
            ));
        }
        let t = Tensor::new(e.shape.clone(), d.payload[start..start + n].to_vec())?;
        params.push((e, t));
    }
    Ok(LoadedCheckpoint {
        architecture: d.header.architecture,
        params,
    })
}

/// Overwrites every parameter of `store` from `loaded`, matching by name
/// and requiring identical shapes and parameter sets.
pub fn restore(store: &mut ParamStore, loaded: LoadedCheckpoint) -> Result<()> {
    if loaded.params.len() != store.len() {
        return Err(Error::data(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.params.len(),
            store.len()
        )));
    }
    for (entry, tensor) in loaded.params {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::data(format!("unknown parameter {} in checkpoint", entry.name)))?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "checkpoint restore",
                left: store.value(id).shape().to_vec(),
                right: tensor.shape().to_vec(),
            });
        }
        *store.value_mut(id) = tensor;
        store.set_trainable(id, entry.trainable);
    }
    Ok(())
}
